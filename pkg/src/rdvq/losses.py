"""Rate and distortion terms and the (tau, lambda) schedule.

Rates are measured in bits throughout, including inside the training
objective, so training estimates and coder output share a unit.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

from . import gradcore as G
from .gradcore import DimensionError, Node
from .vq import HardAssignment, SoftAssignment, codebook_loss

LN2 = math.log(2.0)

SCHEDULE = {
    "low": (0.1, (4.8, 7.2, 12.0)),
    "high": (0.01, (0.8, 1.2)),
}


@dataclass(frozen=True)
class RDConfig:
    lam: float
    tau: float
    regime: str


def schedule(regime: str, level: int) -> RDConfig:
    if regime not in SCHEDULE:
        raise KeyError(f"unknown regime {regime!r}; expected one of {sorted(SCHEDULE)}")
    tau, lams = SCHEDULE[regime]
    if not 0 <= level < len(lams):
        raise IndexError(f"regime {regime!r} has levels 0..{len(lams) - 1}, got {level}")
    return RDConfig(lams[level], tau, regime)


def schedule_for_lambda(lam: float) -> RDConfig:
    for regime, (tau, lams) in SCHEDULE.items():
        for level, value in enumerate(lams):
            if math.isclose(value, lam):
                return RDConfig(value, tau, regime)
    raise KeyError(f"lambda {lam} is not in the schedule table")


def all_schedule_entries() -> list[RDConfig]:
    return [schedule(r, i) for r, (_, lams) in SCHEDULE.items() for i in range(len(lams))]


def rate_soft(p_soft, log_q) -> Node:
    """Cross-entropy of the soft assignment under the model, in bits per token."""
    p = p_soft.p_soft if isinstance(p_soft, SoftAssignment) else G.as_node(p_soft)
    log_q = G.as_node(log_q)
    if p.shape != log_q.shape:
        raise DimensionError(f"rate_soft: p {p.shape} vs log q {log_q.shape}")
    return G.scale(G.cross_entropy(p, log_q), 1.0 / LN2)


def rate_hard(y_ind, log_q) -> float:
    """Total ideal code length of the indices, in bits."""
    lq = log_q.value if isinstance(log_q, Node) else np.asarray(log_q)
    idx = np.asarray(y_ind, dtype=np.int64)
    if lq.shape[:-1] != idx.shape:
        raise DimensionError(f"rate_hard: indices {idx.shape} vs log q {lq.shape}")
    return float(-np.take_along_axis(lq, idx[..., None], axis=-1).sum() / LN2)


def distortion(x, x_hat, y, hard: HardAssignment, beta: float = 0.25,
               extra: Sequence[Callable] = ()) -> tuple[Node, dict[str, Node]]:
    """Pixel MSE plus the VQ loss. ``extra`` terms are called as ``f(x, x_hat)``."""
    comps = {"mse": G.mse(x_hat, x), "codebook_loss": codebook_loss(y, hard, beta)}
    for n, f in enumerate(extra):
        comps[getattr(f, "__name__", f"extra{n}")] = f(x, x_hat)
    total = comps["mse"]
    for name, node in comps.items():
        if name != "mse":
            total = G.add(total, node)
    return total, comps


@dataclass
class LossReport:
    rate_bits_estimate: float
    rate_bpp: float
    distortion: float
    total: float
    components: dict[str, float] = field(default_factory=dict)

    def csv_row(self, step: int) -> dict[str, float]:
        return {
            "step": step,
            "rate_bits": self.rate_bits_estimate,
            "bpp": self.rate_bpp,
            "mse": self.components.get("mse", float("nan")),
            "codebook_loss": self.components.get("codebook_loss", float("nan")),
            "total": self.total,
        }


LOG_COLUMNS = ("step", "rate_bits", "bpp", "mse", "codebook_loss", "total")


def rd_objective(dist: Node | None, rate: Node | None, lam: float) -> Node:
    """``distortion + lam * rate``; either term may be absent."""
    if rate is None:
        return dist
    weighted = G.scale(rate, lam)
    return weighted if dist is None else G.add(dist, weighted)
