"""Codebook, hard nearest-neighbour quantization and its soft relaxation."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import gradcore as G
from .gradcore import DimensionError, Node, Parameter


@dataclass
class Codebook:
    entries: Parameter  # [K, C]

    @property
    def K(self) -> int:
        return self.entries.shape[0]

    @property
    def dim(self) -> int:
        return self.entries.shape[1]

    @property
    def frozen(self) -> bool:
        return not self.entries.learnable

    def freeze(self) -> None:
        self.entries.freeze()

    def unfreeze(self) -> None:
        self.entries.unfreeze()


def init_codebook(K: int, C: int, rng, name: str = "codebook") -> Codebook:
    # rows uniform in [-1/K, 1/K]; redraw on the (measure-zero) chance of a duplicate
    while True:
        entries = rng.uniform(-1.0 / K, 1.0 / K, size=(K, C))
        if len(np.unique(entries, axis=0)) == K:
            return Codebook(Parameter(entries, name))


@dataclass
class HardAssignment:
    y_q: Node  # codeword values, straight-through gradient to the encoder output
    y_ind: np.ndarray  # [B, L] int64
    codewords: Node  # codeword values, gradient to the codebook
    distances: np.ndarray  # [B, L, K]


@dataclass
class SoftAssignment:
    p_soft: Node  # [B, L, K]
    tau: float
    distances: Node  # [B, L, K], squared L2


def _check(y: Node, cb: Codebook) -> None:
    if y.shape[-1] != cb.dim:
        raise DimensionError(f"token width {y.shape[-1]} does not match codebook width {cb.dim}")


def squared_distances(y, cb: Codebook) -> Node:
    """``||y||^2 - 2 y.c + ||c||^2`` clamped at zero, shape ``[..., K]``."""
    y = G.as_node(y)
    _check(y, cb)
    c = cb.entries
    yy = G.sum(G.mul(y, y), axis=-1, keepdims=True)
    cc = G.sum(G.mul(c, c), axis=-1)
    cross = G.matmul(y, G.transpose(c, (1, 0)))
    return G.clamp_min(G.add(G.sub(yy, G.scale(cross, 2.0)), cc), 0.0)


def nearest(y: np.ndarray, codebook: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Numpy-only nearest codeword search; ties go to the lowest index."""
    d = (y * y).sum(-1, keepdims=True) - 2.0 * y @ codebook.T + (codebook * codebook).sum(-1)
    d = np.maximum(d, 0.0)
    return np.argmin(d, axis=-1), d


def assign_hard(y, cb: Codebook) -> HardAssignment:
    y = G.as_node(y)
    _check(y, cb)
    idx, d = nearest(y.value, cb.entries.value)
    codewords = G.gather(cb.entries, idx)
    return HardAssignment(G.straight_through(y, codewords), idx, codewords, d)


def soft_distribution(y, cb: Codebook, tau: float) -> SoftAssignment:
    if not tau > 0:
        raise ValueError(f"tau must be positive, got {tau}")
    d = squared_distances(y, cb)
    return SoftAssignment(G.softmax(G.scale(d, -1.0 / tau), axis=-1), tau, d)


def codebook_loss(y, hard: HardAssignment, beta: float = 0.25) -> Node:
    """VQ loss: codebook term on stop-grad ``y`` plus beta-weighted commitment term."""
    y = G.as_node(y)
    tokens = y.value.size // y.shape[-1]
    book = G.sub(G.stop_gradient(y), hard.codewords)
    commit = G.sub(y, G.stop_gradient(hard.codewords))
    total = G.add(G.sum(G.mul(book, book)), G.scale(G.sum(G.mul(commit, commit)), beta))
    return G.scale(total, 1.0 / tokens)


def usage_histogram(indices, K: int) -> tuple[np.ndarray, float]:
    """Codeword counts and their entropy normalised by ``log2 K``."""
    counts = np.bincount(np.asarray(indices, dtype=np.int64).reshape(-1), minlength=K)
    total = counts.sum()
    if total == 0:
        return counts, 0.0
    p = counts[counts > 0] / total
    return counts, float(-(p * np.log2(p)).sum() / np.log2(K))
