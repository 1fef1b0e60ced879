"""Decoding order over multi-scale tokens, causal mask, conditional inputs and windows.

Scale ``i`` (1-based, coarsest first) splits its row-major token list into
``2**(i+1)`` contiguous segments. A token's decoding number is its segment
index plus the total segment count of all coarser scales, so every coarser
token precedes every finer one.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import gradcore as G
from .gradcore import DimensionError, Node, Parameter
from .tokenizer import MultiScaleLatents, ScaleLayout

START = -1  # source marker for the learnable start token


def segments_for_scale(i: int) -> int:
    """Segment count for 0-based scale index ``i``."""
    return 2 ** (i + 2)


def segment_sizes(count: int, n: int) -> list[int]:
    base, extra = divmod(count, n)
    return [base + 1 if s < extra else base for s in range(n)]


def build_mask(order) -> np.ndarray:
    o = np.asarray(order)
    return o[:, None] > o[None, :]


@dataclass(frozen=True)
class OrderPlan:
    order: np.ndarray  # [L] decoding number per token, flatten indexing
    mask: np.ndarray  # [L, L], mask[i, j] = order[i] > order[j]
    segments_per_scale: tuple[int, ...]
    offsets: tuple[int, ...]
    layout: ScaleLayout
    source: np.ndarray  # [L] flatten index feeding each token's input, START for the start token
    perm: np.ndarray  # sequence position -> flatten index

    @property
    def length(self) -> int:
        return len(self.order)

    @property
    def num_orders(self) -> int:
        """Size of the decoding-number range (including empty segments)."""
        return int(sum(self.segments_per_scale))

    @property
    def seq_order(self) -> np.ndarray:
        return self.order[self.perm]

    @property
    def seq_mask(self) -> np.ndarray:
        return build_mask(self.seq_order)

    @property
    def levels(self) -> np.ndarray:
        """Occupied decoding numbers, ascending."""
        return np.unique(self.order)

    @property
    def inverse_perm(self) -> np.ndarray:
        inv = np.empty_like(self.perm)
        inv[self.perm] = np.arange(len(self.perm))
        return inv


def build_order(layout: ScaleLayout) -> OrderPlan:
    L = layout.num_tokens
    order = np.empty(L, dtype=np.int64)
    source = np.empty(L, dtype=np.int64)
    ns, offsets = [], []
    off = 0
    last = (0, 1)  # last non-empty segment of the previous scale
    for i, info in enumerate(layout.scales):
        n = segments_for_scale(i)
        ns.append(n)
        offsets.append(off)
        sizes = segment_sizes(info.length, n)
        starts = np.concatenate([[0], np.cumsum(sizes)])
        prev = None  # flatten start of the previous non-empty segment
        for s, size in enumerate(sizes):
            if size == 0:
                continue
            lo = info.offset + starts[s]
            order[lo:lo + size] = off + s
            if prev is not None:
                source[lo:lo + size] = prev + np.arange(size)
            elif i == 0:
                source[lo:lo + size] = START
            else:
                # first segment of a finer scale: broadcast the coarser scale's last segment
                last_lo, last_size = last
                source[lo:lo + size] = last_lo + np.arange(size) * last_size // size
            prev = lo
            last = (lo, size)
        off += n
    perm = np.argsort(order, kind="stable")
    return OrderPlan(order, build_mask(order), tuple(ns), tuple(offsets), layout, source, perm)


@dataclass
class ConditionalSequence:
    inputs: Node  # [B, L, C], sequence order
    start_token: Parameter
    perm: np.ndarray


def build_conditional_inputs(y_q, plan: OrderPlan, start: Parameter) -> ConditionalSequence:
    """Entropy-model inputs in sequence order.

    ``y_q`` is ``[B, L, C]`` in flatten order. Position ``t`` of the result
    holds the embedding of ``plan.source`` for the token decoded at ``t``.
    """
    y_q = G.as_node(y_q)
    b, L, c = y_q.shape
    if L != plan.length:
        raise DimensionError(f"sequence of {L} tokens for a plan of {plan.length}")
    start_b = G.add(G.reshape(start, (1, 1, c)), np.zeros((b, 1, c)))
    table = G.concat([start_b, y_q], axis=1)
    src = plan.source[plan.perm] + 1
    return ConditionalSequence(G.gather(table, src, axis=1), start, plan.perm)


# ---------------------------------------------------------------------------
# windows
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class WindowPartition:
    groups: np.ndarray  # [G, Lg] flatten indices into the full sequence
    group_layout: ScaleLayout
    grid: tuple[int, int]  # windows along (rows, cols)

    @property
    def num_groups(self) -> int:
        return self.groups.shape[0]

    def gather(self, seq: np.ndarray) -> np.ndarray:
        """``[B, L, ...]`` -> ``[B * G, Lg, ...]``."""
        out = seq[:, self.groups]
        return out.reshape(-1, *out.shape[2:])

    def scatter(self, grouped: np.ndarray, batch: int) -> np.ndarray:
        """Inverse of :meth:`gather`."""
        gs = grouped.reshape(batch, self.num_groups, *grouped.shape[1:])
        out = np.empty((batch, self.groups.size) + gs.shape[3:], dtype=grouped.dtype)
        out[:, self.groups.reshape(-1)] = gs.reshape(batch, self.groups.size, *gs.shape[3:])
        return out


def partition_layout(layout: ScaleLayout, window_sides) -> WindowPartition:
    window_sides = list(window_sides)
    if len(window_sides) != len(layout.scales):
        raise ValueError("one window side per scale is required")
    grids = set()
    for info, ws in zip(layout.scales, window_sides):
        if info.height % ws or info.width % ws:
            raise DimensionError(f"{info.height}x{info.width} grid not divisible by window {ws}")
        grids.add((info.height // ws, info.width // ws))
    if len(grids) != 1:
        raise DimensionError(f"window sides {window_sides} give inconsistent window grids {grids}")
    gh, gw = grids.pop()
    groups = []
    for wr in range(gh):
        for wc in range(gw):
            idx = []
            for info, ws in zip(layout.scales, window_sides):
                rows = np.arange(wr * ws, (wr + 1) * ws)
                cols = np.arange(wc * ws, (wc + 1) * ws)
                idx.append((info.offset + rows[:, None] * info.width + cols[None, :]).reshape(-1))
            groups.append(np.concatenate(idx))
    group_layout = ScaleLayout.from_grids([(ws, ws) for ws in window_sides],
                                          [s.scale_factor for s in layout.scales])
    return WindowPartition(np.array(groups, dtype=np.int64), group_layout, (gh, gw))


def window_partition(latents: MultiScaleLatents, window_sides) -> list[np.ndarray]:
    """Token groups (flatten indices) for each spatial window, row-major over windows."""
    return list(partition_layout(latents.layout(), window_sides).groups)
