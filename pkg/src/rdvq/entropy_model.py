"""Masked-transformer predictor over codebook indices.

Positions are processed in decoding order (see :mod:`rdvq.ordering`); the
attention mask lets each position see only tokens with a strictly smaller
decoding number, so a single parallel pass yields every conditional.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import gradcore as G
from . import nn
from .gradcore import DimensionError, Node
from .ordering import ConditionalSequence, OrderPlan, build_conditional_inputs
from .vq import Codebook


class ContractError(ValueError):
    pass


@dataclass(frozen=True)
class EntropyModelConfig:
    depth: int = 2
    heads: int = 2
    model_dim: int = 32
    mlp_ratio: int = 4
    vocab: int = 64
    latent_dim: int = 8
    max_len: int = 21

    def __post_init__(self):
        if self.model_dim % self.heads:
            raise ValueError(f"model_dim {self.model_dim} not divisible by heads {self.heads}")

    @classmethod
    def full_scale(cls, max_len: int = 336) -> "EntropyModelConfig":
        return cls(depth=12, heads=8, model_dim=768, mlp_ratio=4, vocab=4096, latent_dim=32,
                   max_len=max_len)


@dataclass
class CategoricalField:
    log_probs: Node  # [B, L, K] natural log, sequence order

    def flat_order(self, plan: OrderPlan) -> np.ndarray:
        """Log-probabilities rearranged to flatten (token) order."""
        return self.log_probs.value[:, plan.inverse_perm]


def init_params(cfg: EntropyModelConfig, rng) -> nn.Params:
    D = cfg.model_dim
    p: nn.Params = {}
    nn.add_param(p, "em.start", rng.normal(0.0, 0.02, size=cfg.latent_dim))
    nn.init_linear(p, "em.in", cfg.latent_dim, D, rng)
    nn.add_param(p, "em.pos", rng.normal(0.0, 0.02, size=(cfg.max_len, D)))
    for layer in range(cfg.depth):
        n = f"em.l{layer}"
        nn.init_norm(p, f"{n}.ln1", D)
        nn.init_linear(p, f"{n}.qkv", D, 3 * D, rng)
        nn.init_linear(p, f"{n}.proj", D, D, rng, gain=0.5)
        nn.init_norm(p, f"{n}.ln2", D)
        nn.init_linear(p, f"{n}.fc1", D, cfg.mlp_ratio * D, rng)
        nn.init_linear(p, f"{n}.fc2", cfg.mlp_ratio * D, D, rng, gain=0.5)
    nn.init_norm(p, "em.lnf", D)
    # zero head: every position starts at the uniform distribution
    nn.add_param(p, "em.head.w", np.zeros((D, cfg.vocab)))
    nn.add_param(p, "em.head.b", np.zeros(cfg.vocab))
    return p


def predict(seq: ConditionalSequence, plan: OrderPlan, cfg: EntropyModelConfig,
            params: nn.Params) -> CategoricalField:
    x = seq.inputs
    b, L, c = x.shape
    if L != plan.length:
        raise DimensionError(f"sequence length {L} does not match plan length {plan.length}")
    if c != cfg.latent_dim or L > cfg.max_len:
        raise DimensionError(f"inputs {x.shape} incompatible with {cfg}")
    D, H = cfg.model_dim, cfg.heads
    dh = D // H
    mask = plan.seq_mask
    h = G.add(nn.linear(params, "em.in", x), G.getitem(params["em.pos"], slice(0, L)))
    for layer in range(cfg.depth):
        n = f"em.l{layer}"
        qkv = nn.linear(params, f"{n}.qkv", nn.layernorm(params, f"{n}.ln1", h))
        qkv = G.transpose(G.reshape(qkv, (b, L, 3, H, dh)), (2, 0, 3, 1, 4))
        att = G.masked_attention(qkv[0], qkv[1], qkv[2], mask, fallback=0)
        att = G.reshape(G.transpose(att, (0, 2, 1, 3)), (b, L, D))
        h = G.add(h, nn.linear(params, f"{n}.proj", att))
        m = nn.linear(params, f"{n}.fc1", nn.layernorm(params, f"{n}.ln2", h))
        h = G.add(h, nn.linear(params, f"{n}.fc2", G.gelu(m)))
    logits = nn.linear(params, "em.head", nn.layernorm(params, "em.lnf", h))
    return CategoricalField(G.log_softmax(logits, axis=-1))


def predict_indices(indices: np.ndarray, known: np.ndarray, plan: OrderPlan, cb: Codebook,
                    cfg: EntropyModelConfig, params: nn.Params) -> np.ndarray:
    """Log-probabilities ``[B, L, K]`` in flatten order, with unknown tokens embedded as zeros."""
    emb = np.where(known[..., None], cb.entries.value[np.where(known, indices, 0)], 0.0)
    seq = build_conditional_inputs(emb, plan, params["em.start"])
    return predict(seq, plan, cfg, params).flat_order(plan)


def complete_suffix(prefix: np.ndarray, plan: OrderPlan, cb: Codebook, cfg: EntropyModelConfig,
                    params: nn.Params, mode: str = "deterministic", seed: int | None = None) -> np.ndarray:
    """Fill unknown indices (``-1``) level by level.

    The known tokens must be exactly those with decoding number below some cut.
    All tokens sharing a decoding number are filled in one step.
    """
    prefix = np.atleast_2d(np.asarray(prefix, dtype=np.int64))
    known = prefix >= 0
    t_cut = prefix_cut(known, plan)
    if mode not in ("deterministic", "sampled"):
        raise ValueError(f"unknown completion mode {mode!r}")
    rng = np.random.default_rng(seed)
    out = prefix.copy()
    for t in plan.levels[plan.levels >= t_cut]:
        logp = predict_indices(out, known, plan, cb, cfg, params)
        at = plan.order == t
        rows = logp[:, at]
        if mode == "deterministic":
            picked = np.argmax(rows, axis=-1)
        else:
            p = np.exp(rows)
            cum = np.cumsum(p / p.sum(-1, keepdims=True), axis=-1)
            u = rng.random(cum.shape[:-1] + (1,))
            picked = np.minimum((cum < u).sum(-1), cfg.vocab - 1)
        out[:, at] = picked
        known = known | at[None, :]
    return out


def prefix_cut(known: np.ndarray, plan: OrderPlan) -> int:
    """Decoding number where the unknown suffix starts; raises if the prefix is not downward closed."""
    known = np.atleast_2d(known)
    if not (known == known[0]).all():
        raise ContractError("all rows must share the same known set")
    k = known[0]
    if k.all():
        return plan.num_orders
    cut = int(plan.order[~k].min())
    if not (k == (plan.order < cut)).all():
        raise ContractError("known tokens are not exactly the tokens below a decoding cut")
    return cut


# ---------------------------------------------------------------------------
# token-by-token reference evaluation
# ---------------------------------------------------------------------------


def _ln(x, params, name, eps=1e-5):
    mu = x.mean(-1, keepdims=True)
    var = x.var(-1, keepdims=True)
    return (x - mu) / np.sqrt(var + eps) * params[f"{name}.g"].value + params[f"{name}.b"].value


def _lin(x, params, name):
    return x @ params[f"{name}.w"].value + params[f"{name}.b"].value


def _gelu(x):
    return 0.5 * x * (1.0 + np.tanh(np.sqrt(2.0 / np.pi) * (x + 0.044715 * x**3)))


def predict_sequential(inputs: np.ndarray, plan: OrderPlan, cfg: EntropyModelConfig,
                       params: nn.Params) -> np.ndarray:
    """Evaluate each position separately on its own predecessor set.

    Position ``t`` is computed from the sub-sequence holding only ``t``, its
    strict predecessors and the fallback position 0, with per-key loops
    instead of a masked matrix product. Returns ``[B, L, K]`` log-probs in
    sequence order.
    """
    b, L, _ = inputs.shape
    o = plan.seq_order
    D, H = cfg.model_dim, cfg.heads
    dh = D // H
    out = np.empty((b, L, cfg.vocab))
    for t in range(L):
        keep = [j for j in range(L) if o[j] < o[t] or j == t or j == 0]
        pos = np.array(keep)
        h = _lin(inputs[:, pos], params, "em.in") + params["em.pos"].value[pos]
        for layer in range(cfg.depth):
            n = f"em.l{layer}"
            qkv = _lin(_ln(h, params, f"{n}.ln1"), params, f"{n}.qkv")
            q, k, v = qkv[..., :D], qkv[..., D:2 * D], qkv[..., 2 * D:]
            att = np.zeros_like(q)
            for a, i in enumerate(keep):
                allowed = [c for c, j in enumerate(keep) if o[j] < o[i]] or [0]
                for head in range(H):
                    sl = slice(head * dh, (head + 1) * dh)
                    scores = np.stack([(q[:, a, sl] * k[:, c, sl]).sum(-1) for c in allowed], -1)
                    scores = scores / np.sqrt(dh)
                    w = np.exp(scores - scores.max(-1, keepdims=True))
                    w /= w.sum(-1, keepdims=True)
                    acc = np.zeros((b, dh))
                    for n_c, c in enumerate(allowed):
                        acc += w[:, n_c:n_c + 1] * v[:, c, sl]
                    att[:, a, sl] = acc
            h = h + _lin(att, params, f"{n}.proj")
            h = h + _lin(_gelu(_lin(_ln(h, params, f"{n}.ln2"), params, f"{n}.fc1")), params, f"{n}.fc2")
        logits = _lin(_ln(h, params, "em.lnf"), params, "em.head")[:, keep.index(t)]
        logits = logits - logits.max(-1, keepdims=True)
        out[:, t] = logits - np.log(np.exp(logits).sum(-1, keepdims=True))
    return out
