"""Compression, decompression, prefix rate control and the three training stages."""

from __future__ import annotations

import csv
import hashlib
import json
import math
from dataclasses import dataclass
from functools import cached_property
from pathlib import Path

import numpy as np

from . import coder
from . import entropy_model as em
from . import gradcore as G
from . import losses
from . import tokenizer as tk
from .config import Config
from .gradcore import Parameter
from .ordering import OrderPlan, WindowPartition, build_conditional_inputs, build_order, partition_layout
from .vq import Codebook, assign_hard, init_codebook, nearest, soft_distribution

STAGE_NAMES = {0: "untrained", 1: "tokenizer", 2: "entropy_model", 3: "joint"}


class StageOrderError(ValueError):
    pass


class UntrainedBundleError(ValueError):
    pass


class BundleMismatchError(ValueError):
    pass


def _hash_arrays(items) -> str:
    h = hashlib.sha256()
    for name, arr in items:
        h.update(name.encode())
        h.update(np.ascontiguousarray(arr, dtype="<f8").tobytes())
    return h.hexdigest()


@dataclass
class ModelBundle:
    config: Config
    tok_params: dict[str, Parameter]
    codebook: Codebook
    em_params: dict[str, Parameter]
    stage: int = 0
    seed: int = 0

    @classmethod
    def create(cls, config: Config, seed: int = 0) -> "ModelBundle":
        rng = np.random.default_rng(seed)
        b = cls(config, {}, None, {}, 0, seed)  # type: ignore[arg-type]
        b.tok_params = tk.init_params(b.tok_cfg, rng)
        b.codebook = init_codebook(config.tokenizer.codebook_size, config.tokenizer.latent_dim, rng)
        b.em_params = em.init_params(b.em_cfg, rng)
        return b

    @cached_property
    def tok_cfg(self) -> tk.TokenizerConfig:
        t = self.config.tokenizer
        return tk.TokenizerConfig(t.num_stages, t.base_channels, tuple(t.channel_multipliers),
                                  t.latent_dim, tuple(t.scale_factors), t.res_blocks, t.groups)

    @cached_property
    def em_cfg(self) -> em.EntropyModelConfig:
        e = self.config.entropy_model
        return em.EntropyModelConfig(e.depth, e.heads, e.model_dim, e.mlp_ratio,
                                     self.config.tokenizer.codebook_size,
                                     self.config.tokenizer.latent_dim,
                                     sum(w * w for w in e.window_sides))

    @property
    def multiple(self) -> int:
        return max(self.tok_cfg.scale_factors)

    def parameters(self) -> dict[str, Parameter]:
        out = dict(self.tok_params)
        out[self.codebook.entries.name] = self.codebook.entries
        out.update(self.em_params)
        return out

    def block_hashes(self) -> dict[str, str]:
        return {
            "tokenizer": _hash_arrays((k, p.value) for k, p in sorted(self.tok_params.items())),
            "codebook": _hash_arrays([("codebook", self.codebook.entries.value)]),
            "entropy_model": _hash_arrays((k, p.value) for k, p in sorted(self.em_params.items())),
        }

    def model_hash(self) -> int:
        h = hashlib.sha256(self.config.dumps().encode())
        for v in self.block_hashes().values():
            h.update(v.encode())
        return int.from_bytes(h.digest()[:8], "little")

    def set_trainable(self, tokenizer: bool, codebook: bool, entropy: bool) -> None:
        for p in self.tok_params.values():
            p.unfreeze() if tokenizer else p.freeze()
        self.codebook.unfreeze() if codebook else self.codebook.freeze()
        for p in self.em_params.values():
            p.unfreeze() if entropy else p.freeze()

    def partition(self, h: int, w: int) -> WindowPartition:
        return _partition(self.tok_cfg, tuple(self.config.entropy_model.window_sides), h, w)

    @cached_property
    def plan(self) -> OrderPlan:
        return build_order(self.partition(self.multiple, self.multiple).group_layout)

    # -- persistence ---------------------------------------------------------

    def save(self, directory) -> None:
        d = Path(directory)
        d.mkdir(parents=True, exist_ok=True)
        (d / "config.json").write_text(self.config.dumps())
        G.save_checkpoint(d / "params.ckpt", {k: p.value for k, p in sorted(self.parameters().items())})
        meta = {"stage": self.stage, "stage_name": STAGE_NAMES[self.stage], "seed": self.seed,
                "model_hash": f"{self.model_hash():016x}", "block_hashes": self.block_hashes()}
        (d / "meta.json").write_text(json.dumps(meta, indent=2, sort_keys=True))

    @classmethod
    def load(cls, directory) -> "ModelBundle":
        d = Path(directory)
        if not (d / "meta.json").exists():
            raise FileNotFoundError(f"no bundle in {d}")
        config = Config.load(d / "config.json")
        meta = json.loads((d / "meta.json").read_text())
        b = cls.create(config, meta["seed"])
        values = G.load_checkpoint(d / "params.ckpt")
        params = b.parameters()
        if set(values) != set(params):
            raise BundleMismatchError("checkpoint parameters do not match the configuration")
        for k, v in values.items():
            params[k].assign(v)
        b.stage = int(meta["stage"])
        if f"{b.model_hash():016x}" != meta["model_hash"]:
            raise BundleMismatchError("bundle hash does not match its metadata")
        return b


_PARTITIONS: dict = {}


def _partition(cfg: tk.TokenizerConfig, window_sides, h: int, w: int) -> WindowPartition:
    key = (cfg, window_sides, h, w)
    if key not in _PARTITIONS:
        _PARTITIONS[key] = partition_layout(tk.layout_for(cfg, h, w), window_sides)
    return _PARTITIONS[key]


# ---------------------------------------------------------------------------
# inference helpers
# ---------------------------------------------------------------------------


def _as_batch(images) -> np.ndarray:
    x = np.asarray(images, dtype=np.float64)
    return x[None] if x.ndim == 3 else x


def encode_indices(images, bundle: ModelBundle) -> tuple[np.ndarray, tk.ScaleLayout, tuple[int, int]]:
    """Pad, analyse and hard-quantize. Returns ``(indices [B, L], layout, padded (H, W))``."""
    x = tk.pad_image(_as_batch(images), bundle.multiple)
    lat = tk.encode(x, bundle.tok_cfg, bundle.tok_params)
    y, layout = tk.flatten(lat)
    idx, _ = nearest(y.value, bundle.codebook.entries.value)
    return idx, layout, x.shape[2:]


def reconstruct_from_embeddings(emb: np.ndarray, layout: tk.ScaleLayout, bundle: ModelBundle) -> np.ndarray:
    lat = tk.unflatten(emb, layout)
    return tk.decode(lat, bundle.tok_cfg, bundle.tok_params).value


def embed(indices: np.ndarray, bundle: ModelBundle, known: np.ndarray | None = None) -> np.ndarray:
    emb = bundle.codebook.entries.value[indices.clip(0)]
    if known is not None:
        emb = np.where(known[..., None], emb, 0.0)
    return emb


def reconstruct(images, bundle: ModelBundle) -> np.ndarray:
    """Encoder-side reconstruction ``decode(assign_hard(encode(x)))``, cropped to the input size."""
    x = _as_batch(images)
    idx, layout, _ = encode_indices(x, bundle)
    out = reconstruct_from_embeddings(embed(idx, bundle), layout, bundle)
    return out[:, :, :x.shape[2], :x.shape[3]]


def _level_cdfs(group_idx: np.ndarray, level: int, bundle: ModelBundle, precision: int) -> np.ndarray:
    """Quantized CDFs ``[G, n_level, K+1]`` for the tokens at one decoding level."""
    plan = bundle.plan
    known = np.broadcast_to(plan.order < level, group_idx.shape)
    logp = em.predict_indices(group_idx, known, plan, bundle.codebook, bundle.em_cfg, bundle.em_params)
    return coder.quantize_probs(np.exp(logp[:, _level_positions(plan, level)]), precision)


def _level_positions(plan: OrderPlan, level: int) -> np.ndarray:
    """Flatten positions with decoding number ``level``, in sequence order."""
    seq = plan.perm[plan.seq_order == level]
    return seq


def prefix_levels(plan: OrderPlan, fraction: float) -> int:
    """Number of occupied decoding levels transmitted for ``fraction``."""
    if not 0 < fraction <= 1:
        raise ValueError(f"prefix fraction must be in (0, 1], got {fraction}")
    n = len(plan.levels)
    return min(n, max(1, math.ceil(fraction * n - 1e-9)))


def cut_for(plan: OrderPlan, n_levels: int) -> int:
    levels = plan.levels
    return int(levels[n_levels]) if n_levels < len(levels) else plan.num_orders


def compress(image, bundle: ModelBundle, prefix_fraction: float = 1.0) -> coder.Bitstream:
    if bundle.stage < 2:
        raise UntrainedBundleError(f"bundle is at stage {bundle.stage}; coding needs a trained entropy model")
    image = np.asarray(image, dtype=np.float64)
    if image.ndim != 3:
        raise ValueError(f"expected one [3, H, W] image, got {image.shape}")
    h, w = image.shape[1:]
    idx, layout, (hp, wp) = encode_indices(image, bundle)
    part = bundle.partition(hp, wp)
    plan = bundle.plan
    gidx = part.gather(idx)  # [G, Lg]
    cut = cut_for(plan, prefix_levels(plan, prefix_fraction))
    precision = bundle.config.coder.precision
    enc = coder.RangeEncoder()
    for level in plan.levels[plan.levels < cut]:
        cdfs = _level_cdfs(gidx, level, bundle, precision)
        pos = _level_positions(plan, level)
        for g in range(gidx.shape[0]):
            for j, p in enumerate(pos):
                enc.encode(int(gidx[g, p]), cdfs[g, j])
    dims = [(s.height, s.width) for s in layout.scales]
    return coder.Bitstream(h, w, dims, cut, bundle.model_hash(), enc.finish())


def decode_prefix(stream: coder.Bitstream, bundle: ModelBundle) -> tuple[np.ndarray, np.ndarray, tk.ScaleLayout]:
    """Decode transmitted indices. Returns ``(group indices [G, Lg] with -1 gaps, known mask, layout)``."""
    if stream.model_hash != bundle.model_hash():
        raise BundleMismatchError(f"stream was produced by model {stream.model_hash:016x}, "
                                  f"bundle is {bundle.model_hash():016x}")
    factors = bundle.tok_cfg.factors_coarse_first()
    if len(stream.scale_dims) != len(factors):
        raise BundleMismatchError("stream scale count does not match the bundle")
    layout = tk.ScaleLayout.from_grids(stream.scale_dims, factors)
    hp, wp = stream.scale_dims[0][0] * factors[0], stream.scale_dims[0][1] * factors[0]
    if tk.layout_for(bundle.tok_cfg, hp, wp) != layout:
        raise coder.DecodeError("inconsistent scale dimensions in header")
    part = bundle.partition(hp, wp)
    plan = bundle.plan
    gidx = np.full((part.num_groups, plan.length), -1, dtype=np.int64)
    precision = bundle.config.coder.precision
    levels = plan.levels[plan.levels < stream.prefix_cut]
    if len(levels) == 0:
        if stream.payload:
            raise coder.DecodeError("payload present but nothing to decode")
    else:
        dec = coder.RangeDecoder(stream.payload)
        for level in levels:
            cdfs = _level_cdfs(np.where(gidx < 0, 0, gidx), level, bundle, precision)
            pos = _level_positions(plan, level)
            for g in range(gidx.shape[0]):
                for j, p in enumerate(pos):
                    gidx[g, p] = dec.decode(cdfs[g, j])
        dec.finish()
    known = np.broadcast_to(plan.order < stream.prefix_cut, gidx.shape)
    return gidx, known, layout


def _finish(gidx: np.ndarray, known: np.ndarray, layout, stream, bundle, zero_missing: bool) -> np.ndarray:
    part = bundle.partition(layout.scales[0].height * bundle.tok_cfg.factors_coarse_first()[0],
                            layout.scales[0].width * bundle.tok_cfg.factors_coarse_first()[0])
    emb_g = embed(gidx, bundle, known if zero_missing else None)
    emb = part.scatter(emb_g, 1)
    img = reconstruct_from_embeddings(emb, layout, bundle)[0]
    return img[:, :stream.orig_h, :stream.orig_w]


def decompress(stream, bundle: ModelBundle) -> np.ndarray:
    """Decode the prefix and complete missing levels with the entropy model (argmax)."""
    if isinstance(stream, (bytes, bytearray)):
        stream = coder.Bitstream.from_bytes(bytes(stream))
    gidx, known, layout = decode_prefix(stream, bundle)
    if not known.all():
        gidx = em.complete_suffix(np.where(known, gidx, -1), bundle.plan, bundle.codebook,
                                  bundle.em_cfg, bundle.em_params, mode="deterministic")
    return _finish(gidx, np.ones_like(known), layout, stream, bundle, zero_missing=False)


def baseline_zero_pad(stream, bundle: ModelBundle) -> np.ndarray:
    """Like :func:`decompress` but missing tokens are zero vectors."""
    if isinstance(stream, (bytes, bytearray)):
        stream = coder.Bitstream.from_bytes(bytes(stream))
    gidx, known, layout = decode_prefix(stream, bundle)
    return _finish(gidx, known, layout, stream, bundle, zero_missing=True)


def decoded_indices(stream, bundle: ModelBundle, complete: bool = True) -> np.ndarray:
    """Flatten-order indices recovered from a stream (``-1`` where missing if not completing)."""
    gidx, known, layout = decode_prefix(stream, bundle)
    if complete and not known.all():
        gidx = em.complete_suffix(np.where(known, gidx, -1), bundle.plan, bundle.codebook,
                                  bundle.em_cfg, bundle.em_params)
    else:
        gidx = np.where(known, gidx, -1)
    f = bundle.tok_cfg.factors_coarse_first()[0]
    part = bundle.partition(layout.scales[0].height * f, layout.scales[0].width * f)
    return part.scatter(gidx, 1)[0]


# ---------------------------------------------------------------------------
# training
# ---------------------------------------------------------------------------


@dataclass
class TrainRun:
    stage: int
    steps: int
    lr: float
    seed: int = 0
    lam: float = 0.0
    tau: float = 0.01
    batch_size: int = 16
    optimizer: str = "adam"
    clip_norm: float = 1.0
    log_every: int = 10
    lr_schedule: str = "constant"  # or "cosine": decay to zero over the run

    @classmethod
    def from_config(cls, config: Config, stage: int, seed: int = 0, lam: float | None = None) -> "TrainRun":
        r = config.run
        if stage == 3:
            rd = losses.schedule_for_lambda(lam) if lam is not None else \
                losses.schedule(config.schedule.regime, config.schedule.level)
            lam_, tau = rd.lam, rd.tau
        else:
            lam_, tau = 0.0, config.schedule.stage2_tau
        steps = {1: r.stage1_steps, 2: r.stage2_steps, 3: r.stage3_steps}[stage]
        lr = {1: r.stage1_lr, 2: r.stage2_lr, 3: r.stage3_lr}[stage]
        return cls(stage, steps, lr, seed, lam_, tau, r.batch_size, r.optimizer, r.clip_norm, r.log_every,
                   r.lr_schedule)


def learning_rate(run: TrainRun, step: int) -> float:
    if run.lr_schedule == "constant":
        return run.lr
    if run.lr_schedule == "cosine":
        return 0.5 * run.lr * (1 + math.cos(math.pi * step / max(run.steps, 1)))
    raise ValueError(f"unknown lr schedule {run.lr_schedule!r}")


class Optimizer:
    """Gradient descent (``"sgd"``) or Adam with global-norm clipping."""

    def __init__(self, params: list[Parameter], lr: float, kind: str = "sgd", clip_norm: float | None = 1.0,
                 betas=(0.9, 0.999), eps: float = 1e-8):
        if kind not in ("sgd", "adam"):
            raise ValueError(f"unknown optimizer {kind!r}")
        self.params, self.lr, self.kind, self.clip = params, lr, kind, clip_norm
        self.betas, self.eps, self.t = betas, eps, 0
        self.m = [np.zeros_like(p.value) for p in params]
        self.v = [np.zeros_like(p.value) for p in params]

    def step(self, grads: dict[str, np.ndarray], lr: float | None = None) -> float:
        gs = [grads.get(p.name, np.zeros_like(p.value)) for p in self.params]
        norm = math.sqrt(sum(float((g * g).sum()) for g in gs))
        if self.clip is not None and norm > self.clip:
            gs = [g * (self.clip / norm) for g in gs]
        self.t += 1
        lr = self.lr if lr is None else lr
        b1, b2 = self.betas
        for i, (p, g) in enumerate(zip(self.params, gs)):
            if self.kind == "sgd":
                p.value = p.value - lr * g
                continue
            self.m[i] = b1 * self.m[i] + (1 - b1) * g
            self.v[i] = b2 * self.v[i] + (1 - b2) * g * g
            mhat = self.m[i] / (1 - b1**self.t)
            vhat = self.v[i] / (1 - b2**self.t)
            p.value = p.value - lr * mhat / (np.sqrt(vhat) + self.eps)
        return norm


def _rate_node(bundle: ModelBundle, y, codewords: np.ndarray, tau: float, part: WindowPartition):
    """Soft rate (bits/token) and model log-probs for a batch of flattened latents."""
    plan = bundle.plan
    b = codewords.shape[0]
    soft = soft_distribution(y, bundle.codebook, tau)
    seq_idx = part.groups[:, plan.perm]
    p_al = G.reshape(G.gather(soft.p_soft, seq_idx, axis=1), (b * part.num_groups, plan.length, -1))
    ctx = part.gather(codewords)
    seq = build_conditional_inputs(ctx, plan, bundle.em_params["em.start"])
    log_probs = em.predict(seq, plan, bundle.em_cfg, bundle.em_params).log_probs
    return losses.rate_soft(p_al, log_probs), log_probs, seq_idx


def train_stage(run: TrainRun, bundle: ModelBundle, images: np.ndarray, log_path=None) -> tuple[ModelBundle, list[dict]]:
    """Run one training stage in place on ``bundle``; returns the bundle and per-step log rows."""
    if run.stage not in (1, 2, 3):
        raise StageOrderError(f"unknown stage {run.stage}")
    if bundle.stage < run.stage - 1:
        raise StageOrderError(f"stage {run.stage} needs a bundle trained through stage {run.stage - 1}; "
                              f"this bundle is at stage {bundle.stage}")
    images = tk.pad_image(np.asarray(images, dtype=np.float64), bundle.multiple)
    n, _, h, w = images.shape
    if run.stage == 2:
        lat = tk.encode(images, bundle.tok_cfg, bundle.tok_params)
        return fit_entropy_model(run, bundle, tk.flatten(lat)[0].value, (h, w), log_path)
    pixels = h * w
    part = bundle.partition(h, w)
    trainable = {1: (True, True, False), 3: (True, False, True)}[run.stage]
    bundle.set_trainable(*trainable)
    before = bundle.block_hashes()
    params = [p for p in bundle.parameters().values() if p.learnable]
    opt = Optimizer(params, run.lr, run.optimizer, run.clip_norm)
    rng = np.random.default_rng(run.seed)
    beta = bundle.config.tokenizer.beta
    L = tk.layout_for(bundle.tok_cfg, h, w).num_tokens

    rows = []
    for step in range(run.steps):
        sel = rng.choice(n, size=min(run.batch_size, n), replace=False)
        x = images[sel]
        lat = tk.encode(x, bundle.tok_cfg, bundle.tok_params)
        y, layout = tk.flatten(lat)
        hard = assign_hard(y, bundle.codebook)
        x_hat = tk.decode(tk.unflatten(hard.y_q, layout), bundle.tok_cfg, bundle.tok_params)
        dist, comps = losses.distortion(x, x_hat, y, hard, beta)
        rate = None
        if run.stage == 3:
            rate, _, _ = _rate_node(bundle, y, hard.codewords.value, run.tau, part)
        total = losses.rd_objective(dist, rate, run.lam)
        opt.step(G.backward(total, params), learning_rate(run, step))
        if step % run.log_every == 0 or step == run.steps - 1:
            rate_tok = rate.item() if rate is not None else float("nan")
            bits = rate_tok * L
            comp_vals = {k: v.item() for k, v in comps.items()}
            dist_val = sum(comp_vals.values()) if comp_vals else 0.0
            rep = losses.LossReport(bits, bits / pixels, dist_val, total.item(), comp_vals)
            rows.append(rep.csv_row(step))
    return _finish_stage(run, bundle, trainable, before, rows, log_path)


def fit_entropy_model(run: TrainRun, bundle: ModelBundle, latents: np.ndarray, hw: tuple[int, int],
                      log_path=None) -> tuple[ModelBundle, list[dict]]:
    """Stage 2 on precomputed flattened latents ``[N, L, C]`` of padded ``hw``-sized images.

    Only the entropy model learns; the codewords the latents snap to are its context.
    """
    if run.stage != 2:
        raise StageOrderError("fit_entropy_model runs stage 2 only")
    if bundle.stage < 1:
        raise StageOrderError(f"stage 2 needs a bundle trained through stage 1; this bundle is at stage {bundle.stage}")
    h, w = hw
    L = tk.layout_for(bundle.tok_cfg, h, w).num_tokens
    latents = np.asarray(latents, dtype=np.float64)
    if latents.ndim != 3 or latents.shape[1] != L:
        raise ValueError(f"expected latents [N, {L}, C] for {h}x{w} images, got {latents.shape}")
    part = bundle.partition(h, w)
    trainable = (False, False, True)
    bundle.set_trainable(*trainable)
    before = bundle.block_hashes()
    params = [p for p in bundle.parameters().values() if p.learnable]
    opt = Optimizer(params, run.lr, run.optimizer, run.clip_norm)
    rng = np.random.default_rng(run.seed)
    idx_all, _ = nearest(latents, bundle.codebook.entries.value)
    codewords = bundle.codebook.entries.value[idx_all]
    n = len(latents)
    rows = []
    for step in range(run.steps):
        sel = rng.choice(n, size=min(run.batch_size, n), replace=False)
        rate, _, _ = _rate_node(bundle, G.constant(latents[sel]), codewords[sel], run.tau, part)
        opt.step(G.backward(rate, params), learning_rate(run, step))
        if step % run.log_every == 0 or step == run.steps - 1:
            bits = rate.item() * L
            rows.append(losses.LossReport(bits, bits / (h * w), 0.0, rate.item(), {}).csv_row(step))
    return _finish_stage(run, bundle, trainable, before, rows, log_path)


def _finish_stage(run, bundle, trainable, before, rows, log_path):
    after = bundle.block_hashes()
    for block, changed in zip(("tokenizer", "codebook", "entropy_model"), trainable):
        if not changed and before[block] != after[block]:
            raise RuntimeError(f"frozen block {block} changed during stage {run.stage}")
    bundle.stage = max(bundle.stage, run.stage)
    bundle.set_trainable(True, True, True)
    if log_path is not None:
        write_log(log_path, rows)
    return bundle, rows


def write_log(path, rows) -> None:
    with open(path, "w", newline="") as fh:
        wr = csv.DictWriter(fh, fieldnames=losses.LOG_COLUMNS)
        wr.writeheader()
        wr.writerows(rows)
