"""Multi-scale convolutional analysis and synthesis transforms.

The encoder taps latent maps at the downsampling stages whose cumulative
factor matches one of ``scale_factors``. Finer scales are stored as residuals
against the nearest-upsampled coarser feature; the decoder undoes this before
synthesis and injects each scale at its matching resolution.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from . import gradcore as G
from . import nn
from .gradcore import DimensionError, Node


@dataclass(frozen=True)
class TokenizerConfig:
    num_stages: int = 4
    base_channels: int = 8
    channel_multipliers: tuple[int, ...] = (1, 2, 4, 4, 4)
    latent_dim: int = 8
    scale_factors: tuple[int, ...] = (4, 8, 16)
    res_blocks: int = 1
    groups: int = 4
    image_channels: int = 3

    def __post_init__(self):
        object.__setattr__(self, "channel_multipliers", tuple(self.channel_multipliers))
        object.__setattr__(self, "scale_factors", tuple(self.scale_factors))
        sf = self.scale_factors
        if any(b <= a for a, b in zip(sf, sf[1:])):
            raise ValueError(f"scale_factors must be strictly increasing: {sf}")
        if any(f < 2 or f & (f - 1) for f in sf):
            raise ValueError(f"scale_factors must be powers of two >= 2: {sf}")
        if 2 ** self.num_stages != sf[-1]:
            raise ValueError(f"{self.num_stages} stages reach factor {2 ** self.num_stages}, "
                             f"but the largest scale factor is {sf[-1]}")
        if len(self.channel_multipliers) != self.num_stages + 1:
            raise ValueError("channel_multipliers needs num_stages + 1 entries")

    @property
    def num_scales(self) -> int:
        return len(self.scale_factors)

    @property
    def channels(self) -> list[int]:
        return [self.base_channels * m for m in self.channel_multipliers]

    def factors_coarse_first(self) -> list[int]:
        return sorted(self.scale_factors, reverse=True)

    def grid_shapes(self, h: int, w: int) -> list[tuple[int, int]]:
        return [(h // f, w // f) for f in self.factors_coarse_first()]

    @classmethod
    def full_scale(cls) -> "TokenizerConfig":
        return cls(num_stages=6, base_channels=128, channel_multipliers=(1, 1, 2, 2, 4, 4, 4),
                   latent_dim=32, scale_factors=(16, 32, 64), res_blocks=2, groups=32)


@dataclass(frozen=True)
class ScaleInfo:
    scale_factor: int
    height: int
    width: int
    offset: int

    @property
    def length(self) -> int:
        return self.height * self.width


@dataclass(frozen=True)
class ScaleLayout:
    scales: tuple[ScaleInfo, ...]

    @property
    def num_tokens(self) -> int:
        return sum(s.length for s in self.scales)

    @property
    def offsets(self) -> list[int]:
        return [s.offset for s in self.scales]

    @classmethod
    def from_grids(cls, grids, factors=None) -> "ScaleLayout":
        factors = factors or [0] * len(grids)
        infos, off = [], 0
        for f, (h, w) in zip(factors, grids):
            infos.append(ScaleInfo(f, h, w, off))
            off += h * w
        return cls(tuple(infos))


@dataclass
class MultiScaleLatents:
    """Per-scale maps ``[B, C, h, w]``, coarsest first."""

    scales: list[Node]
    residual: bool = True
    factors: list[int] = field(default_factory=list)

    @property
    def batch(self) -> int:
        return self.scales[0].shape[0]

    def layout(self) -> ScaleLayout:
        return ScaleLayout.from_grids([s.shape[2:] for s in self.scales], self.factors)


def _groups(cfg: TokenizerConfig, channels: int) -> int:
    return math.gcd(cfg.groups, channels)


def init_params(cfg: TokenizerConfig, rng) -> nn.Params:
    ch = cfg.channels
    p: nn.Params = {}
    nn.init_conv(p, "enc.stem", cfg.image_channels, ch[0], 3, rng)
    for s in range(cfg.num_stages):
        cin = ch[s]
        for r in range(cfg.res_blocks):
            nn.init_resblock(p, f"enc.s{s}.rb{r}", cin, ch[s + 1], rng)
            cin = ch[s + 1]
        nn.init_conv(p, f"enc.s{s}.down", ch[s + 1], ch[s + 1], 3, rng)
        if 2 ** (s + 1) in cfg.scale_factors:
            nn.init_norm(p, f"enc.tap{s}.n", ch[s + 1])
            nn.init_conv(p, f"enc.tap{s}.proj", ch[s + 1], cfg.latent_dim, 1, rng)
    for s in reversed(range(cfg.num_stages)):
        if 2 ** (s + 1) in cfg.scale_factors:
            nn.init_conv(p, f"dec.in{s}", cfg.latent_dim, ch[s + 1], 1, rng)
        cin = ch[s + 1]
        for r in range(cfg.res_blocks):
            nn.init_resblock(p, f"dec.s{s}.rb{r}", cin, ch[s], rng)
            cin = ch[s]
        nn.init_conv(p, f"dec.s{s}.up", ch[s], ch[s], 3, rng)
    nn.init_norm(p, "dec.out.n", ch[0])
    nn.init_conv(p, "dec.out", ch[0], cfg.image_channels, 3, rng)
    return p


def pad_image(x: np.ndarray, multiple: int) -> np.ndarray:
    """Reflect-pad ``[B, C, H, W]`` on the right/bottom up to a multiple."""
    h, w = x.shape[-2:]
    ph, pw = -h % multiple, -w % multiple
    if ph == 0 and pw == 0:
        return x
    mode = "reflect" if ph < h and pw < w else "symmetric"
    return np.pad(x, ((0, 0), (0, 0), (0, ph), (0, pw)), mode=mode)


def encode(x, cfg: TokenizerConfig, params: nn.Params) -> MultiScaleLatents:
    x = G.as_node(x)
    if x.ndim != 4 or x.shape[1] != cfg.image_channels:
        raise DimensionError(f"expected [B, {cfg.image_channels}, H, W], got {x.shape}")
    h, w = x.shape[2:]
    if h % cfg.scale_factors[-1] or w % cfg.scale_factors[-1]:
        raise DimensionError(f"image {h}x{w} is not padded to a multiple of {cfg.scale_factors[-1]}")
    feats = {}
    hcur = nn.conv(params, "enc.stem", x)
    for s in range(cfg.num_stages):
        for r in range(cfg.res_blocks):
            hcur = nn.resblock(params, f"enc.s{s}.rb{r}", hcur, _groups(cfg, hcur.shape[1]))
        hcur = nn.conv(params, f"enc.s{s}.down", hcur, stride=2)
        f = 2 ** (s + 1)
        if f in cfg.scale_factors:
            t = nn.group_norm(params, f"enc.tap{s}.n", hcur, _groups(cfg, hcur.shape[1]))
            feats[f] = nn.conv(params, f"enc.tap{s}.proj", G.silu(t))
    factors = cfg.factors_coarse_first()
    return residualize([feats[f] for f in factors], factors)


def residualize(features: list, factors: list[int]) -> MultiScaleLatents:
    scales = [features[0]]
    for i in range(1, len(features)):
        up = G.upsample_nearest(features[i - 1], factors[i - 1] // factors[i])
        scales.append(G.sub(features[i], up))
    return MultiScaleLatents(scales, True, list(factors))


def deresidualize(m: MultiScaleLatents) -> list[Node]:
    if not m.residual:
        return list(m.scales)
    feats = [m.scales[0]]
    for i in range(1, len(m.scales)):
        up = G.upsample_nearest(feats[i - 1], m.factors[i - 1] // m.factors[i])
        feats.append(G.add(m.scales[i], up))
    return feats


def decode(y_q: MultiScaleLatents, cfg: TokenizerConfig, params: nn.Params) -> Node:
    factors = cfg.factors_coarse_first()
    if len(y_q.scales) != len(factors):
        raise DimensionError(f"expected {len(factors)} scales, got {len(y_q.scales)}")
    h0, w0 = y_q.scales[0].shape[2:]
    for s, f in zip(y_q.scales, factors):
        expect = (h0 * factors[0] // f, w0 * factors[0] // f)
        if s.shape[1] != cfg.latent_dim or tuple(s.shape[2:]) != expect:
            raise DimensionError(f"scale at factor {f}: shape {s.shape}, expected spatial {expect}")
    m = MultiScaleLatents(y_q.scales, y_q.residual, factors)
    feats = dict(zip(factors, deresidualize(m)))
    hcur = None
    for s in reversed(range(cfg.num_stages)):
        f = 2 ** (s + 1)
        if f in feats:
            inj = nn.conv(params, f"dec.in{s}", feats[f])
            hcur = inj if hcur is None else G.add(hcur, inj)
        for r in range(cfg.res_blocks):
            hcur = nn.resblock(params, f"dec.s{s}.rb{r}", hcur, _groups(cfg, hcur.shape[1]))
        hcur = nn.conv(params, f"dec.s{s}.up", hcur, stride=2, transpose=True)
    t = G.silu(nn.group_norm(params, "dec.out.n", hcur, _groups(cfg, hcur.shape[1])))
    return nn.conv(params, "dec.out", t)


def flatten(m: MultiScaleLatents) -> tuple[Node, ScaleLayout]:
    """Concatenate scales into ``[B, L, C]``, coarsest first, row-major within a scale."""
    parts = []
    for s in m.scales:
        b, c, h, w = s.shape
        parts.append(G.reshape(G.transpose(s, (0, 2, 3, 1)), (b, h * w, c)))
    return G.concat(parts, axis=1), m.layout()


def unflatten(seq, layout: ScaleLayout, residual: bool = True) -> MultiScaleLatents:
    seq = G.as_node(seq)
    if seq.shape[1] != layout.num_tokens:
        raise DimensionError(f"sequence has {seq.shape[1]} tokens, layout expects {layout.num_tokens}")
    b, _, c = seq.shape
    scales = []
    for info in layout.scales:
        part = G.getitem(seq, (slice(None), slice(info.offset, info.offset + info.length)))
        part = G.reshape(part, (b, info.height, info.width, c))
        scales.append(G.transpose(part, (0, 3, 1, 2)))
    return MultiScaleLatents(scales, residual, [s.scale_factor for s in layout.scales])


def layout_for(cfg: TokenizerConfig, h: int, w: int) -> ScaleLayout:
    return ScaleLayout.from_grids(cfg.grid_shapes(h, w), cfg.factors_coarse_first())


def max_bpp(layout: ScaleLayout, K: int, H: int, W: int) -> float:
    """Bits per pixel when every token is coded uniformly over ``K`` codewords."""
    if K < 2:
        raise ValueError("K must be at least 2")
    return layout.num_tokens * math.log2(K) / (H * W)
