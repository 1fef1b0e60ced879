"""Parameter initialisation and small layer helpers shared by the networks.

Parameters live in plain ``dict[str, Parameter]`` stores keyed by dotted names.
"""

from __future__ import annotations

import numpy as np

from . import gradcore as G
from .gradcore import Parameter

Params = dict[str, Parameter]


def add_param(params: Params, name: str, value) -> Parameter:
    if name in params:
        raise KeyError(f"duplicate parameter {name}")
    p = Parameter(value, name)
    params[name] = p
    return p


def init_conv(params: Params, name: str, cin: int, cout: int, k: int, rng, gain: float = 1.0) -> None:
    std = gain / np.sqrt(cin * k * k)
    add_param(params, f"{name}.w", rng.normal(0.0, std, size=(cout, cin, k, k)))
    add_param(params, f"{name}.b", np.zeros(cout))


def init_linear(params: Params, name: str, din: int, dout: int, rng, gain: float = 1.0,
                bias: bool = True) -> None:
    add_param(params, f"{name}.w", rng.normal(0.0, gain / np.sqrt(din), size=(din, dout)))
    if bias:
        add_param(params, f"{name}.b", np.zeros(dout))


def init_norm(params: Params, name: str, dim: int) -> None:
    add_param(params, f"{name}.g", np.ones(dim))
    add_param(params, f"{name}.b", np.zeros(dim))


def conv(params: Params, name: str, x, stride: int = 1, transpose: bool = False):
    return G.conv2d(x, params[f"{name}.w"], params[f"{name}.b"], stride=stride, transpose=transpose)


def linear(params: Params, name: str, x):
    out = G.matmul(x, params[f"{name}.w"])
    b = params.get(f"{name}.b")
    return out if b is None else G.add(out, b)


def group_norm(params: Params, name: str, x, groups: int):
    return G.group_norm(x, params[f"{name}.g"], params[f"{name}.b"], groups)


def layernorm(params: Params, name: str, x):
    return G.layernorm(x, params[f"{name}.g"], params[f"{name}.b"])


def init_resblock(params: Params, name: str, cin: int, cout: int, rng) -> None:
    init_norm(params, f"{name}.n1", cin)
    init_conv(params, f"{name}.c1", cin, cout, 3, rng)
    init_norm(params, f"{name}.n2", cout)
    init_conv(params, f"{name}.c2", cout, cout, 3, rng, gain=0.5)
    if cin != cout:
        init_conv(params, f"{name}.skip", cin, cout, 1, rng)


def resblock(params: Params, name: str, x, groups: int):
    h = conv(params, f"{name}.c1", G.silu(group_norm(params, f"{name}.n1", x, groups)))
    h = conv(params, f"{name}.c2", G.silu(group_norm(params, f"{name}.n2", h, groups)))
    skip = conv(params, f"{name}.skip", x) if f"{name}.skip.w" in params else x
    return G.add(skip, h)
