"""Mamba-2 mixer built on the scalar-decay scan.

Per token: an input projection produces the gate branch ``z``, the conv
branch ``xBC`` and per-head step sizes. ``xBC`` passes a depthwise causal
convolution and SiLU, then splits into values ``x``, input projection ``B``
and output projection ``C``. Decays are ``a = exp(-softplus(dt) * A_h)`` with
a learned positive ``A_h`` per head, so ``a`` lies in (0, 1].
"""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass

import numpy as np

from . import ops
from .autograd import Tensor, TensorError, check_finite
from .nn import Linear, Module, parameter
from . import nn as _nn
from .ssd import ssd


MAX_DECAY_RATE = 700.0


def default_heads(d_inner: int, d_head: int = 64) -> int:
    heads = max(1, d_inner // d_head)
    while d_inner % heads:
        heads -= 1
    return heads


@dataclass
class Mamba2BlockConfig:
    d_model: int
    expand: int = 2
    d_state: int = 256
    conv_width: int = 4
    n_heads: int | None = None

    def __post_init__(self):
        if self.n_heads is None:
            self.n_heads = default_heads(self.d_inner)
        if self.d_inner % self.n_heads:
            raise ValueError(f"expand*d_model={self.d_inner} not divisible by n_heads={self.n_heads}")
        if self.conv_width < 1:
            raise ValueError("conv_width must be >= 1")

    @property
    def d_inner(self) -> int:
        return self.expand * self.d_model

    @property
    def d_head(self) -> int:
        return self.d_inner // self.n_heads

    def to_dict(self) -> dict:
        return asdict(self)


class Mamba2Block(Module):
    def __init__(self, cfg: Mamba2BlockConfig, rng: np.random.Generator, form: str = "linear",
                 chunk: int = 64):
        self.cfg = cfg
        self.form = form
        self.chunk = chunk
        d, di, S, H = cfg.d_model, cfg.d_inner, cfg.d_state, cfg.n_heads
        self.in_proj = Linear(d, 2 * di + 2 * S + H, rng, bias=False)
        conv_ch = di + 2 * S
        self.conv_w = parameter(rng, (cfg.conv_width, conv_ch), fan_in=cfg.conv_width)
        self.conv_b = parameter(rng, (conv_ch,), fan_in=cfg.conv_width)
        # A in [1, 16], softplus(dt_bias) log-uniform in [1e-3, 1e-1]
        self.A_log = parameter(rng, (H,), init="zeros")
        self.dt_bias = parameter(rng, (H,), init="zeros")
        if not _nn._META:
            self.A_log.data[:] = np.log(rng.uniform(1.0, 16.0, size=H))
            dt = np.exp(rng.uniform(math.log(1e-3), math.log(1e-1), size=H))
            self.dt_bias.data[:] = dt + np.log(-np.expm1(-dt))
        self.out_proj = Linear(di, d, rng, bias=False)

    def _branches(self, x: Tensor):
        cfg = self.cfg
        di, S = cfg.d_inner, cfg.d_state
        zxbcdt = self.in_proj(x)
        z = ops.slice_cols(zxbcdt, 0, di)
        xbc = ops.slice_cols(zxbcdt, di, 2 * di + 2 * S)
        dt = ops.slice_cols(zxbcdt, 2 * di + 2 * S, 2 * di + 2 * S + cfg.n_heads)
        xbc = ops.silu(ops.depthwise_conv1d_causal(xbc, self.conv_w, self.conv_b))
        xs = ops.slice_cols(xbc, 0, di)
        B = ops.slice_cols(xbc, di, di + S)
        C = ops.slice_cols(xbc, di + S, di + 2 * S)
        delta = ops.softplus(ops.add(dt, self.dt_bias))
        # cap keeps exp() above the float64 underflow point so a stays > 0
        a = ops.exp(ops.neg(ops.clamp_max(ops.mul(delta, ops.exp(self.A_log)), MAX_DECAY_RATE)))
        return z, xs, B, C, a

    def decays(self, x: Tensor) -> np.ndarray:
        """Per-token, per-head decay scalars for input ``x`` (T x H)."""
        return self._branches(x)[4].data

    def __call__(self, x: Tensor) -> Tensor:
        if x.ndim != 2 or x.shape[1] != self.cfg.d_model:
            raise TensorError(f"mamba2: expected T x {self.cfg.d_model}, got {x.shape}")
        check_finite(x.data, "mamba2 input")
        z, xs, B, C, a = self._branches(x)
        y = ssd(a, B, C, xs, self.cfg.n_heads, form=self.form, chunk=self.chunk)
        y = ops.mul(y, ops.silu(z))
        return self.out_proj(y)
