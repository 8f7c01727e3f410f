"""Condition-modulated residual stacks.

Each block regresses six per-token modulation tensors from the condition
``C`` (scale ``gamma``, shift ``beta`` and gate ``alpha`` for two sublayers)
and applies them around a token mixer and a feed-forward MLP::

    x = x + alpha1 * mixer(LN(x) * (1 + gamma1) + beta1)
    x = x + alpha2 * MLP(LN(x) * (1 + gamma2) + beta2)

The final layer is a modulated layer norm with no residual. Modulation
output layers start at zero, so an untrained stack reduces to ``LN(x)``.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from . import ops
from .autograd import Tensor, TensorError
from .mamba2 import Mamba2Block, Mamba2BlockConfig
from .nn import MLP, Linear, Module


@dataclass
class AdaLNStackConfig:
    M: int = 6
    d_model: int = 1280
    d_cond: int | None = None
    mlp_ratio: int = 4
    block: Mamba2BlockConfig | None = None

    def __post_init__(self):
        if self.M < 1:
            raise ValueError("M must be >= 1")
        if self.d_cond is None:
            self.d_cond = self.d_model
        if self.block is None:
            self.block = Mamba2BlockConfig(self.d_model)
        if self.block.d_model != self.d_model:
            raise ValueError("block d_model must equal stack d_model")


def modulate(x: Tensor, gamma: Tensor, beta: Tensor) -> Tensor:
    return ops.add(ops.add(x, ops.mul(x, gamma)), beta)


def _check_T(x: Tensor, c: Tensor) -> None:
    if x.shape[0] != c.shape[0]:
        raise TensorError(f"token count mismatch: x has {x.shape[0]}, condition has {c.shape[0]}")


class AdaLNBlock(Module):
    """Modulated residual block around an arbitrary token mixer."""

    def __init__(self, mixer, d_model: int, d_cond: int, rng: np.random.Generator,
                 mlp_ratio: int = 4):
        self.mixer = mixer
        self.modulation = MLP(d_cond, d_cond, 6 * d_model, rng, zero_out=True)
        self.mlp = MLP(d_model, mlp_ratio * d_model, d_model, rng)

    def modulations(self, c: Tensor) -> list[Tensor]:
        return ops.chunk(self.modulation(c), 6)

    def __call__(self, x: Tensor, c: Tensor) -> Tensor:
        _check_T(x, c)
        g1, b1, a1, g2, b2, a2 = self.modulations(c)
        x = ops.add(x, ops.mul(a1, self.mixer(modulate(ops.layer_norm(x), g1, b1))))
        x = ops.add(x, ops.mul(a2, self.mlp(modulate(ops.layer_norm(x), g2, b2))))
        return x


class FinalLayer(Module):
    def __init__(self, d_model: int, d_cond: int, rng: np.random.Generator):
        self.modulation = MLP(d_cond, d_cond, 2 * d_model, rng, zero_out=True)

    def __call__(self, x: Tensor, c: Tensor) -> Tensor:
        _check_T(x, c)
        gamma, beta = ops.chunk(self.modulation(c), 2)
        return modulate(ops.layer_norm(x), gamma, beta)


class AdaLNStack(Module):
    """``M`` AdaLN Mamba-2 blocks followed by the modulated final layer."""

    def __init__(self, cfg: AdaLNStackConfig, rng: np.random.Generator, form: str = "linear"):
        self.cfg = cfg
        self.blocks = [
            AdaLNBlock(Mamba2Block(cfg.block, rng, form=form), cfg.d_model, cfg.d_cond, rng,
                       cfg.mlp_ratio)
            for _ in range(cfg.M)
        ]
        self.final = FinalLayer(cfg.d_model, cfg.d_cond, rng)

    def set_form(self, form: str) -> None:
        for blk in self.blocks:
            blk.mixer.form = form

    def __call__(self, x: Tensor, c: Tensor) -> Tensor:
        for blk in self.blocks:
            x = blk(x, c)
        return self.final(x, c)


class SelfAttention(Module):
    """Multi-head softmax attention over all tokens (T x T scores per head)."""

    def __init__(self, d_model: int, n_heads: int, rng: np.random.Generator):
        if d_model % n_heads:
            raise ValueError("d_model must be divisible by n_heads")
        self.n_heads = n_heads
        self.qkv = Linear(d_model, 3 * d_model, rng)
        self.out = Linear(d_model, d_model, rng)

    def __call__(self, x: Tensor) -> Tensor:
        d = x.shape[1]
        dh = d // self.n_heads
        q, k, v = ops.chunk(self.qkv(x), 3)
        heads = []
        for h in range(self.n_heads):
            qh = ops.slice_cols(q, h * dh, (h + 1) * dh)
            kh = ops.slice_cols(k, h * dh, (h + 1) * dh)
            vh = ops.slice_cols(v, h * dh, (h + 1) * dh)
            att = ops.softmax_rows(ops.mul(ops.matmul(qh, ops.transpose(kh)), 1.0 / math.sqrt(dh)))
            heads.append(ops.matmul(att, vh))
        return self.out(ops.concat(heads, axis=1))


@dataclass
class AttentionStackConfig:
    M: int = 12
    d_model: int = 1280
    d_cond: int | None = None
    n_heads: int = 20
    mlp_ratio: int = 4

    def __post_init__(self):
        if self.d_cond is None:
            self.d_cond = self.d_model


class AttentionStack(Module):
    """Pre-norm softmax-attention counterpart with identical AdaLN modulation."""

    def __init__(self, cfg: AttentionStackConfig, rng: np.random.Generator):
        self.cfg = cfg
        self.blocks = [
            AdaLNBlock(SelfAttention(cfg.d_model, cfg.n_heads, rng), cfg.d_model, cfg.d_cond, rng,
                       cfg.mlp_ratio)
            for _ in range(cfg.M)
        ]
        self.final = FinalLayer(cfg.d_model, cfg.d_cond, rng)

    def __call__(self, x: Tensor, c: Tensor) -> Tensor:
        for blk in self.blocks:
            x = blk(x, c)
        return self.final(x, c)
