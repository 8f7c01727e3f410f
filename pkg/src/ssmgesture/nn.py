"""Parameter containers, layers and the Adam optimizer."""

from __future__ import annotations

import contextlib
import math
from typing import Iterator

import numpy as np

from . import ops
from .autograd import Tensor

_META = False


@contextlib.contextmanager
def meta_init():
    """Create parameters as zero-strided views: shapes without memory.

    Used to count parameters of full-width configurations.
    """
    global _META
    saved, _META = _META, True
    try:
        yield
    finally:
        _META = saved


def parameter(rng: np.random.Generator, shape, fan_in: int | None = None,
              init: str = "uniform", name: str | None = None) -> Tensor:
    """Uniform in [-1/sqrt(fan_in), 1/sqrt(fan_in)] unless ``init`` says otherwise."""
    shape = tuple(int(s) for s in shape)
    if _META:
        return Tensor(np.broadcast_to(np.zeros(1), shape), requires_grad=True, name=name)
    if init == "zeros":
        data = np.zeros(shape)
    elif init == "ones":
        data = np.ones(shape)
    elif init == "uniform":
        bound = 1.0 / math.sqrt(fan_in if fan_in else shape[0])
        data = rng.uniform(-bound, bound, size=shape)
    else:
        raise ValueError(f"unknown init {init!r}")
    return Tensor(data, requires_grad=True, name=name)


class Module:
    def named_parameters(self, prefix: str = "") -> Iterator[tuple[str, Tensor]]:
        for key, val in vars(self).items():
            name = f"{prefix}{key}"
            if isinstance(val, Tensor) and val.requires_grad:
                yield name, val
            elif isinstance(val, Module):
                yield from val.named_parameters(name + ".")
            elif isinstance(val, (list, tuple)):
                for i, item in enumerate(val):
                    if isinstance(item, Module):
                        yield from item.named_parameters(f"{name}.{i}.")

    def parameters(self) -> list[Tensor]:
        return [p for _, p in self.named_parameters()]

    def num_parameters(self) -> int:
        return sum(p.size for p in self.parameters())

    def zero_grad(self) -> None:
        for p in self.parameters():
            p.grad = None

    def state_dict(self) -> dict[str, np.ndarray]:
        return {n: p.data for n, p in self.named_parameters()}

    def load_state_dict(self, state: dict[str, np.ndarray]) -> None:
        params = dict(self.named_parameters())
        missing = set(params) - set(state)
        unexpected = set(state) - set(params)
        if missing or unexpected:
            raise KeyError(f"state mismatch: missing={sorted(missing)} unexpected={sorted(unexpected)}")
        for name, p in params.items():
            if state[name].shape != p.shape:
                raise ValueError(f"{name}: shape {state[name].shape} != {p.shape}")
            p.data = np.array(state[name], dtype=np.float64)


class Linear(Module):
    def __init__(self, d_in: int, d_out: int, rng: np.random.Generator,
                 bias: bool = True, zero: bool = False):
        init = "zeros" if zero else "uniform"
        self.weight = parameter(rng, (d_in, d_out), fan_in=d_in, init=init)
        self.bias = parameter(rng, (d_out,), fan_in=d_in, init=init) if bias else None

    def __call__(self, x: Tensor) -> Tensor:
        return ops.linear(x, self.weight, self.bias)


class MLP(Module):
    """Two affine layers with SiLU between them."""

    def __init__(self, d_in: int, hidden: int, d_out: int, rng: np.random.Generator,
                 zero_out: bool = False):
        self.fc1 = Linear(d_in, hidden, rng)
        self.fc2 = Linear(hidden, d_out, rng, zero=zero_out)

    def __call__(self, x: Tensor) -> Tensor:
        return self.fc2(ops.silu(self.fc1(x)))


class Conv1d(Module):
    """Time convolution with ``kernel: K x C_in x C_out``."""

    def __init__(self, c_in: int, c_out: int, kernel_size: int, rng: np.random.Generator,
                 padding_mode: str = "zeros", bias: bool = True, init: str = "uniform"):
        K = kernel_size
        self.kernel_size = K
        self.padding_mode = padding_mode
        if init == "delta":
            w = parameter(rng, (K, c_in, c_out), init="zeros")
            if not _META:
                w.data[K // 2, np.arange(min(c_in, c_out)), np.arange(min(c_in, c_out))] = 1.0
            self.kernel = w
        else:
            self.kernel = parameter(rng, (K, c_in, c_out), fan_in=K * c_in)
        self.bias = parameter(rng, (c_out,), fan_in=K * c_in,
                              init="zeros" if init == "delta" else "uniform") if bias else None

    def __call__(self, x: Tensor) -> Tensor:
        pad = self.kernel_size // 2
        y = ops.conv1d(x, self.kernel, padding=pad, mode=self.padding_mode)
        return y if self.bias is None else ops.add(y, self.bias)


class Adam:
    """Adaptive moment estimation; updates parameter arrays in place."""

    def __init__(self, params: list[Tensor], lr: float = 1e-4, betas=(0.9, 0.999),
                 eps: float = 1e-8):
        self.params = params
        self.lr = lr
        self.b1, self.b2 = betas
        self.eps = eps
        self.t = 0
        self.m = [np.zeros_like(p.data) for p in params]
        self.v = [np.zeros_like(p.data) for p in params]

    def step(self) -> None:
        self.t += 1
        c1 = 1.0 - self.b1 ** self.t
        c2 = 1.0 - self.b2 ** self.t
        for p, m, v in zip(self.params, self.m, self.v):
            if p.grad is None:
                continue
            g = p.grad
            m *= self.b1
            m += (1.0 - self.b1) * g
            v *= self.b2
            v += (1.0 - self.b2) * g * g
            p.data -= self.lr * (m / c1) / (np.sqrt(v / c2) + self.eps)

    def state(self) -> dict:
        return {"t": self.t, "m": self.m, "v": self.v}

    def load(self, state: dict) -> None:
        self.t = int(state["t"])
        self.m = [np.array(x, dtype=np.float64) for x in state["m"]]
        self.v = [np.array(x, dtype=np.float64) for x in state["v"]]
