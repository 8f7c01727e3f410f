"""Gesture encoder/decoder and per-channel normalization."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import ops
from .autograd import Tensor, check_finite
from .nn import Conv1d, Module, parameter


def gesture_channels(n_joints: int) -> int:
    """3 expmap channels per joint plus 3 translational and 3 rotational root velocities."""
    return 3 * n_joints + 6


class GestureEncoder(Module):
    """Width-3 reflect-padded convolution lifting poses to the model width."""

    def __init__(self, n_channels: int, d_model: int, rng: np.random.Generator,
                 init: str = "uniform"):
        self.conv = Conv1d(n_channels, d_model, 3, rng, padding_mode="reflect", init=init)

    def __call__(self, y: Tensor) -> Tensor:
        check_finite(y.data, "gesture encoder input")
        return self.conv(y)


class GestureDecoder(Module):
    """Kernel-size-1 convolution back to pose channels; no bias by default."""

    def __init__(self, d_model: int, n_channels: int, rng: np.random.Generator,
                 bias: bool = False):
        self.kernel = parameter(rng, (1, d_model, n_channels), fan_in=d_model)
        self.bias = parameter(rng, (n_channels,), fan_in=d_model) if bias else None

    def __call__(self, h: Tensor) -> Tensor:
        out = ops.conv1d(h, self.kernel)
        return out if self.bias is None else ops.add(out, self.bias)


@dataclass
class Normalizer:
    """Per-channel z-score using training-set statistics."""

    mean: np.ndarray
    std: np.ndarray

    @classmethod
    def fit(cls, clips: list[np.ndarray], floor: float = 1e-6) -> "Normalizer":
        stacked = np.concatenate([np.asarray(c, np.float64) for c in clips], axis=0)
        return cls(stacked.mean(axis=0), np.maximum(stacked.std(axis=0), floor))

    def normalize(self, y: np.ndarray) -> np.ndarray:
        return (np.asarray(y) - self.mean) / self.std

    def denormalize(self, z: np.ndarray) -> np.ndarray:
        return np.asarray(z) * self.std + self.mean

    def to_dict(self) -> dict:
        return {"mean": self.mean.tolist(), "std": self.std.tolist()}

    @classmethod
    def from_dict(cls, d: dict) -> "Normalizer":
        return cls(np.asarray(d["mean"], np.float64), np.asarray(d["std"], np.float64))
