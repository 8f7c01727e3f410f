"""DDPM noising, noise-prediction network and ancestral sampling.

Steps are 1-based (``n = 1..N``); schedule arrays are indexed ``n - 1``.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass, fields
from typing import Callable

import numpy as np

from . import ops
from .adaln import AdaLNStack, AdaLNStackConfig
from .autograd import Tensor, TensorError
from .codec import GestureDecoder, GestureEncoder, gesture_channels
from .condition import ConditionConfig, ConditionExtractor, LocalFeatureSequence
from .mamba2 import Mamba2BlockConfig
from .nn import Module


class SamplingError(RuntimeError):
    pass


@dataclass(frozen=True)
class DiffusionSchedule:
    beta: np.ndarray
    alpha: np.ndarray
    alpha_bar: np.ndarray
    beta_tilde: np.ndarray

    @property
    def N(self) -> int:
        return self.beta.shape[0]


def build_schedule(N: int = 1000, beta1: float = 1e-4, betaN: float = 8e-2) -> DiffusionSchedule:
    """Linear variance schedule including both endpoints."""
    if N < 2:
        raise ValueError("N must be >= 2")
    if not 0.0 < beta1 < betaN < 1.0:
        raise ValueError(f"need 0 < beta1 < betaN < 1, got {beta1}, {betaN}")
    beta = np.linspace(beta1, betaN, N)
    alpha = 1.0 - beta
    alpha_bar = np.cumprod(alpha)
    prev = np.concatenate([[1.0], alpha_bar[:-1]])
    beta_tilde = (1.0 - prev) / (1.0 - alpha_bar) * beta
    return DiffusionSchedule(beta, alpha, alpha_bar, beta_tilde)


def _check_step(n: int, sched: DiffusionSchedule) -> None:
    if not 1 <= n <= sched.N:
        raise ValueError(f"diffusion step {n} outside 1..{sched.N}")


def forward_noise(y0: np.ndarray, n: int, eps: np.ndarray, sched: DiffusionSchedule) -> np.ndarray:
    """Closed-form marginal: ``sqrt(abar_n) y0 + sqrt(1 - abar_n) eps``."""
    _check_step(n, sched)
    y0, eps = np.asarray(y0), np.asarray(eps)
    if y0.shape != eps.shape:
        raise TensorError(f"noise shape {eps.shape} != data shape {y0.shape}")
    ab = sched.alpha_bar[n - 1]
    return np.sqrt(ab) * y0 + np.sqrt(1.0 - ab) * eps


def forward_step(y_prev: np.ndarray, n: int, z: np.ndarray, sched: DiffusionSchedule) -> np.ndarray:
    """One Markov step ``q(y_n | y_{n-1})`` driven by standard normal ``z``."""
    _check_step(n, sched)
    b = sched.beta[n - 1]
    return np.sqrt(1.0 - b) * y_prev + np.sqrt(b) * z


EpsFn = Callable[[np.ndarray, int], np.ndarray]


def ancestral_sample(eps_fn: EpsFn, shape: tuple[int, ...], sched: DiffusionSchedule,
                     rng: np.random.Generator, clip_x0: float | None = None) -> np.ndarray:
    """Reverse chain from ``N(0, I)`` using predicted noise.

    The per-step standard deviation is ``sqrt(beta_tilde_n)``; no noise is
    added on the final step. With ``clip_x0`` set, the clean estimate implied
    by ``eps`` is clipped to ``[-clip_x0, clip_x0]`` and the posterior mean is
    formed from it; without clipping both routes give the same mean.
    """
    y = rng.standard_normal(shape)
    for n in range(sched.N, 0, -1):
        eps = np.asarray(eps_fn(y, n))
        i = n - 1
        if clip_x0 is None:
            mu = (y - sched.beta[i] / np.sqrt(1.0 - sched.alpha_bar[i]) * eps) / np.sqrt(sched.alpha[i])
        else:
            ab = sched.alpha_bar[i]
            ab_prev = sched.alpha_bar[i - 1] if i > 0 else 1.0
            x0 = np.clip((y - np.sqrt(1.0 - ab) * eps) / np.sqrt(ab), -clip_x0, clip_x0)
            mu = (np.sqrt(ab_prev) * sched.beta[i] * x0
                  + np.sqrt(sched.alpha[i]) * (1.0 - ab_prev) * y) / (1.0 - ab)
        if n > 1:
            y = mu + np.sqrt(sched.beta_tilde[i]) * rng.standard_normal(shape)
        else:
            y = mu
        if not np.isfinite(y).all():
            bad = int((~np.isfinite(y)).sum())
            ok = np.abs(eps[np.isfinite(eps)])
            peak = f"{ok.max():.3g}" if ok.size else "n/a"
            raise SamplingError(
                f"non-finite state at step n={n}: {bad} bad entries, finite |eps| max={peak}"
            )
    return y


def oracle_eps(y0: np.ndarray, sched: DiffusionSchedule) -> EpsFn:
    """Predictor returning the exact noise that maps ``y0`` to the current state."""
    y0 = np.asarray(y0, np.float64)

    def fn(y, n):
        ab = sched.alpha_bar[n - 1]
        return (y - np.sqrt(ab) * y0) / np.sqrt(1.0 - ab)

    return fn


@dataclass
class ModelConfig:
    """Model and schedule hyper-parameters; the JSON run config."""

    N: int = 1000
    beta1: float = 1e-4
    betaN: float = 8e-2
    M: int = 6
    d_model: int = 1280
    d_state: int = 256
    conv_width: int = 4
    expand: int = 2
    seed: int = 0
    n_heads: int | None = None
    n_joints: int = 59
    d_a: int = 80
    d_c: int | None = None
    mlp_ratio: int = 4
    cond_kernel: int = 201

    def __post_init__(self):
        if self.d_c is None:
            self.d_c = self.d_model

    @property
    def n_channels(self) -> int:
        return gesture_channels(self.n_joints)

    def stack_config(self) -> AdaLNStackConfig:
        blk = Mamba2BlockConfig(self.d_model, self.expand, self.d_state, self.conv_width,
                                self.n_heads)
        return AdaLNStackConfig(self.M, self.d_model, self.d_c, self.mlp_ratio, blk)

    def condition_config(self) -> ConditionConfig:
        return ConditionConfig(self.d_a, self.d_c, self.N, self.cond_kernel, self.expand,
                               self.d_state, self.conv_width, None)

    def schedule(self) -> DiffusionSchedule:
        return build_schedule(self.N, self.beta1, self.betaN)

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ValueError(f"unknown config keys: {sorted(unknown)}")
        return cls(**d)


class GestureDiffusion(Module):
    """Noise predictor: encode -> AdaLN Mamba-2 stack (conditioned) -> decode."""

    def __init__(self, cfg: ModelConfig, rng: np.random.Generator | None = None):
        rng = np.random.default_rng(cfg.seed) if rng is None else rng
        self.cfg = cfg
        self.schedule = cfg.schedule()
        self.encoder = GestureEncoder(cfg.n_channels, cfg.d_model, rng)
        self.condition = ConditionExtractor(cfg.condition_config(), rng)
        self.stack = AdaLNStack(cfg.stack_config(), rng)
        self.decoder = GestureDecoder(cfg.d_model, cfg.n_channels, rng)

    def predict(self, y_n, C: Tensor) -> Tensor:
        y = y_n if isinstance(y_n, Tensor) else Tensor(np.asarray(y_n, np.float64))
        return self.decoder(self.stack(self.encoder(y), C))

    def training_loss(self, y0: np.ndarray, feats, rng: np.random.Generator,
                      n: int | None = None, eps: np.ndarray | None = None) -> Tensor:
        """Noise-prediction MSE for one clip at a uniformly drawn step."""
        y0 = np.asarray(y0, np.float64)
        if n is None:
            n = int(rng.integers(1, self.schedule.N + 1))
        if eps is None:
            eps = rng.standard_normal(y0.shape)
        y_n = forward_noise(y0, n, eps, self.schedule)
        C = self.condition(feats, y0.shape[0], n)
        return ops.mse(self.predict(y_n, C), eps)

    def batch_loss(self, clips: list[tuple[np.ndarray, object]], rng: np.random.Generator,
                   stratified: bool = True) -> Tensor:
        """Mean noise-prediction loss over a batch.

        With ``stratified`` the step range is cut into ``len(clips)`` equal
        strata and each clip draws its step from a different one (in random
        order); every step is still marginally uniform on ``1..N``.
        """
        steps = self.draw_steps(len(clips), rng, stratified)
        loss = None
        for (y0, feats), n in zip(clips, steps):
            item = self.training_loss(y0, feats, rng, n=n)
            loss = item if loss is None else ops.add(loss, item)
        return ops.mul(loss, 1.0 / len(clips))

    def draw_steps(self, k: int, rng: np.random.Generator, stratified: bool = True) -> list[int]:
        N = self.schedule.N
        if not stratified or k > N:
            return [int(n) for n in rng.integers(1, N + 1, size=k)]
        edges = np.linspace(0, N, k + 1)
        u = rng.uniform(size=k)
        steps = np.floor(edges[:-1] + u * np.diff(edges)).astype(int) + 1
        return [int(n) for n in rng.permutation(np.minimum(steps, N))]

    def eps_fn(self, feats, T: int) -> EpsFn:
        """Noise predictor closed over one clip's audio; the audio path is computed once."""
        base = self.condition.audio_condition(feats, T)

        def fn(y, n):
            return self.predict(y, self.condition.fuse_timestep(base, n)).data

        return fn

    def sample(self, feats: LocalFeatureSequence | np.ndarray, T: int,
               rng: np.random.Generator, clip_x0: float | None = None) -> np.ndarray:
        """Generate a whole normalized gesture sequence (T x channels) at once."""
        return ancestral_sample(self.eps_fn(feats, T), (T, self.cfg.n_channels), self.schedule,
                                rng, clip_x0=clip_x0)
