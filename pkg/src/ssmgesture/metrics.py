"""Objective gesture metrics: Frechet gesture distance and beat alignment."""

from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np
from scipy.ndimage import gaussian_filter1d

from . import ops
from .autograd import Tape, Tensor, backward
from .nn import Adam, Conv1d, Module
from .serialize import load_table, save_table

# Frechet distance ------------------------------------------------------------

@dataclass(frozen=True)
class GaussianSummary:
    mean: np.ndarray
    cov: np.ndarray
    count: int

    @classmethod
    def fit(cls, samples: np.ndarray, diag_load: float = 0.0) -> "GaussianSummary":
        x = np.asarray(samples, np.float64)
        if x.ndim != 2 or x.shape[0] < 2:
            raise ValueError("need at least 2 samples of shape n x d")
        cov = np.cov(x, rowvar=False).reshape(x.shape[1], x.shape[1])
        cov = 0.5 * (cov + cov.T) + diag_load * np.eye(x.shape[1])
        return cls(x.mean(axis=0), cov, x.shape[0])

    @property
    def dim(self) -> int:
        return self.mean.shape[0]


def _psd_sqrt(a: np.ndarray, tol: float) -> np.ndarray:
    w, v = np.linalg.eigh(0.5 * (a + a.T))
    if w.min() < -tol:
        raise ValueError(f"covariance not PSD (min eigenvalue {w.min():.3g})")
    return (v * np.sqrt(np.clip(w, 0.0, None))) @ v.T


def frechet_distance(p: GaussianSummary, q: GaussianSummary, tol: float = 1e-10) -> float:
    """``|mu_p - mu_q|^2 + Tr(S_p + S_q - 2 (S_p S_q)^(1/2))``.

    The trace of the product root is taken from the eigenvalues of the
    symmetric matrix ``S_p^(1/2) S_q S_p^(1/2)``, which shares the spectrum
    of ``S_p S_q``.
    """
    if p.dim != q.dim:
        raise ValueError(f"dimension mismatch: {p.dim} vs {q.dim}")
    scale = max(1.0, np.abs(p.cov).max(), np.abs(q.cov).max())
    root_p = _psd_sqrt(p.cov, tol * scale)
    _psd_sqrt(q.cov, tol * scale)
    mid = root_p @ q.cov @ root_p
    w = np.linalg.eigvalsh(0.5 * (mid + mid.T))
    if w.min() < -tol * scale * scale:
        raise ValueError(f"product covariance not PSD (min eigenvalue {w.min():.3g})")
    tr_root = np.sqrt(np.clip(w, 0.0, None)).sum()
    diff = p.mean - q.mean
    val = float(diff @ diff + np.trace(p.cov) + np.trace(q.cov) - 2.0 * tr_root)
    return max(val, 0.0)


def _frames(clips: Sequence[np.ndarray]) -> np.ndarray:
    return np.concatenate([np.asarray(c, np.float64).reshape(len(c), -1) for c in clips], axis=0)


def fgd_raw(generated: Sequence[np.ndarray], reference: Sequence[np.ndarray],
            diag_load: float = 1e-6) -> float:
    """Frechet distance between Gaussians fit to per-frame pose vectors."""
    if len(generated) < 2 or len(reference) < 2:
        raise ValueError("fgd needs at least 2 clips on each side")
    return frechet_distance(GaussianSummary.fit(_frames(generated), diag_load),
                            GaussianSummary.fit(_frames(reference), diag_load))


# feature-space embedder --------------------------------------------------------

class MotionAutoencoder(Module):
    """Convolutional autoencoder; per-frame latents define the feature space."""

    def __init__(self, n_channels: int, latent: int = 32, hidden: int = 64, seed: int = 0):
        rng = np.random.default_rng(seed)
        self.n_channels = n_channels
        self.latent = latent
        self.hidden = hidden
        self.seed = seed
        self.trained = False
        self.enc1 = Conv1d(n_channels, hidden, 3, rng, padding_mode="reflect")
        self.enc2 = Conv1d(hidden, latent, 3, rng, padding_mode="reflect")
        self.dec1 = Conv1d(latent, hidden, 3, rng, padding_mode="reflect")
        self.dec2 = Conv1d(hidden, n_channels, 3, rng, padding_mode="reflect")
        self.mean = np.zeros(n_channels)
        self.std = np.ones(n_channels)

    def encode(self, y) -> Tensor:
        z = (np.asarray(y, np.float64) - self.mean) / self.std
        return self.enc2(ops.silu(self.enc1(Tensor(z))))

    def reconstruct(self, y) -> Tensor:
        return self.dec2(ops.silu(self.dec1(self.encode(y))))

    def fit(self, clips: Sequence[np.ndarray], steps: int = 300, lr: float = 3e-3) -> list[float]:
        frames = _frames(clips)
        self.mean = frames.mean(axis=0)
        self.std = np.maximum(frames.std(axis=0), 1e-6)
        opt = Adam(self.parameters(), lr=lr)
        losses = []
        for _ in range(steps):
            self.zero_grad()
            with Tape() as tape:
                loss = None
                for c in clips:
                    target = (np.asarray(c, np.float64) - self.mean) / self.std
                    item = ops.mse(self.reconstruct(c), target)
                    loss = item if loss is None else ops.add(loss, item)
                loss = ops.mul(loss, 1.0 / len(clips))
            backward(tape, loss)
            opt.step()
            losses.append(loss.item())
        self.trained = True
        return losses

    def embedder_id(self) -> str:
        h = hashlib.sha256()
        for name, p in self.named_parameters():
            h.update(name.encode())
            h.update(np.ascontiguousarray(p.data).tobytes())
        h.update(self.mean.tobytes())
        h.update(self.std.tobytes())
        return h.hexdigest()[:16]

    def manifest(self) -> dict:
        return {
            "kind": "conv-autoencoder",
            "n_channels": self.n_channels,
            "latent": self.latent,
            "hidden": self.hidden,
            "seed": self.seed,
            "trained": self.trained,
            "embedder_id": self.embedder_id(),
            "mean": self.mean.tolist(),
            "std": self.std.tolist(),
        }

    def save(self, directory: str | Path) -> None:
        d = Path(directory)
        d.mkdir(parents=True, exist_ok=True)
        save_table(d / "params.dimp", self.state_dict())
        (d / "manifest.json").write_text(json.dumps(self.manifest(), indent=2))

    @classmethod
    def load(cls, directory: str | Path) -> "MotionAutoencoder":
        d = Path(directory)
        man = json.loads((d / "manifest.json").read_text())
        model = cls(man["n_channels"], man["latent"], man["hidden"], man["seed"])
        model.load_state_dict(load_table(d / "params.dimp"))
        model.mean = np.asarray(man["mean"])
        model.std = np.asarray(man["std"])
        model.trained = bool(man["trained"])
        return model


class UntrainedEmbedderError(ValueError):
    pass


def fgd_feature(generated: Sequence[np.ndarray], reference: Sequence[np.ndarray],
                embedder: MotionAutoencoder, diag_load: float = 1e-6) -> float:
    """Frechet distance between Gaussians fit to the embedder's per-frame latents."""
    if not embedder.trained:
        raise UntrainedEmbedderError("feature-space FGD requires a trained embedder")
    if len(generated) < 2 or len(reference) < 2:
        raise ValueError("fgd needs at least 2 clips on each side")
    g = [embedder.encode(c).data for c in generated]
    r = [embedder.encode(c).data for c in reference]
    return frechet_distance(GaussianSummary.fit(_frames(g), diag_load),
                            GaussianSummary.fit(_frames(r), diag_load))


# beats -------------------------------------------------------------------------

def _as_beats(times) -> np.ndarray:
    t = np.asarray(times, np.float64).reshape(-1)
    if t.size > 1 and np.any(np.diff(t) <= 0):
        raise ValueError("beat times must be strictly increasing")
    return t


def onset_envelope(audio: np.ndarray, sr: int = 16000, hop_ms: float = 10.0,
                   win: int = 512) -> tuple[np.ndarray, np.ndarray]:
    """Half-wave rectified spectral flux of the linear magnitude spectrum.

    Returns ``(times, envelope)``. A value is stamped at the end of its
    analysis window minus a quarter window, where the Hann taper rises
    fastest, so an impulse is reported close to its true onset.
    """
    x = np.asarray(audio, np.float64).reshape(-1)
    hop = int(round(sr * hop_ms / 1000))
    pad = np.concatenate([np.zeros(win), x, np.zeros(win)])
    frames = np.lib.stride_tricks.sliding_window_view(pad, win)[::hop]
    mag = np.abs(np.fft.rfft(frames * np.hanning(win), axis=1))
    flux = np.maximum(np.diff(mag, axis=0), 0.0).sum(axis=1)
    # frame k covers audio[k*hop - win : k*hop]
    times = (np.arange(1, len(frames)) * hop - win / 4) / sr
    return times, flux


def detect_audio_beats(audio: np.ndarray, sr: int = 16000, hop_ms: float = 10.0,
                       delta: float = 0.1, wait_s: float = 0.1, avg_s: float = 0.1) -> np.ndarray:
    """Onset times from spectral flux with an adaptive (relative) threshold.

    A frame is a beat when it is the maximum within ``+-wait_s``, exceeds the
    local mean within ``+-avg_s`` by ``delta * max(envelope)``, and lies at
    least ``wait_s`` after the previous beat. All thresholds scale with the
    envelope, so gain changes do not move beats. Silence yields no beats.
    """
    if sr != 16000:
        raise ValueError("beat detection expects 16 kHz audio")
    times, env = onset_envelope(audio, sr, hop_ms)
    peak = env.max() if env.size else 0.0
    if peak <= 1e-12 * max(1.0, np.abs(audio).max() if len(audio) else 1.0):
        return np.array([])
    env = env / peak
    hop_s = hop_ms / 1000
    w = max(1, int(round(wait_s / hop_s)))
    a = max(1, int(round(avg_s / hop_s)))
    beats = []
    last = -np.inf
    for i in range(env.size):
        lo, hi = max(0, i - w), min(env.size, i + w + 1)
        if env[i] < env[lo:hi].max() or env[i] <= 0:
            continue
        local = env[max(0, i - a):min(env.size, i + a + 1)].mean()
        if env[i] < local + delta:
            continue
        if times[i] - last < wait_s:
            continue
        beats.append(times[i])
        last = times[i]
    return np.asarray(beats)


def detect_gesture_beats(y: np.ndarray, fps: float = 20.0, smooth: float = 1.0,
                         min_sep: float = 0.1, channels: slice | None = None,
                         rel_tol: float = 1e-9) -> np.ndarray:
    """Local minima of smoothed joint-speed magnitude.

    Speed is ``|y[t+1] - y[t]| * fps`` stamped at ``t + 0.5`` frames. A run
    of equal speeds counts once, at its midpoint, when both neighbours are
    larger; constant velocity therefore yields no beats.
    """
    y = np.asarray(y, np.float64)
    if y.shape[0] < 3:
        raise ValueError("need at least 3 frames")
    if channels is not None:
        y = y[:, channels]
    speed = np.linalg.norm(np.diff(y, axis=0), axis=1) * fps
    if smooth > 0:
        speed = gaussian_filter1d(speed, smooth, mode="nearest")
    tol = rel_tol * max(1.0, speed.max())
    beats = []
    last = -np.inf
    i = 1
    while i < speed.size - 1:
        j = i
        while j + 1 < speed.size and abs(speed[j + 1] - speed[i]) <= tol:
            j += 1
        if j + 1 < speed.size and speed[i - 1] > speed[i] + tol and speed[j + 1] > speed[i] + tol:
            t = ((i + j) / 2 + 0.5) / fps
            if t - last >= min_sep:
                beats.append(t)
                last = t
        i = j + 1
    return np.asarray(beats)


def beat_align(gesture_beats, audio_beats, sigma: float = 0.1) -> float:
    """Mean over gesture beats of ``exp(-d^2 / (2 sigma^2))``, ``d`` the distance
    to the nearest audio beat; 0 when either set is empty."""
    if sigma <= 0:
        raise ValueError("sigma must be positive")
    g, a = _as_beats(gesture_beats), _as_beats(audio_beats)
    if g.size == 0 or a.size == 0:
        return 0.0
    d = np.abs(g[:, None] - a[None, :]).min(axis=1)
    return float(np.exp(-(d * d) / (2.0 * sigma * sigma)).mean())
