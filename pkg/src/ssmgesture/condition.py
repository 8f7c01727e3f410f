"""Speech conditioning: local features, global style token, rate alignment and
diffusion-step fusion.

The pipeline maps a 16 kHz waveform and a diffusion step ``n`` to a
condition matrix with one row per 20 fps gesture frame:

1. a local feature provider turns audio into frame-level features ``Z_x``;
2. a Mamba-2 block scans ``Z_x`` and its last output token is the style
   token ``z_s``;
3. ``z_s`` is broadcast over time, concatenated to ``Z_x`` and projected;
4. the fused stream is linearly interpolated to the gesture frame count and
   mixed by a reflect-padded width-201 convolution;
5. a sinusoidal embedding of ``n`` passes an MLP and is added to every row.
"""

from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np

from . import ops
from .autograd import Tensor, TensorError
from .mamba2 import Mamba2Block, Mamba2BlockConfig
from .nn import MLP, Conv1d, Linear, Module
from .serialize import load_tensor, save_tensor

AUDIO_RATE = 16000
GESTURE_FPS = 20


@dataclass
class LocalFeatureSequence:
    Z: np.ndarray  # T_a x d_a
    rate_hz: float
    source: str = "logmel"

    def __post_init__(self):
        if self.rate_hz <= 0:
            raise ValueError("rate_hz must be positive")
        if self.Z.ndim != 2:
            raise ValueError("features must be T_a x d_a")

    @property
    def d_a(self) -> int:
        return self.Z.shape[1]


def mel_filterbank(n_mels: int, n_fft: int, sr: int, fmin: float = 0.0,
                   fmax: float | None = None) -> np.ndarray:
    """Triangular HTK-mel filters, ``n_mels x (n_fft // 2 + 1)``."""
    fmax = sr / 2 if fmax is None else fmax

    def hz_to_mel(f):
        return 2595.0 * np.log10(1.0 + np.asarray(f) / 700.0)

    def mel_to_hz(m):
        return 700.0 * (10.0 ** (np.asarray(m) / 2595.0) - 1.0)

    freqs = np.linspace(0.0, sr / 2, n_fft // 2 + 1)
    edges = mel_to_hz(np.linspace(hz_to_mel(fmin), hz_to_mel(fmax), n_mels + 2))
    lo, mid, hi = edges[:-2, None], edges[1:-1, None], edges[2:, None]
    up = (freqs[None, :] - lo) / (mid - lo)
    down = (hi - freqs[None, :]) / (hi - mid)
    return np.maximum(0.0, np.minimum(up, down))


class LogMelProvider:
    """Log mel energies: 80 bands, 25 ms Hann window, 20 ms hop (50 Hz)."""

    source = "logmel"

    def __init__(self, n_mels: int = 80, win_ms: float = 25.0, hop_ms: float = 20.0,
                 n_fft: int = 512, floor: float = 1e-10):
        self.n_mels = n_mels
        self.win = int(round(AUDIO_RATE * win_ms / 1000))
        self.hop = int(round(AUDIO_RATE * hop_ms / 1000))
        self.n_fft = max(n_fft, self.win)
        self.floor = floor
        self.fbank = mel_filterbank(n_mels, self.n_fft, AUDIO_RATE)
        self.window = np.hanning(self.win)

    @property
    def rate_hz(self) -> float:
        return AUDIO_RATE / self.hop

    @property
    def dim(self) -> int:
        return self.n_mels

    def __call__(self, audio: np.ndarray, sr: int = AUDIO_RATE) -> LocalFeatureSequence:
        if sr != AUDIO_RATE:
            raise ValueError(f"expected {AUDIO_RATE} Hz audio, got {sr} Hz; resample first")
        audio = np.asarray(audio, np.float64).reshape(-1)
        if audio.size == 0:
            raise ValueError("empty audio")
        n_frames = max(1, int(round(audio.size / self.hop)))
        need = (n_frames - 1) * self.hop + self.win
        x = np.zeros(max(need, audio.size))
        x[:audio.size] = audio
        frames = np.lib.stride_tricks.sliding_window_view(x, self.win)[::self.hop][:n_frames]
        spec = np.abs(np.fft.rfft(frames * self.window, n=self.n_fft)) ** 2
        mel = spec @ self.fbank.T
        return LocalFeatureSequence(np.log(np.maximum(mel, self.floor)), self.rate_hz, self.source)


class FileFeatureProvider:
    """Precomputed features stored as a tensor file plus a JSON sidecar."""

    source = "file"

    def __init__(self, path: str | Path):
        self.path = Path(path)

    @staticmethod
    def sidecar(path: Path) -> Path:
        return path.with_suffix(path.suffix + ".json")

    @classmethod
    def save(cls, feats: LocalFeatureSequence, path: str | Path) -> None:
        path = Path(path)
        save_tensor(path, feats.Z)
        meta = {"rate_hz": feats.rate_hz, "d_a": feats.d_a, "source": feats.source}
        cls.sidecar(path).write_text(json.dumps(meta))

    def __call__(self, audio=None, sr: int = AUDIO_RATE) -> LocalFeatureSequence:
        meta = json.loads(self.sidecar(self.path).read_text())
        Z = load_tensor(self.path)
        if Z.shape[1] != meta["d_a"]:
            raise ValueError(f"feature width {Z.shape[1]} != declared d_a {meta['d_a']}")
        return LocalFeatureSequence(Z, float(meta["rate_hz"]), meta.get("source", "file"))


def interpolation_matrix(T_src: int, T_dst: int) -> np.ndarray:
    """Linear time interpolation as a ``T_dst x T_src`` matrix (frame centers aligned)."""
    if T_src < 1 or T_dst < 1:
        raise ValueError("interpolation needs non-empty sequences")
    if T_src == T_dst:
        return np.eye(T_dst)
    pos = (np.arange(T_dst) + 0.5) * (T_src / T_dst) - 0.5
    pos = np.clip(pos, 0.0, T_src - 1)
    lo = np.floor(pos).astype(int)
    hi = np.minimum(lo + 1, T_src - 1)
    w = pos - lo
    W = np.zeros((T_dst, T_src))
    W[np.arange(T_dst), lo] += 1.0 - w
    W[np.arange(T_dst), hi] += w
    return W


def timestep_embedding(n: int, dim: int) -> np.ndarray:
    """Sinusoidal embedding with geometric frequencies from 1 down to 1/10000."""
    half = dim // 2
    freqs = np.exp(-math.log(10000.0) * np.arange(half) / max(half, 1))
    ang = n * freqs
    emb = np.concatenate([np.sin(ang), np.cos(ang)])
    if dim % 2:
        emb = np.concatenate([emb, [0.0]])
    return emb


@dataclass
class ConditionConfig:
    d_a: int = 80
    d_c: int = 1280
    N: int = 1000
    kernel_size: int = 201
    expand: int = 2
    d_state: int = 256
    conv_width: int = 4
    n_heads: int | None = None

    def style_block(self) -> Mamba2BlockConfig:
        return Mamba2BlockConfig(self.d_a, self.expand, self.d_state, self.conv_width, self.n_heads)

    def to_dict(self) -> dict:
        return asdict(self)


class ConditionExtractor(Module):
    def __init__(self, cfg: ConditionConfig, rng: np.random.Generator, down_init: str = "uniform"):
        if cfg.kernel_size % 2 == 0:
            raise ValueError("downsampling kernel must be odd for same padding")
        self.cfg = cfg
        self.style = Mamba2Block(cfg.style_block(), rng)
        self.fuse = Linear(2 * cfg.d_a, cfg.d_c, rng)
        self.down = Conv1d(cfg.d_c, cfg.d_c, cfg.kernel_size, rng, padding_mode="reflect",
                           init=down_init)
        self.time_mlp = MLP(cfg.d_c, cfg.d_c, cfg.d_c, rng)

    def global_style(self, Z: Tensor) -> Tensor:
        if Z.shape[0] < 1:
            raise TensorError("style scan needs at least one frame")
        return ops.take_row(self.style(Z), Z.shape[0] - 1)

    def broadcast_and_fuse(self, Z: Tensor, z_s: Tensor) -> Tensor:
        return self.fuse(ops.concat([Z, ops.repeat_rows(z_s, Z.shape[0])], axis=1))

    def downsample(self, fused: Tensor, T: int) -> Tensor:
        if fused.shape[0] == 0:
            raise TensorError("cannot downsample an empty stream")
        if T < 1:
            raise TensorError("target length must be >= 1")
        return self.down(ops.matmul(Tensor(interpolation_matrix(fused.shape[0], T)), fused))

    def fuse_timestep(self, c: Tensor, n: int) -> Tensor:
        if not 1 <= n <= self.cfg.N:
            raise ValueError(f"diffusion step {n} outside 1..{self.cfg.N}")
        emb = self.time_mlp(Tensor(timestep_embedding(n, self.cfg.d_c)[None, :]))
        return ops.add(c, ops.reshape(emb, (self.cfg.d_c,)))

    def audio_condition(self, feats: LocalFeatureSequence | np.ndarray | Tensor, T: int) -> Tensor:
        """Everything that does not depend on the diffusion step."""
        if isinstance(feats, LocalFeatureSequence):
            feats = feats.Z
        Z = feats if isinstance(feats, Tensor) else Tensor(np.asarray(feats, np.float64))
        if Z.shape[1] != self.cfg.d_a:
            raise TensorError(f"feature width {Z.shape[1]} != d_a {self.cfg.d_a}")
        return self.downsample(self.broadcast_and_fuse(Z, self.global_style(Z)), T)

    def __call__(self, feats, T: int, n: int) -> Tensor:
        return self.fuse_timestep(self.audio_condition(feats, T), n)


def gesture_frames(n_samples: int, sr: int = AUDIO_RATE, fps: int = GESTURE_FPS) -> int:
    """Gesture frame count for an audio clip: ``round(fps * seconds)``."""
    return int(round(fps * n_samples / sr))
