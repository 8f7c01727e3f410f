"""Mono audio clips: WAV input/output and polyphase downsampling."""

from __future__ import annotations

from dataclasses import dataclass
from fractions import Fraction
from pathlib import Path

import numpy as np
from scipy.io import wavfile
from scipy.signal import resample_poly


@dataclass
class AudioClip:
    samples: np.ndarray
    rate: int

    def __post_init__(self):
        self.samples = np.asarray(self.samples, np.float64).reshape(-1)
        if self.rate <= 0:
            raise ValueError("sample rate must be positive")

    @property
    def duration(self) -> float:
        return self.samples.size / self.rate


def _to_float(data: np.ndarray) -> np.ndarray:
    if data.dtype == np.uint8:
        return (data.astype(np.float64) - 128.0) / 128.0
    if np.issubdtype(data.dtype, np.integer):
        return data.astype(np.float64) / float(-np.iinfo(data.dtype).min)
    return data.astype(np.float64)


def read_wav(path: str | Path) -> AudioClip:
    """Read PCM (8/16/24/32-bit) or float WAV, mixing channels down to mono."""
    rate, data = wavfile.read(str(path))
    x = _to_float(data)
    if x.ndim == 2:
        x = x.mean(axis=1)
    return AudioClip(np.clip(x, -1.0, 1.0), int(rate))


def write_wav(path: str | Path, clip: AudioClip, pcm16: bool = True) -> None:
    x = np.clip(clip.samples, -1.0, 1.0)
    data = np.round(x * 32767).astype(np.int16) if pcm16 else x.astype(np.float32)
    wavfile.write(str(path), clip.rate, data)


def resample_audio(clip: AudioClip, target: int = 16000) -> AudioClip:
    """Windowed-sinc polyphase downsampling; output length ``round(len * target / rate)``."""
    if target > clip.rate:
        raise ValueError(f"upsampling requested: {clip.rate} -> {target} Hz")
    if target == clip.rate:
        return AudioClip(clip.samples.copy(), clip.rate)
    ratio = Fraction(target, clip.rate)
    y = resample_poly(clip.samples, ratio.numerator, ratio.denominator, padtype="mean")
    n = int(round(clip.samples.size * target / clip.rate))
    y = y[:n] if y.size >= n else np.pad(y, (0, n - y.size), mode="edge")
    return AudioClip(y, target)
