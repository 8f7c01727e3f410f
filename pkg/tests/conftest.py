from __future__ import annotations

from pathlib import Path

import numpy as np
import pytest

from ssmgesture import ops
from ssmgesture.audio import AudioClip, write_wav
from ssmgesture.autograd import Tape, Tensor, backward, no_tape
from ssmgesture.bvh import MotionClip, chain_skeleton, save_bvh


@pytest.fixture
def rng() -> np.random.Generator:
    return np.random.default_rng(1234)


def projected(out: Tensor, weights: np.ndarray) -> Tensor:
    """Scalar ``sum(out * weights)`` so any output shape can be differentiated."""
    return ops.total(ops.mul(out, Tensor(weights))) if out.ndim else ops.mul(out, 1.0)


def fd_check(fn, arrays: list[np.ndarray], h: float = 1e-5, seed: int = 0,
             max_coords: int | None = None) -> float:
    """Largest relative error between analytic and central-difference gradients.

    ``fn`` maps tensors to a tensor; its output is projected onto a fixed
    random direction. Relative error per input is
    ``|g - g_fd| / max(|g|, |g_fd|)`` in the 2-norm.
    """
    arrays = [np.array(a, np.float64) for a in arrays]
    with no_tape():
        w = np.random.default_rng(seed).standard_normal(fn(*[Tensor(a) for a in arrays]).shape)

    def value(xs):
        with no_tape():
            return projected(fn(*[Tensor(x) for x in xs]), w).item()

    params = [Tensor(a.copy(), requires_grad=True) for a in arrays]
    with Tape() as tape:
        loss = projected(fn(*params), w)
    backward(tape, loss)
    sel = np.random.default_rng(seed + 1)
    worst = 0.0
    for k, p in enumerate(params):
        analytic = np.zeros_like(arrays[k]) if p.grad is None else p.grad
        idx = list(np.ndindex(arrays[k].shape))
        if max_coords is not None and len(idx) > max_coords:
            idx = [idx[i] for i in sel.choice(len(idx), max_coords, replace=False)]
        ga, gn = [], []
        for i in idx:
            plus = [a.copy() for a in arrays]
            minus = [a.copy() for a in arrays]
            plus[k][i] += h
            minus[k][i] -= h
            gn.append((value(plus) - value(minus)) / (2 * h))
            ga.append(analytic[i])
        ga, gn = np.array(ga), np.array(gn)
        denom = max(np.linalg.norm(ga), np.linalg.norm(gn), 1e-12)
        worst = max(worst, float(np.linalg.norm(ga - gn) / denom))
    return worst


def param_fd_check(params: list[Tensor], loss_fn, h: float = 1e-5, seed: int = 0,
                   max_coords: int | None = 8) -> float:
    """``fd_check`` for a closure over module parameters, perturbed in place.

    ``loss_fn()`` must return a scalar tensor. Coordinates are subsampled per
    parameter to keep whole-model checks cheap.
    """
    for p in params:
        p.grad = None
    with Tape() as tape:
        loss = loss_fn()
    backward(tape, loss)
    sel = np.random.default_rng(seed)
    worst = 0.0
    for p in params:
        analytic = np.zeros(p.shape) if p.grad is None else p.grad.copy()
        idx = list(np.ndindex(p.shape))
        if max_coords is not None and len(idx) > max_coords:
            idx = [idx[i] for i in sel.choice(len(idx), max_coords, replace=False)]
        ga, gn = [], []
        for i in idx:
            orig = p.data[i]
            with no_tape():
                p.data[i] = orig + h
                up = loss_fn().item()
                p.data[i] = orig - h
                down = loss_fn().item()
            p.data[i] = orig
            gn.append((up - down) / (2 * h))
            ga.append(analytic[i])
        ga, gn = np.array(ga), np.array(gn)
        denom = np.linalg.norm(gn) if np.linalg.norm(gn) > 0 else np.linalg.norm(ga)
        if denom < 1e-10:
            continue  # parameter has no influence (e.g. zero-gated branch)
        worst = max(worst, float(np.linalg.norm(ga - gn) / max(denom, np.linalg.norm(ga))))
    return worst


def toy_clips(n_clips: int = 4, T: int = 40, n_joints: int = 2, seed: int = 0
              ) -> tuple[list[np.ndarray], list[np.ndarray]]:
    """Smooth multi-frequency gesture clips with 2 s of low-level noise audio each."""
    rng = np.random.default_rng(seed)
    C = 3 * n_joints + 6
    t = np.arange(T) / 20
    gestures, audio = [], []
    for k in range(n_clips):
        y = np.stack([0.5 * np.cos(c) + 0.3 * np.sin(2 * np.pi * (0.5 + 0.3 * c) * t + k)
                      for c in range(C)], axis=1)
        gestures.append(y)
        audio.append(0.1 * rng.standard_normal(int(T / 20 * 16000)))
    return gestures, audio


def write_take(bvh_dir: Path, wav_dir: Path, stem: str, seconds: float, fps: int = 100,
               sr: int = 44100, seed: int = 0, n_joints: int = 2) -> MotionClip:
    """A synchronized synthetic BVH/WAV pair of the given duration."""
    rng = np.random.default_rng(seed)
    sk = chain_skeleton(n_joints)
    F = int(round(seconds * fps))
    t = np.arange(F) / fps
    frames = np.zeros((F, sk.n_channels))
    frames[:, 0] = 10 * t
    frames[:, 1] = 90.0
    frames[:, 3] = 20 * np.sin(2 * np.pi * 0.5 * t)
    for j in range(1, n_joints):
        col = 6 + 3 * (j - 1)
        frames[:, col] = 30 * np.sin(2 * np.pi * (1.0 + 0.5 * j) * t + j)
        frames[:, col + 1] = 10 * np.cos(2 * np.pi * t)
    clip = MotionClip(sk, frames, fps)
    bvh_dir.mkdir(parents=True, exist_ok=True)
    wav_dir.mkdir(parents=True, exist_ok=True)
    save_bvh(clip, bvh_dir / f"{stem}.bvh")
    ts = np.arange(int(round(seconds * sr))) / sr
    x = 0.3 * np.sin(2 * np.pi * 220 * ts) * (np.sin(2 * np.pi * 1.5 * ts) > 0)
    write_wav(wav_dir / f"{stem}.wav", AudioClip(x + 0.01 * rng.standard_normal(ts.size), sr))
    return clip


ACCEPTANCE_LINES: list[str] = []


def report_criterion(name: str, ok: bool, detail: str = "") -> None:
    """Record and print one acceptance verdict, then fail the test if needed."""
    line = f"{'PASS' if ok else 'FAIL'}: {name}" + (f" ({detail})" if detail else "")
    ACCEPTANCE_LINES.append(line)
    print(line)
    assert ok, line


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)
