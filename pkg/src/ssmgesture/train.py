"""Training loop with resumable checkpoints.

A checkpoint directory holds::

    params.dimp     model parameters (named tensor table)
    optim.dimp      Adam first/second moments keyed ``m/<param>``, ``v/<param>``
    state.json      step, Adam step count, generator state, loss history
    manifest.json   model config, training settings, normalization, inputs
    skeleton.bvh    rest pose for writing generated motion
"""

from __future__ import annotations

import csv
import json
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np

from .autograd import NonFiniteError, Tape, backward
from .codec import Normalizer
from .condition import LogMelProvider, LocalFeatureSequence
from .diffusion import GestureDiffusion, ModelConfig
from .nn import Adam
from .serialize import load_table, save_table


class TrainingDiverged(RuntimeError):
    pass


@dataclass
class TrainSettings:
    steps: int = 200
    lr: float = 1e-3
    batch: int = 4
    ema: float = 0.98
    save_every: int = 50
    stratified: bool = True

    @classmethod
    def from_dict(cls, d: dict) -> "TrainSettings":
        known = set(cls.__dataclass_fields__)
        unknown = set(d) - known
        if unknown:
            raise ValueError(f"unknown train settings: {sorted(unknown)}")
        return cls(**d)


def ema_curve(losses, decay: float = 0.98) -> np.ndarray:
    """Exponential moving average started at the first value."""
    out = np.empty(len(losses))
    e = None
    for i, x in enumerate(losses):
        e = x if e is None else decay * e + (1.0 - decay) * x
        out[i] = e
    return out


class Trainer:
    def __init__(self, model: GestureDiffusion, data: list[tuple[np.ndarray, LocalFeatureSequence]],
                 settings: TrainSettings, rng: np.random.Generator):
        if not data:
            raise ValueError("no training clips")
        self.model = model
        self.data = data
        self.settings = settings
        self.rng = rng
        self.opt = Adam(model.parameters(), lr=settings.lr)
        self.step_count = 0
        self.losses: list[float] = []

    def _batch(self) -> list[tuple[np.ndarray, LocalFeatureSequence]]:
        k = self.settings.batch
        n = len(self.data)
        if k >= n:
            idx = self.rng.permutation(n) if k == n else self.rng.integers(0, n, size=k)
        else:
            idx = self.rng.choice(n, size=k, replace=False)
        return [self.data[i] for i in idx]

    def step(self) -> float:
        self.model.zero_grad()
        try:
            with Tape() as tape:
                loss = self.model.batch_loss(self._batch(), self.rng, self.settings.stratified)
            backward(tape, loss)
        except NonFiniteError as exc:
            raise TrainingDiverged(f"step {self.step_count + 1}: {exc}") from None
        value = loss.item()
        if not np.isfinite(value):
            raise TrainingDiverged(f"step {self.step_count + 1}: loss is {value}")
        self.opt.step()
        self.step_count += 1
        self.losses.append(value)
        return value

    # checkpoints -------------------------------------------------------------

    def save(self, directory: str | Path, manifest: dict) -> None:
        d = Path(directory)
        d.mkdir(parents=True, exist_ok=True)
        names = [n for n, _ in self.model.named_parameters()]
        save_table(d / "params.dimp", self.model.state_dict())
        moments = {f"m/{n}": m for n, m in zip(names, self.opt.m)}
        moments.update({f"v/{n}": v for n, v in zip(names, self.opt.v)})
        save_table(d / "optim.dimp", moments)
        state = {"step": self.step_count, "adam_t": self.opt.t,
                 "rng": self.rng.bit_generator.state, "losses": self.losses}
        (d / "state.json").write_text(json.dumps(state))
        man = dict(manifest)
        man["train"] = asdict(self.settings)
        man["step"] = self.step_count
        (d / "manifest.json").write_text(json.dumps(man, indent=2, sort_keys=True))
        write_loss_csv(d / "loss.csv", self.losses, self.settings.ema)

    def restore(self, directory: str | Path) -> None:
        d = Path(directory)
        self.model.load_state_dict(load_table(d / "params.dimp"))
        names = [n for n, _ in self.model.named_parameters()]
        moments = load_table(d / "optim.dimp")
        state = json.loads((d / "state.json").read_text())
        self.opt.load({"t": state["adam_t"], "m": [moments[f"m/{n}"] for n in names],
                       "v": [moments[f"v/{n}"] for n in names]})
        self.rng.bit_generator.state = state["rng"]
        self.step_count = int(state["step"])
        self.losses = [float(x) for x in state["losses"]]


def write_loss_csv(path: str | Path, losses, decay: float) -> None:
    ema = ema_curve(losses, decay)
    with open(path, "w", newline="") as f:
        w = csv.writer(f)
        w.writerow(["step", "loss", "ema"])
        for i, (l, e) in enumerate(zip(losses, ema), start=1):
            w.writerow([i, repr(float(l)), repr(float(e))])


def prepare_data(gestures: list[np.ndarray], audios: list[np.ndarray], normalizer: Normalizer,
                 provider=None) -> list[tuple[np.ndarray, LocalFeatureSequence]]:
    provider = provider or LogMelProvider()
    return [(normalizer.normalize(g), provider(a)) for g, a in zip(gestures, audios)]


def load_model(directory: str | Path) -> tuple[GestureDiffusion, dict]:
    """Model with trained parameters and the checkpoint manifest."""
    d = Path(directory)
    man = json.loads((d / "manifest.json").read_text())
    model = GestureDiffusion(ModelConfig.from_dict(man["config"]))
    model.load_state_dict(load_table(d / "params.dimp"))
    return model, man
