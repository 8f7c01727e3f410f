"""On-disk clip store: aligned gesture/audio windows plus manifest and stats.

Layout::

    <root>/manifest.json      sources, content hashes, layout, normalization
    <root>/skeleton.bvh       one-frame rest pose used when writing output BVH
    <root>/clips/<name>.gesture.dimt   T x (3J+6) features at 20 fps
    <root>/clips/<name>.audio.dimt     16 kHz mono samples
"""

from __future__ import annotations

import hashlib
import json
import logging
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .audio import read_wav, resample_audio
from .bvh import BVHParseError, MotionClip, Skeleton, load_bvh, parse_bvh, write_bvh
from .codec import Normalizer
from .condition import AUDIO_RATE, GESTURE_FPS
from .motion import motion_to_features, resample_motion, segment_clips
from .serialize import load_tensor, save_tensor, tensor_bytes

log = logging.getLogger(__name__)

STORE_FORMAT = "ssmgesture-clips/1"


class InputError(ValueError):
    """Bad or missing user input (maps to exit code 2)."""


def git_blob_hash(data: bytes) -> str:
    """Content hash in git's blob form: ``sha1("blob <len>\\0" + data)``."""
    return hashlib.sha1(b"blob %d\0" % len(data) + data).hexdigest()


def file_hash(path: str | Path) -> str:
    return git_blob_hash(Path(path).read_bytes())


def channel_layout(skeleton: Skeleton) -> list[str]:
    names = [f"{n}.{c}" for n in skeleton.names for c in ("ex", "ey", "ez")]
    return names + [f"root.{c}" for c in ("vx", "vy", "vz", "wx", "wy", "wz")]


@dataclass
class ClipPair:
    name: str
    gesture: np.ndarray
    audio: np.ndarray


@dataclass
class ClipStore:
    root: Path
    manifest: dict
    pairs: list[ClipPair]
    normalizer: Normalizer
    skeleton: MotionClip

    @property
    def n_channels(self) -> int:
        return self.pairs[0].gesture.shape[1]

    @classmethod
    def load(cls, root: str | Path) -> "ClipStore":
        root = Path(root)
        mpath = root / "manifest.json"
        if not mpath.is_file():
            raise InputError(f"{root} is not a clip store (no manifest.json)")
        man = json.loads(mpath.read_text())
        if man.get("format") != STORE_FORMAT:
            raise InputError(f"unsupported clip store format {man.get('format')!r}")
        pairs = []
        for c in man["clips"]:
            g = load_tensor(root / "clips" / f"{c['name']}.gesture.dimt")
            a = load_tensor(root / "clips" / f"{c['name']}.audio.dimt")
            pairs.append(ClipPair(c["name"], g, a))
        if not pairs:
            raise InputError(f"clip store {root} holds no clips")
        skel = parse_bvh((root / "skeleton.bvh").read_text(), man.get("degrees", True))
        return cls(root, man, pairs, Normalizer.from_dict(man["normalization"]), skel)


def write_store(out_dir: str | Path, pairs: list[ClipPair], rest: MotionClip,
                extra: dict | None = None) -> dict:
    """Write clips, rest skeleton and manifest; returns the manifest."""
    out = Path(out_dir)
    (out / "clips").mkdir(parents=True, exist_ok=True)
    if not pairs:
        raise InputError("no clips to write")
    clips = []
    for p in pairs:
        g, a = np.asarray(p.gesture, np.float64), np.asarray(p.audio, np.float64)
        save_tensor(out / "clips" / f"{p.name}.gesture.dimt", g)
        save_tensor(out / "clips" / f"{p.name}.audio.dimt", a)
        clips.append({"name": p.name, "frames": int(g.shape[0]), "samples": int(a.shape[0]),
                      "gesture_hash": git_blob_hash(tensor_bytes(g)),
                      "audio_hash": git_blob_hash(tensor_bytes(a))})
    (out / "skeleton.bvh").write_text(write_bvh(rest))
    norm = Normalizer.fit([p.gesture for p in pairs])
    man = {
        "format": STORE_FORMAT,
        "fps": GESTURE_FPS,
        "rate": AUDIO_RATE,
        "degrees": rest.degrees,
        "joints": rest.skeleton.names,
        "channel_layout": channel_layout(rest.skeleton),
        "normalization": norm.to_dict(),
        "clips": clips,
    }
    if extra:
        for c, e in zip(man["clips"], extra.pop("clip_sources", [])):
            c.update(e)
        man.update(extra)
    (out / "manifest.json").write_text(json.dumps(man, indent=2, sort_keys=True))
    return man


def pair_inputs(bvh_dir: Path, wav_dir: Path) -> tuple[list[tuple[str, Path, Path]], list[str]]:
    bvhs = {p.stem: p for p in sorted(bvh_dir.glob("*.bvh"))}
    wavs = {p.stem: p for p in sorted(wav_dir.glob("*.wav"))}
    paired = [(s, bvhs[s], wavs[s]) for s in sorted(bvhs.keys() & wavs.keys())]
    unpaired = sorted((bvhs.get(s) or wavs[s]).name for s in bvhs.keys() ^ wavs.keys())
    return paired, unpaired


def build_store(bvh_dir: str | Path, wav_dir: str | Path, out_dir: str | Path,
                seconds: float = 20.0, stride: float | None = None,
                degrees: bool = True) -> dict:
    """Pair BVH/WAV files by stem, convert, segment and write a clip store."""
    bvh_dir, wav_dir = Path(bvh_dir), Path(wav_dir)
    for d in (bvh_dir, wav_dir):
        if not d.is_dir():
            raise InputError(f"input directory {d} does not exist")
    paired, unpaired = pair_inputs(bvh_dir, wav_dir)
    for path in unpaired:
        log.warning("skipping unpaired file %s", path)
    if not paired:
        raise InputError(f"no paired .bvh/.wav files in {bvh_dir} and {wav_dir}")

    pairs, sources, inputs = [], [], {}
    rest = None
    for stem, bvh_path, wav_path in paired:
        try:
            motion = load_bvh(bvh_path, degrees)
        except BVHParseError as exc:
            raise InputError(f"{bvh_path}: {exc}") from None
        if rest is None:
            rest = MotionClip(motion.skeleton, motion.frames[:1], GESTURE_FPS, degrees)
        elif motion.skeleton.names != rest.skeleton.names:
            raise InputError(f"{bvh_path}: skeleton differs from {paired[0][1]}")
        if motion.fps < GESTURE_FPS:
            raise InputError(f"{bvh_path}: {motion.fps} fps is below {GESTURE_FPS} fps")
        feats = motion_to_features(resample_motion(motion, GESTURE_FPS))
        audio = read_wav(wav_path)
        if audio.rate < AUDIO_RATE:
            raise InputError(f"{wav_path}: {audio.rate} Hz is below {AUDIO_RATE} Hz")
        samples = resample_audio(audio, AUDIO_RATE).samples
        try:
            windows = segment_clips(feats, samples, seconds, GESTURE_FPS, AUDIO_RATE,
                                    stride)
        except ValueError as exc:
            raise InputError(f"{stem}: {exc}") from None
        step = seconds if stride is None else stride
        for k, (g, a) in enumerate(windows):
            pairs.append(ClipPair(f"{stem}_{k:03d}", g, a))
            sources.append({"bvh": bvh_path.name, "wav": wav_path.name, "offset_s": k * step})
        inputs[bvh_path.name] = file_hash(bvh_path)
        inputs[wav_path.name] = file_hash(wav_path)
    if not pairs:
        raise InputError(f"inputs are shorter than one {seconds} s window")
    extra = {"clip_sources": sources, "inputs": inputs, "seconds": seconds, "stride": stride,
             "skipped": unpaired}
    return write_store(out_dir, pairs, rest, extra)
