"""Command-line interface: preprocess, train, generate, evaluate, bench.

Exit codes: 0 success, 1 runtime failure, 2 usage or input error.
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import shutil
import sys
from dataclasses import asdict, fields
from pathlib import Path

import numpy as np

from . import __version__
from .store import InputError, file_hash

log = logging.getLogger("ssmgesture")

EXIT_OK, EXIT_RUNTIME, EXIT_USAGE = 0, 1, 2


# shared helpers -----------------------------------------------------------------

def load_config(path: str | None) -> dict:
    if not path:
        return {}
    try:
        cfg = json.loads(Path(path).read_text())
    except FileNotFoundError:
        raise InputError(f"config file {path} not found") from None
    except json.JSONDecodeError as exc:
        raise InputError(f"config file {path} is not valid JSON: {exc}") from None
    if not isinstance(cfg, dict):
        raise InputError("config must be a JSON object")
    return cfg


def pick(cfg: dict, allowed, command: str) -> dict:
    unknown = set(cfg) - set(allowed)
    if unknown:
        raise InputError(f"unknown {command} config keys: {sorted(unknown)}")
    return dict(cfg)


def run_manifest(args: argparse.Namespace, config: dict, inputs: dict[str, str]) -> dict:
    return {
        "command": args.command,
        "version": __version__,
        "argv": list(getattr(args, "argv", [])),
        "seed": args.seed,
        "config": config,
        "inputs": dict(sorted(inputs.items())),
    }


def write_json(path: Path, obj) -> None:
    path.write_text(json.dumps(obj, indent=2, sort_keys=True) + "\n")


def require_out(args) -> Path:
    if not args.out:
        raise InputError(f"{args.command} needs --out")
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    return out


# preprocess -----------------------------------------------------------------------

PREPROCESS_KEYS = ("seconds", "stride", "degrees")


def cmd_preprocess(args) -> int:
    from .store import build_store

    cfg = pick(load_config(args.config), PREPROCESS_KEYS, "preprocess")
    seconds = args.seconds if args.seconds is not None else cfg.get("seconds", 20.0)
    stride = args.stride if args.stride is not None else cfg.get("stride")
    degrees = not args.radians and cfg.get("degrees", True)
    out = require_out(args)
    man = build_store(args.bvh_dir, args.wav_dir, out, seconds, stride, degrees)
    config = {"seconds": seconds, "stride": stride, "degrees": degrees}
    write_json(out / "run_manifest.json", run_manifest(args, config, man["inputs"]))
    log.info("wrote %d clip pairs to %s", len(man["clips"]), out)
    return EXIT_OK


# train ------------------------------------------------------------------------------

def cmd_train(args) -> int:
    from .diffusion import ModelConfig, GestureDiffusion
    from .plots import line_chart
    from .store import ClipStore
    from .train import Trainer, TrainSettings, TrainingDiverged, ema_curve, prepare_data

    raw = load_config(args.config)
    train_cfg = raw.pop("train", {})
    try:
        settings = TrainSettings.from_dict(train_cfg)
        model_fields = {f.name for f in fields(ModelConfig)}
        pick(raw, model_fields, "model")
    except ValueError as exc:
        raise InputError(str(exc)) from None
    for key in ("steps", "lr", "batch", "save_every"):
        val = getattr(args, key)
        if val is not None:
            setattr(settings, key, val)
    if settings.steps < 0 or settings.batch < 1 or settings.lr <= 0:
        raise InputError("steps must be >= 0, batch >= 1 and lr > 0")

    store = ClipStore.load(args.clips)
    C = store.n_channels
    if (C - 6) % 3:
        raise InputError(f"clip store has {C} channels, not 3J+6")
    J = (C - 6) // 3
    if raw.get("n_joints", J) != J:
        raise InputError(f"config n_joints={raw['n_joints']} but clip store has {J} joints")
    raw["n_joints"] = J
    if args.seed is not None:
        raw["seed"] = args.seed
    try:
        cfg = ModelConfig.from_dict(raw)
    except (TypeError, ValueError) as exc:
        raise InputError(f"invalid model config: {exc}") from None

    out = require_out(args)
    has_ckpt = (out / "state.json").exists()
    if has_ckpt and not (args.resume or args.overwrite):
        raise InputError(f"{out} already holds a checkpoint; pass --resume or --overwrite")

    model = GestureDiffusion(cfg)
    data = prepare_data([p.gesture for p in store.pairs], [p.audio for p in store.pairs],
                        store.normalizer)
    trainer = Trainer(model, data, settings, np.random.default_rng(cfg.seed))
    if has_ckpt and args.resume:
        prev = json.loads((out / "manifest.json").read_text())
        if prev["config"] != cfg.to_dict():
            raise InputError("checkpoint config differs from the requested config")
        trainer.restore(out)
        log.info("resumed from step %d", trainer.step_count)

    inputs = {f"clips/{c['name']}.gesture": c["gesture_hash"] for c in store.manifest["clips"]}
    inputs.update({f"clips/{c['name']}.audio": c["audio_hash"] for c in store.manifest["clips"]})
    inputs["store/manifest.json"] = file_hash(store.root / "manifest.json")
    manifest = run_manifest(args, cfg.to_dict(), inputs)
    manifest["normalization"] = store.normalizer.to_dict()
    manifest["channel_layout"] = store.manifest.get("channel_layout")
    shutil.copyfile(store.root / "skeleton.bvh", out / "skeleton.bvh")

    try:
        while trainer.step_count < settings.steps:
            loss = trainer.step()
            k = trainer.step_count
            if k % max(1, settings.steps // 10) == 0 or k == settings.steps:
                log.info("step %d/%d loss %.5f", k, settings.steps, loss)
            if settings.save_every and k % settings.save_every == 0:
                trainer.save(out, manifest)
    except TrainingDiverged as exc:
        manifest["aborted"] = str(exc)
        trainer.save(out, manifest)
        log.error("training aborted: %s; last good checkpoint kept at step %d", exc,
                  trainer.step_count)
        return EXIT_RUNTIME
    trainer.save(out, manifest)
    if trainer.losses:
        steps = list(range(1, len(trainer.losses) + 1))
        line_chart({"loss": (steps, trainer.losses),
                    "ema": (steps, list(ema_curve(trainer.losses, settings.ema)))},
                   out / "loss.svg", "training loss", "step", "mse", logy=True)
    return EXIT_OK


# generate --------------------------------------------------------------------------

def cmd_generate(args) -> int:
    from .audio import read_wav, resample_audio
    from .bvh import BVHParseError, parse_bvh, save_bvh
    from .codec import Normalizer
    from .condition import AUDIO_RATE, GESTURE_FPS, LogMelProvider, gesture_frames
    from .motion import features_to_motion
    from .serialize import save_tensor
    from .train import load_model

    ckpt = Path(args.checkpoint)
    if not (ckpt / "params.dimp").is_file() or not (ckpt / "manifest.json").is_file():
        raise InputError(f"{ckpt} is not a checkpoint directory")
    try:
        model, man = load_model(ckpt)
        rest = parse_bvh((ckpt / "skeleton.bvh").read_text())
    except (KeyError, ValueError, BVHParseError) as exc:
        raise InputError(f"checkpoint incompatible with its config: {exc}") from None
    if rest.skeleton.J != model.cfg.n_joints:
        raise InputError("checkpoint skeleton does not match its config")

    wav = Path(args.wav)
    if not wav.is_file():
        raise InputError(f"{wav} not found")
    audio = read_wav(wav)
    if audio.rate < AUDIO_RATE:
        raise InputError(f"audio is {audio.rate} Hz; need at least {AUDIO_RATE} Hz")
    samples = resample_audio(audio, AUDIO_RATE).samples
    provider = LogMelProvider()
    if provider.dim != model.cfg.d_a:
        raise InputError(f"model expects d_a={model.cfg.d_a} features, provider gives {provider.dim}")
    T = gesture_frames(samples.size)
    if T < 1:
        raise InputError("audio is shorter than one gesture frame")

    seed = 0 if args.seed is None else args.seed
    clip = None if args.clip_x0 is None or args.clip_x0 <= 0 else args.clip_x0
    norm = Normalizer.from_dict(man["normalization"])
    Y = norm.denormalize(model.sample(provider(samples), T, np.random.default_rng(seed), clip))

    out = require_out(args)
    stem = wav.stem
    save_tensor(out / f"{stem}.gesture.dimt", Y)
    motion = features_to_motion(Y, rest.skeleton, GESTURE_FPS, rest.degrees,
                                origin=rest.positions(0)[0])
    save_bvh(motion, out / f"{stem}.bvh")
    config = {"clip_x0": clip, "frames": T, "checkpoint_step": man.get("step")}
    inputs = {wav.name: file_hash(wav), "checkpoint/params.dimp": file_hash(ckpt / "params.dimp")}
    write_json(out / f"{stem}.manifest.json", run_manifest(args, config, inputs))
    log.info("wrote %s (%d frames)", out / f"{stem}.bvh", T)
    return EXIT_OK


# evaluate --------------------------------------------------------------------------

def _load_side(directory: str | Path) -> tuple[list[str], list[np.ndarray], list[np.ndarray | None]]:
    """Gesture clips and (when found) 16 kHz audio from a directory."""
    from .audio import read_wav, resample_audio
    from .bvh import BVHParseError, load_bvh
    from .condition import AUDIO_RATE, GESTURE_FPS
    from .motion import motion_to_features, resample_motion
    from .serialize import FormatError, load_tensor
    from .store import STORE_FORMAT

    d = Path(directory)
    if not d.is_dir():
        raise InputError(f"{d} is not a directory")
    man = d / "manifest.json"
    if man.is_file() and json.loads(man.read_text()).get("format") == STORE_FORMAT:
        d = d / "clips"

    def audio_for(stem: str):
        if (d / f"{stem}.audio.dimt").is_file():
            return load_tensor(d / f"{stem}.audio.dimt")
        if (d / f"{stem}.wav").is_file():
            a = read_wav(d / f"{stem}.wav")
            return resample_audio(a, AUDIO_RATE).samples if a.rate >= AUDIO_RATE else None
        return None

    names, clips, audios = [], [], []
    for p in sorted(d.glob("*.gesture.dimt")):
        stem = p.name[:-len(".gesture.dimt")]
        try:
            clips.append(load_tensor(p))
        except FormatError as exc:
            raise InputError(f"{p}: {exc}") from None
        names.append(stem)
        audios.append(audio_for(stem))
    for p in sorted(d.glob("*.bvh")):
        if p.stem in names:
            continue
        try:
            motion = load_bvh(p)
        except BVHParseError as exc:
            raise InputError(f"{p}: {exc}") from None
        clips.append(motion_to_features(resample_motion(motion, GESTURE_FPS)))
        names.append(p.stem)
        audios.append(audio_for(p.stem))
    return names, clips, audios


def cmd_evaluate(args) -> int:
    from .metrics import (MotionAutoencoder, beat_align, detect_audio_beats,
                          detect_gesture_beats, fgd_feature, fgd_raw)

    _, gen, gen_audio = _load_side(args.generated)
    _, ref, _ = _load_side(args.reference)
    if len(gen) < 2 or len(ref) < 2:
        raise InputError(f"need at least 2 clips per side, got {len(gen)} generated and "
                         f"{len(ref)} reference")
    widths = {c.shape[1] for c in gen + ref}
    if len(widths) != 1:
        raise InputError(f"clips disagree on channel count: {sorted(widths)}")

    seed = 0 if args.seed is None else args.seed
    if args.embedder:
        embedder = MotionAutoencoder.load(args.embedder)
    else:
        embedder = MotionAutoencoder(widths.pop(), seed=seed)
        embedder.fit(ref, steps=args.embedder_steps)
    scores = [beat_align(detect_gesture_beats(g), detect_audio_beats(a), args.sigma)
              for g, a in zip(gen, gen_audio) if a is not None]
    report = {
        "fgd_raw": fgd_raw(gen, ref),
        "fgd_feature": fgd_feature(gen, ref, embedder),
        "beat_align": float(np.mean(scores)) if scores else None,
        "n_generated": len(gen),
        "n_reference": len(ref),
        "embedder_id": embedder.embedder_id(),
    }
    text = json.dumps(report, indent=2, sort_keys=True)
    if args.out:
        out = require_out(args)
        (out / "report.json").write_text(text + "\n")
        if not args.embedder:
            embedder.save(out / "embedder")
        config = {"sigma": args.sigma, "embedder": embedder.manifest()["kind"],
                  "embedder_steps": None if args.embedder else args.embedder_steps}
        inputs = {}
        for label, side in (("generated", args.generated), ("reference", args.reference)):
            for p in sorted(Path(side).rglob("*")):
                if p.is_file():
                    inputs[f"{label}/{p.relative_to(side)}"] = file_hash(p)
        write_json(out / "run_manifest.json", run_manifest(args, config, inputs))
    print(text)
    return EXIT_OK


# bench -------------------------------------------------------------------------------

BENCH_KEYS = ("d_model", "M", "d_state", "expand", "conv_width", "n_heads", "attn_heads",
              "lengths", "kernel_lengths", "repeats", "kernel_repeats", "param_d_model")


def _ints(text: str | None) -> list[int] | None:
    if text is None:
        return None
    try:
        vals = [int(x) for x in text.split(",") if x.strip()]
    except ValueError:
        raise InputError(f"expected comma-separated integers, got {text!r}") from None
    if not vals or min(vals) < 1:
        raise InputError("lengths must be positive")
    return vals


def cmd_bench(args) -> int:
    from .bench import (KERNEL_LENGTHS, STACK_LENGTHS, StackSetup, kernel_bench, loglog_slope,
                        param_counts, stack_bench, write_csv)
    from .plots import line_chart

    cfg = pick(load_config(args.config), BENCH_KEYS, "bench")
    for key in ("d_model", "M", "d_state"):
        if getattr(args, key) is not None:
            cfg[key] = getattr(args, key)
    cfg_lengths, cfg_k_lengths = cfg.pop("lengths", None), cfg.pop("kernel_lengths", None)
    lengths = _ints(args.lengths) or cfg_lengths or list(STACK_LENGTHS)
    k_lengths = _ints(args.kernel_lengths) or cfg_k_lengths or list(KERNEL_LENGTHS)
    repeats = cfg.pop("repeats", args.repeats)
    k_repeats = cfg.pop("kernel_repeats", args.kernel_repeats)
    full_width = cfg.pop("param_d_model", 1280)
    seed = 0 if args.seed is None else args.seed
    setup = StackSetup(**cfg)
    out = require_out(args)

    summary: dict = {}
    counts = {f"{k}@d{setup.d_model}": v for k, v in param_counts(setup).items()}
    full = StackSetup(**{**asdict(setup), "d_model": full_width, "d_state": 256,
                         "n_heads": None, "attn_heads": 20 if full_width == 1280 else None})
    counts.update({f"{k}@d{full_width}": v for k, v in param_counts(full).items()})
    with open(out / "params.csv", "w") as f:
        f.write("config,params\n")
        for k, v in counts.items():
            f.write(f"{k},{v}\n")
    summary["params"] = counts

    if not args.skip_kernel:
        rows = kernel_bench(k_lengths, repeats=k_repeats, seed=seed)
        write_csv(rows, out / "kernel.csv")
        series = {}
        for form in ("linear", "quadratic"):
            sel = [r for r in rows if r.form == form]
            series[form] = ([r.T for r in sel], [r.wall_ns / 1e9 for r in sel])
        line_chart(series, out / "kernel.svg", "scan wall time", "T", "seconds", True, True)
        big = max(r.T for r in rows)
        t = {r.form: r for r in rows if r.T == big}
        summary["kernel"] = {
            "slope_linear": loglog_slope(rows, "linear"),
            "slope_quadratic": loglog_slope(rows, "quadratic"),
            "T_max": big,
            "speedup_at_T_max": t["quadratic"].wall_ns / t["linear"].wall_ns,
            "memory_ratio_at_T_max": t["quadratic"].peak_bytes / max(1, t["linear"].peak_bytes),
        }
    if not args.skip_stack:
        rows = stack_bench(setup, lengths, repeats=repeats, seed=seed)
        write_csv(rows, out / "stack.csv")
        series = {}
        for form in ("mamba2-linear", "mamba2-quadratic", "attention"):
            sel = [r for r in rows if r.form == form]
            series[form] = ([r.T for r in sel], [r.wall_ns / 1e9 for r in sel])
        line_chart(series, out / "stack.svg", "stack forward wall time", "T", "seconds")
    write_json(out / "summary.json", summary)
    config = {**asdict(setup), "lengths": lengths, "kernel_lengths": k_lengths,
              "repeats": repeats, "kernel_repeats": k_repeats, "param_d_model": full_width}
    write_json(out / "run_manifest.json", run_manifest(args, config, {}))
    print(json.dumps(summary, indent=2, sort_keys=True))
    return EXIT_OK


# parser --------------------------------------------------------------------------------

def _common(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", help="JSON file with command settings")
    p.add_argument("--seed", type=int, default=None, help="random seed (u64)")
    p.add_argument("--out", help="output directory")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="ssmgesture", description=__doc__.splitlines()[0])
    parser.add_argument("--version", action="version", version=__version__)
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("preprocess", help="BVH + WAV pairs -> clip store")
    _common(p)
    p.add_argument("--bvh-dir", required=True)
    p.add_argument("--wav-dir", required=True)
    p.add_argument("--seconds", type=float, default=None, help="window length (default 20)")
    p.add_argument("--stride", type=float, default=None, help="window stride in seconds")
    p.add_argument("--radians", action="store_true", help="BVH rotations are in radians")

    p = sub.add_parser("train", help="train the diffusion model on a clip store")
    _common(p)
    p.add_argument("--clips", required=True, help="clip store directory")
    p.add_argument("--steps", type=int, default=None)
    p.add_argument("--lr", type=float, default=None)
    p.add_argument("--batch", type=int, default=None)
    p.add_argument("--save-every", type=int, default=None)
    p.add_argument("--resume", action="store_true")
    p.add_argument("--overwrite", action="store_true")

    p = sub.add_parser("generate", help="sample gestures for a WAV file")
    _common(p)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--wav", required=True)
    p.add_argument("--clip-x0", type=float, default=5.0,
                   help="clip the implied clean sample to +-value in normalized units (0: off)")

    p = sub.add_parser("evaluate", help="FGD and beat alignment of generated vs reference")
    _common(p)
    p.add_argument("--generated", required=True)
    p.add_argument("--reference", required=True)
    p.add_argument("--embedder", help="trained embedder directory (default: fit on reference)")
    p.add_argument("--embedder-steps", type=int, default=300)
    p.add_argument("--sigma", type=float, default=0.1, help="beat alignment width in seconds")

    p = sub.add_parser("bench", help="scan and stack scaling benchmark")
    _common(p)
    p.add_argument("--lengths", help="stack lengths T, comma separated")
    p.add_argument("--kernel-lengths", help="scan lengths T, comma separated")
    p.add_argument("--d-model", type=int, default=None)
    p.add_argument("--M", type=int, default=None)
    p.add_argument("--d-state", type=int, default=None)
    p.add_argument("--repeats", type=int, default=1)
    p.add_argument("--kernel-repeats", type=int, default=3)
    p.add_argument("--skip-kernel", action="store_true")
    p.add_argument("--skip-stack", action="store_true")
    return parser


COMMANDS = {"preprocess": cmd_preprocess, "train": cmd_train, "generate": cmd_generate,
            "evaluate": cmd_evaluate, "bench": cmd_bench}


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    args.argv = list(sys.argv[1:] if argv is None else argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.INFO,
                        format="%(levelname)s: %(message)s", stream=sys.stderr, force=True)
    threads = os.environ.get("DIM_THREADS")
    if threads is not None and not (threads.isdigit() and int(threads) > 0):
        log.error("DIM_THREADS must be a positive integer, got %r", threads)
        return EXIT_USAGE
    if args.seed is not None and not 0 <= args.seed < 2 ** 64:
        log.error("--seed must be an unsigned 64-bit integer")
        return EXIT_USAGE
    try:
        return COMMANDS[args.command](args)
    except InputError as exc:
        log.error("%s", exc)
        return EXIT_USAGE
    except Exception as exc:  # noqa: BLE001
        log.error("%s: %s", type(exc).__name__, exc)
        if args.verbose:
            raise
        return EXIT_RUNTIME


if __name__ == "__main__":
    raise SystemExit(main())
