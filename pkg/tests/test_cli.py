"""End-to-end command-line runs on small synthetic data."""

import json
import subprocess
import sys
from importlib import resources

import jsonschema
import numpy as np
import pytest

from conftest import write_take
from ssmgesture.audio import AudioClip, write_wav
from ssmgesture.bvh import load_bvh
from ssmgesture.cli import main
from ssmgesture.serialize import load_tensor, save_tensor

TINY = {"N": 50, "M": 1, "d_model": 8, "d_state": 4, "n_heads": 2, "d_c": 6, "cond_kernel": 5}


@pytest.fixture(scope="module")
def workspace(tmp_path_factory):
    """Clip store from one 61 s take plus a trained tiny checkpoint."""
    root = tmp_path_factory.mktemp("cli")
    write_take(root / "bvh", root / "wav", "take", 61)
    assert main(["preprocess", "--bvh-dir", str(root / "bvh"), "--wav-dir", str(root / "wav"),
                 "--out", str(root / "store")]) == 0
    cfg = dict(TINY, train={"steps": 3, "batch": 2, "save_every": 1})
    (root / "cfg.json").write_text(json.dumps(cfg))
    assert main(["train", "--clips", str(root / "store"), "--config", str(root / "cfg.json"),
                 "--seed", "3", "--out", str(root / "ckpt")]) == 0
    return root


def speech(path, seconds=2.0, sr=22050, seed=0):
    r = np.random.default_rng(seed)
    t = np.arange(int(seconds * sr)) / sr
    write_wav(path, AudioClip(0.3 * np.sin(2 * np.pi * 180 * t) * (np.sin(2 * np.pi * 2 * t) > 0)
                              + 0.01 * r.standard_normal(t.size), sr))


class TestPreprocess:
    def test_three_pairs_and_manifest(self, workspace):
        man = json.loads((workspace / "store" / "manifest.json").read_text())
        assert len(man["clips"]) == 3
        run = json.loads((workspace / "store" / "run_manifest.json").read_text())
        assert run["command"] == "preprocess"
        assert set(run["inputs"]) == {"take.bvh", "take.wav"}
        assert all(len(h) == 40 for h in run["inputs"].values())

    def test_empty_input_exit_2(self, tmp_path):
        (tmp_path / "b").mkdir()
        (tmp_path / "w").mkdir()
        assert main(["preprocess", "--bvh-dir", str(tmp_path / "b"), "--wav-dir",
                     str(tmp_path / "w"), "--out", str(tmp_path / "o")]) == 2

    def test_bad_config_exit_2(self, tmp_path):
        (tmp_path / "c.json").write_text("{not json")
        assert main(["preprocess", "--bvh-dir", ".", "--wav-dir", ".", "--config",
                     str(tmp_path / "c.json"), "--out", str(tmp_path)]) == 2


class TestTrain:
    def test_outputs(self, workspace):
        ck = workspace / "ckpt"
        for name in ("params.dimp", "optim.dimp", "state.json", "manifest.json", "loss.csv",
                     "loss.svg", "skeleton.bvh"):
            assert (ck / name).is_file(), name
        man = json.loads((ck / "manifest.json").read_text())
        assert man["step"] == 3 and man["seed"] == 3
        assert man["config"]["n_joints"] == 2
        assert len((ck / "loss.csv").read_text().splitlines()) == 4

    def test_refuses_existing_checkpoint(self, workspace):
        assert main(["train", "--clips", str(workspace / "store"), "--config",
                     str(workspace / "cfg.json"), "--seed", "3",
                     "--out", str(workspace / "ckpt")]) == 2

    def test_resume_continues(self, workspace, tmp_path):
        base = ["train", "--clips", str(workspace / "store"), "--config",
                str(workspace / "cfg.json"), "--seed", "3"]
        assert main(base + ["--steps", "5", "--out", str(tmp_path / "straight")]) == 0
        assert main(base + ["--steps", "2", "--out", str(tmp_path / "split")]) == 0
        assert main(base + ["--steps", "5", "--resume", "--out", str(tmp_path / "split")]) == 0
        a = (tmp_path / "straight" / "params.dimp").read_bytes()
        assert a == (tmp_path / "split" / "params.dimp").read_bytes()

    def test_seeded_runs_share_trajectory(self, workspace, tmp_path):
        base = ["train", "--clips", str(workspace / "store"), "--config",
                str(workspace / "cfg.json"), "--seed", "3"]
        assert main(base + ["--out", str(tmp_path / "again")]) == 0
        assert ((tmp_path / "again" / "loss.csv").read_text()
                == (workspace / "ckpt" / "loss.csv").read_text())

    def test_unknown_model_key(self, workspace, tmp_path):
        (tmp_path / "c.json").write_text(json.dumps({"depth": 4}))
        assert main(["train", "--clips", str(workspace / "store"), "--config",
                     str(tmp_path / "c.json"), "--out", str(tmp_path / "o")]) == 2

    def test_not_a_store(self, tmp_path):
        assert main(["train", "--clips", str(tmp_path), "--out", str(tmp_path / "o")]) == 2


@pytest.fixture(scope="module")
def generated(workspace):
    out = workspace / "gen"
    for k in range(2):
        speech(workspace / f"talk{k}.wav", seed=k)
        assert main(["generate", "--checkpoint", str(workspace / "ckpt"), "--wav",
                     str(workspace / f"talk{k}.wav"), "--seed", "1", "--out", str(out)]) == 0
        # evaluate reads audio next to each gesture clip
        speech(out / f"talk{k}.wav", seed=k)
    return out


class TestGenerateEvaluate:
    def test_generate_outputs(self, generated):
        Y = load_tensor(generated / "talk0.gesture.dimt")
        assert Y.shape == (40, 12)
        motion = load_bvh(generated / "talk0.bvh")
        assert motion.n_frames == 40 and motion.fps == 20
        man = json.loads((generated / "talk0.manifest.json").read_text())
        assert man["config"]["clip_x0"] == 5.0

    def test_generate_deterministic(self, workspace, generated, tmp_path):
        assert main(["generate", "--checkpoint", str(workspace / "ckpt"), "--wav",
                     str(workspace / "talk0.wav"), "--seed", "1", "--out", str(tmp_path)]) == 0
        assert ((tmp_path / "talk0.gesture.dimt").read_bytes()
                == (generated / "talk0.gesture.dimt").read_bytes())

    def test_twenty_seconds_gives_400_frames(self, workspace, tmp_path):
        speech(tmp_path / "long.wav", seconds=20.0, sr=16000)
        assert main(["generate", "--checkpoint", str(workspace / "ckpt"), "--wav",
                     str(tmp_path / "long.wav"), "--out", str(tmp_path)]) == 0
        assert load_bvh(tmp_path / "long.bvh").n_frames == 400

    def test_seeds_differ(self, workspace, generated, tmp_path):
        assert main(["generate", "--checkpoint", str(workspace / "ckpt"), "--wav",
                     str(workspace / "talk0.wav"), "--seed", "2", "--out", str(tmp_path)]) == 0
        assert not np.allclose(load_tensor(tmp_path / "talk0.gesture.dimt"),
                               load_tensor(generated / "talk0.gesture.dimt"))

    def test_low_rate_audio_rejected(self, workspace, tmp_path):
        write_wav(tmp_path / "lo.wav", AudioClip(np.zeros(8000), 8000))
        assert main(["generate", "--checkpoint", str(workspace / "ckpt"), "--wav",
                     str(tmp_path / "lo.wav"), "--out", str(tmp_path)]) == 2

    def test_missing_checkpoint(self, tmp_path):
        assert main(["generate", "--checkpoint", str(tmp_path), "--wav", "x.wav",
                     "--out", str(tmp_path)]) == 2

    def test_evaluate_report(self, workspace, generated, tmp_path, capsys):
        assert main(["evaluate", "--generated", str(generated), "--reference",
                     str(workspace / "store"), "--embedder-steps", "20",
                     "--out", str(tmp_path)]) == 0
        report = json.loads((tmp_path / "report.json").read_text())
        schema = json.loads(resources.files("ssmgesture").joinpath(
            "data/evaluate_report.schema.json").read_text())
        jsonschema.validate(report, schema)
        assert report["n_generated"] == 2 and report["n_reference"] == 3
        assert report["beat_align"] is not None
        assert json.loads(capsys.readouterr().out) == report

    def test_reference_against_itself(self, workspace, tmp_path):
        assert main(["evaluate", "--generated", str(workspace / "store"), "--reference",
                     str(workspace / "store"), "--embedder-steps", "20",
                     "--out", str(tmp_path)]) == 0
        report = json.loads((tmp_path / "report.json").read_text())
        assert report["fgd_raw"] < 1e-8
        assert report["fgd_feature"] < 1e-8

    def test_single_clip_rejected(self, workspace, generated, tmp_path):
        (tmp_path / "one").mkdir()
        Y = load_tensor(generated / "talk0.gesture.dimt")
        save_tensor(tmp_path / "one" / "a.gesture.dimt", Y)
        assert main(["evaluate", "--generated", str(tmp_path / "one"), "--reference",
                     str(workspace / "store")]) == 2


class TestBench:
    def test_small_run(self, tmp_path, capsys):
        assert main(["bench", "--kernel-lengths", "64,128", "--lengths", "8,16", "--d-model", "16",
                     "--M", "1", "--d-state", "4", "--kernel-repeats", "1",
                     "--out", str(tmp_path)]) == 0
        summary = json.loads((tmp_path / "summary.json").read_text())
        assert summary["kernel"]["T_max"] == 128
        for name in ("kernel.csv", "stack.csv", "params.csv", "kernel.svg", "stack.svg"):
            assert (tmp_path / name).is_file()
        params = summary["params"]  # full-width counts use the requested depth
        assert params["adaln_mamba2_M1@d1280"] < params["adaln_attention_M2@d1280"]

    def test_linear_beats_quadratic_at_2000(self, tmp_path):
        assert main(["bench", "--skip-kernel", "--lengths", "2000", "--d-model", "16", "--M", "1",
                     "--d-state", "4", "--out", str(tmp_path)]) == 0
        rows = (tmp_path / "stack.csv").read_text().splitlines()[1:]
        wall = {r.split(",")[0]: int(r.split(",")[3]) for r in rows}
        assert len(rows) == 3  # one row per (form, T)
        assert wall["mamba2-linear"] < wall["mamba2-quadratic"]

    def test_bad_lengths(self, tmp_path):
        assert main(["bench", "--lengths", "8,x", "--out", str(tmp_path)]) == 2


class TestProcess:
    def test_threads_env_validated(self, tmp_path, monkeypatch):
        monkeypatch.setenv("DIM_THREADS", "zero")
        assert main(["bench", "--skip-kernel", "--skip-stack", "--out", str(tmp_path)]) == 2

    def test_seed_range(self, tmp_path):
        assert main(["bench", "--seed", str(2 ** 64), "--skip-kernel", "--skip-stack",
                     "--out", str(tmp_path)]) == 2

    def test_usage_error_exit_code(self):
        assert main(["train"]) == 2

    def test_module_entry_point(self):
        proc = subprocess.run([sys.executable, "-m", "ssmgesture", "--version"],
                              capture_output=True, text=True)
        assert proc.returncode == 0 and proc.stdout.strip()
