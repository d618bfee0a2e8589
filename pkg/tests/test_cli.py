"""Command-line surface: exit codes, determinism of emitted artifacts, and
the end-to-end gen/train/infer/verify/analyze flow on tiny settings."""

import numpy as np
import pytest

from fbdet.checkpoint import load_checkpoint
from fbdet.cli import main
from fbdet.detector import build_model


def run(*argv) -> int:
    return main([str(a) for a in argv])


@pytest.fixture(scope="module")
def tiny_manifest(tmp_path_factory):
    path = tmp_path_factory.mktemp("data") / "train.jsonl"
    assert run("gen", "--count", 60, "--seed", 3, "--noise", 0.25, "--out", path) == 0
    return path


@pytest.fixture(scope="module")
def tiny_ckpt(tmp_path_factory, tiny_manifest):
    path = tmp_path_factory.mktemp("ckpt") / "model.ckpt"
    code = run(
        "train", "--data", tiny_manifest, "--mi", 1, "--epochs", 2,
        "--lr", 0.005, "--seed", 1, "--out", path,
    )
    assert code == 0
    return path


class TestGen:
    def test_deterministic_bytes(self, tmp_path):
        a, b = tmp_path / "a.jsonl", tmp_path / "b.jsonl"
        assert run("gen", "--count", 10, "--seed", 7, "--out", a) == 0
        assert run("gen", "--count", 10, "--seed", 7, "--out", b) == 0
        assert a.read_bytes() == b.read_bytes()

    def test_line_count(self, tmp_path):
        path = tmp_path / "c.jsonl"
        assert run("gen", "--count", 25, "--seed", 0, "--out", path) == 0
        assert len(path.read_text().strip().split("\n")) == 25

    def test_zero_count_usage_error(self, tmp_path, capsys):
        with pytest.raises(SystemExit) as exc:
            run("gen", "--count", 0, "--seed", 0, "--out", tmp_path / "x.jsonl")
        assert exc.value.code == 2

    def test_unknown_command_usage_error(self):
        with pytest.raises(SystemExit) as exc:
            run("frobnicate")
        assert exc.value.code == 2


class TestTrain:
    def test_zero_epochs_keeps_initialization(self, tmp_path, tiny_manifest):
        out = tmp_path / "init.ckpt"
        assert run(
            "train", "--data", tiny_manifest, "--mi", 0, "--epochs", 0,
            "--lr", 0.01, "--seed", 5, "--out", out,
        ) == 0
        model, cfg, meta = load_checkpoint(out)
        fresh = build_model(5)
        for name in fresh.params.names():
            assert np.array_equal(model.params[name], fresh.params[name])
        assert cfg.iterations == 0
        assert meta["epochs"] == 0

    def test_fixed_seed_reruns_identical(self, tmp_path, tiny_manifest):
        outs = []
        for tag in ("a", "b"):
            ckpt = tmp_path / f"{tag}.ckpt"
            csv = tmp_path / f"{tag}.csv"
            assert run(
                "train", "--data", tiny_manifest, "--mi", 1, "--epochs", 2,
                "--lr", 0.005, "--seed", 9, "--out", ckpt, "--loss-csv", csv,
            ) == 0
            outs.append((ckpt.read_bytes(), csv.read_bytes()))
        assert outs[0] == outs[1]

    def test_missing_manifest_fails(self, tmp_path):
        code = run(
            "train", "--data", tmp_path / "missing.jsonl", "--mi", 0,
            "--epochs", 1, "--lr", 0.01, "--seed", 0, "--out", tmp_path / "x.ckpt",
        )
        assert code == 1


class TestInfer:
    def test_writes_detection_csv(self, tmp_path, tiny_ckpt, tiny_manifest):
        out = tmp_path / "dets.csv"
        assert run("infer", "--ckpt", tiny_ckpt, "--data", tiny_manifest, "--out", out) == 0
        header = out.read_text().split("\n")[0]
        assert header == "scene,label,score,x,y,w,h"

    def test_mi_override_with_zero_feedback_matches_baseline(self, tmp_path, tiny_manifest):
        # epochs=0 leaves the feedback at zero, so every mi gives identical output
        ckpt = tmp_path / "zero.ckpt"
        run("train", "--data", tiny_manifest, "--mi", 1, "--epochs", 0,
            "--lr", 0.01, "--seed", 2, "--out", ckpt)
        outs = []
        for mi in (0, 3):
            out = tmp_path / f"mi{mi}.csv"
            assert run("infer", "--ckpt", ckpt, "--data", tiny_manifest,
                       "--mi", mi, "--out", out) == 0
            outs.append(out.read_bytes())
        assert outs[0] == outs[1]


class TestVerify:
    @pytest.mark.parametrize("suite,trials", [
        ("parseval", 60), ("theorem1", 40), ("convtheorem", 40),
        ("theorem2", 12), ("gradcheck", 2),
    ])
    def test_suites_pass(self, suite, trials, tmp_path):
        out = tmp_path / f"{suite}.csv"
        assert run("verify", "--suite", suite, "--trials", trials,
                   "--seed", 0, "--out", out) == 0
        assert out.exists()

    def test_unknown_suite_usage_error(self):
        with pytest.raises(SystemExit) as exc:
            run("verify", "--suite", "theorem9")
        assert exc.value.code == 2


class TestSweep:
    def test_single_mi_table(self, tmp_path, tiny_manifest):
        out = tmp_path / "sweep.csv"
        assert run(
            "sweep-mi", "--data", tiny_manifest, "--test-data", tiny_manifest,
            "--mi-list", "0", "--epochs", 1, "--lr", 0.005, "--seed", 0, "--out", out,
        ) == 0
        lines = out.read_text().strip().split("\n")
        assert lines[0] == "mi,map"
        assert len(lines) == 2

    def test_bad_mi_list_usage_error(self, tmp_path, tiny_manifest):
        code = run(
            "sweep-mi", "--data", tiny_manifest, "--test-data", tiny_manifest,
            "--mi-list", "a,b", "--epochs", 1, "--lr", 0.005, "--seed", 0,
            "--out", tmp_path / "s.csv",
        )
        assert code == 2


class TestAnalyze:
    def test_artifacts_and_rerun_identical_excluding_timing(self, tmp_path, tiny_ckpt, tiny_manifest):
        dirs = []
        for tag in ("one", "two"):
            out_dir = tmp_path / tag
            assert run(
                "analyze", "--ckpt", tiny_ckpt, "--data", tiny_manifest,
                "--out-dir", out_dir, "--scenes", 20, "--heatmaps", 2,
            ) == 0
            dirs.append(out_dir)
        names = {p.name for p in dirs[0].iterdir()}
        assert "energy_hist_with_iff.csv" in names
        assert "energy_hist_without_iff.csv" in names
        assert "stability_report.csv" in names
        assert "heatmap_with_iff_000.pgm" in names
        assert "heatmap_without_iff_000.pgm" in names
        for name in sorted(names):
            if name == "timing.csv":
                continue  # wall-clock timings are exempt from determinism
            assert (dirs[0] / name).read_bytes() == (dirs[1] / name).read_bytes(), name

    def test_mi_zero_checkpoint_heatmaps_identical(self, tmp_path, tiny_manifest):
        ckpt = tmp_path / "open.ckpt"
        run("train", "--data", tiny_manifest, "--mi", 0, "--epochs", 1,
            "--lr", 0.005, "--seed", 0, "--out", ckpt)
        out_dir = tmp_path / "open_analysis"
        assert run("analyze", "--ckpt", ckpt, "--data", tiny_manifest,
                   "--out-dir", out_dir, "--scenes", 10, "--heatmaps", 1) == 0
        with_iff = (out_dir / "heatmap_with_iff_000.pgm").read_bytes()
        without = (out_dir / "heatmap_without_iff_000.pgm").read_bytes()
        assert with_iff == without


class TestEntryPoint:
    def test_console_script_smoke(self, tmp_path):
        import subprocess, sys

        out = tmp_path / "m.jsonl"
        proc = subprocess.run(
            [sys.executable, "-m", "fbdet.cli", "gen", "--count", "3",
             "--seed", "0", "--out", str(out)],
            capture_output=True, text=True,
        )
        assert proc.returncode == 0
        assert out.exists()
