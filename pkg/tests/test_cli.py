"""Command-line behavior: exit codes, artifacts, manifests, determinism.

Training-heavy subcommands run here with tiny budgets via a config file; the
full-budget pipeline lives in the acceptance suite.
"""

import os

import numpy as np
import pytest

from dualmark import imageio
from dualmark.cli import main
from dualmark.config import DEFAULTS, RunConfig
from dualmark.errors import RejectedInput


TINY = {
    "diffusion.steps": 40,
    "diffusion.hidden": 8,
    "wdp.steps": 20,
    "imagewm.extractor_steps": 60,
    "imagewm.decoder_steps": 30,
    "imagewm.autoencoder_steps": 60,
    "imagewm.k": 16,
    "data.n_train": 8,
    "data.n_heldout": 12,
    "transform.budget": 8,
}


def write_config(path, overrides=None):
    cfg = RunConfig({**TINY, **(overrides or {})})
    cfg.save(path)
    return path


@pytest.fixture
def run_dir(tmp_path):
    cfgpath = tmp_path / "tiny.cfg"
    write_config(cfgpath)
    return tmp_path, str(cfgpath)


def invoke(tmp_path, cfgpath, *argv):
    out = str(tmp_path / "run")
    return main(["--out", out, "--config", cfgpath, *argv])


class TestUsage:
    def test_unknown_command_exits_2(self, capsys):
        assert main(["definitely-not-a-command"]) == 2

    def test_missing_required_flag_exits_2(self):
        assert main(["attack"]) == 2

    def test_component_error_exits_1(self, tmp_path, run_dir):
        tmp, cfg = run_dir
        # extract before anything exists
        assert invoke(tmp, cfg, "extract-model-wm") == 1

    def test_bad_attack_spec_exits_1(self, tmp_path, run_dir):
        tmp, cfg = run_dir
        assert invoke(tmp, cfg, "synth-data") == 0
        assert main(["--out", str(tmp / "run"), "--config", cfg, "attack",
                     "--images", str(tmp / "run" / "data"),
                     "--spec", "rotation:999"]) == 1


class TestArtifacts:
    def test_synth_data_writes_pgms_and_manifest(self, run_dir):
        tmp, cfg = run_dir
        assert invoke(tmp, cfg, "synth-data") == 0
        data = tmp / "run" / "data"
        files = sorted(os.listdir(data))
        assert len(files) == 20
        img = imageio.read_pgm(data / files[0])
        assert img.shape == (16, 16)
        manifest = (tmp / "run" / "manifest.txt").read_text()
        assert manifest.startswith("synth-data\t")
        assert "out=" in manifest

    def test_stats_on_identical_directories_gives_zero_difference(self, run_dir):
        tmp, cfg = run_dir
        invoke(tmp, cfg, "synth-data")
        data = str(tmp / "run" / "data")
        assert main(["--out", str(tmp / "run"), "--config", cfg, "stats",
                     "--images", data, "--clean", data]) == 0
        lines = (tmp / "run" / "reports" / "stats_comparison.csv").read_text().splitlines()
        assert lines[0].split(",")[0] == "row"
        diff = lines[3].split(",")
        assert diff[0] == "Difference"
        assert all(float(v) == 0.0 for v in diff[1:])

    def test_attack_command_writes_images(self, run_dir):
        tmp, cfg = run_dir
        invoke(tmp, cfg, "synth-data")
        assert main(["--out", str(tmp / "run"), "--config", cfg, "attack",
                     "--images", str(tmp / "run" / "data"),
                     "--spec", "flip:h"]) == 0
        outdir = tmp / "run" / "attacked" / "flip_h"
        assert len(os.listdir(outdir)) == 20
        orig = imageio.read_pgm(tmp / "run" / "data" / "train_000.pgm")
        flipped = imageio.read_pgm(outdir / "train_000.pgm")
        assert np.array_equal(flipped, orig[:, ::-1])

    def test_optimize_transform_writes_params_and_trace(self, run_dir):
        tmp, cfg = run_dir
        assert invoke(tmp, cfg, "optimize-transform") == 0
        params = (tmp / "run" / "wm" / "transform_params.txt").read_text().split()
        assert len(params) == 6 + 2  # affine + gain/offset for one channel
        trace_lines = (tmp / "run" / "traces" / "transform_trace.csv").read_text().splitlines()
        vals = [float(line.split(",")[1]) for line in trace_lines[1:]]
        assert all(b <= a + 1e-12 for a, b in zip(vals, vals[1:]))


class TestPipelineSmall:
    def test_model_watermark_commands_chain(self, run_dir):
        tmp, cfg = run_dir
        for cmd in ("synth-data", "train-diffusion", "embed-model-wm",
                    "extract-model-wm"):
            assert invoke(tmp, cfg, cmd) == 0, cmd
        verdict = (tmp / "run" / "reports" / "model_wm_verdict.csv").read_text().splitlines()
        header = verdict[0].split(",")
        assert header == ["run_id", "key_id", "matched", "total", "accuracy", "accepted"]
        row = verdict[1].split(",")
        assert int(row[3]) == 256
        assert (tmp / "run" / "wm" / "extracted.pgm").exists()
        assert (tmp / "run" / "keys" / "key.dmkey").exists()

    def test_image_watermark_commands_chain(self, run_dir):
        tmp, cfg = run_dir
        for cmd in ("synth-data", "train-extractor", "finetune-decoder",
                    "evaluate", "report"):
            assert invoke(tmp, cfg, cmd) == 0, cmd
        report = (tmp / "run" / "reports" / "report.csv").read_text().splitlines()
        header = report[0].split(",")
        assert header[0] == "metric"
        assert len(header) == 1 + 7  # seven attack columns
        assert report[1].split(",")[0] == "presence_rate"
        assert report[2].split(",")[0] == "classification_accuracy"
        assert (tmp / "run" / "reports" / "per_image.jsonl").exists()
        quality = (tmp / "run" / "reports" / "quality.csv").read_text().splitlines()
        assert quality[0] == "method,toy_is,toy_fid"
        flags = (tmp / "run" / "reports" / "flags.txt").read_text()
        assert "attack_grid=" in flags

    def test_embed_and_extract_image_wm(self, run_dir):
        tmp, cfg = run_dir
        invoke(tmp, cfg, "synth-data")
        invoke(tmp, cfg, "train-extractor")
        assert main(["--out", str(tmp / "run"), "--config", cfg, "embed-image-wm",
                     "--message", "origin tag"]) == 0
        assert main(["--out", str(tmp / "run"), "--config", cfg,
                     "extract-image-wm",
                     "--images", str(tmp / "run" / "wm" / "embedded")]) == 0
        rows = (tmp / "run" / "reports" / "extract_bits.csv").read_text().splitlines()
        assert rows[0].split(",")[:2] == ["file", "bits_hex"]
        assert len(rows) == 21

    def test_generate_writes_samples(self, run_dir):
        tmp, cfg = run_dir
        invoke(tmp, cfg, "synth-data")
        invoke(tmp, cfg, "train-diffusion")
        assert main(["--out", str(tmp / "run"), "--config", cfg, "generate",
                     "--n", "2"]) == 0
        assert len(os.listdir(tmp / "run" / "gen")) == 2


class TestDeterminism:
    def test_rerun_reproduces_artifacts_byte_identically(self, tmp_path):
        cfgpath = str(tmp_path / "tiny.cfg")
        write_config(cfgpath)

        def run_all(out):
            for cmd in ("synth-data", "train-diffusion", "embed-model-wm",
                        "extract-model-wm"):
                assert main(["--out", out, "--config", cfgpath, cmd]) == 0

        run_all(str(tmp_path / "a"))
        run_all(str(tmp_path / "b"))
        for rel in ("data/train_000.pgm", "models/diffusion.dmwm",
                    "models/diffusion_wm.dmwm", "keys/key.dmkey",
                    "wm/extracted.pgm", "reports/model_wm_verdict.csv",
                    "traces/diffusion_loss.csv", "manifest.txt"):
            a = (tmp_path / "a" / rel).read_bytes()
            b = (tmp_path / "b" / rel).read_bytes()
            assert a == b, f"{rel} differs between reruns"


class TestConfig:
    def test_canonical_round_trip_and_hash_stability(self, tmp_path):
        cfg = RunConfig({"run.seed": 7, "wdp.gamma_kappa": 0.55})
        path = tmp_path / "c.cfg"
        cfg.save(path)
        loaded = RunConfig.load(path)
        assert loaded.values == cfg.values
        assert loaded.config_hash() == cfg.config_hash()

    def test_unknown_key_rejected(self):
        with pytest.raises(RejectedInput):
            RunConfig({"nope.key": 1})

    def test_env_override(self, monkeypatch):
        monkeypatch.setenv("DMWM_WDP__GAMMA_KAPPA", "0.41")
        cfg = RunConfig()
        assert cfg["wdp.gamma_kappa"] == 0.41

    def test_defaults_cover_every_section(self):
        sections = {k.split(".")[0] for k in DEFAULTS}
        assert {"run", "schedule", "data", "diffusion", "wdp", "imagewm",
                "transform", "detect", "attack"} <= sections


class TestImageIo:
    def test_pgm_round_trip_is_bit_exact(self, tmp_path, rng):
        img = np.round(rng.uniform((12, 10)) * 255) / 255.0
        p = tmp_path / "img.pgm"
        imageio.write_pgm(p, img)
        back = imageio.read_pgm(p)
        assert np.array_equal(back, img)
        imageio.write_pgm(tmp_path / "img2.pgm", back)
        assert (tmp_path / "img2.pgm").read_bytes() == p.read_bytes()

    def test_ppm_round_trip(self, tmp_path, rng):
        img = np.round(rng.uniform((3, 6, 7)) * 255) / 255.0
        p = tmp_path / "img.ppm"
        imageio.write_ppm(p, img)
        assert np.array_equal(imageio.read_ppm(p), img)

    def test_bad_magic_rejected(self, tmp_path):
        p = tmp_path / "bad.pgm"
        p.write_bytes(b"P3\n2 2\n255\n....")
        with pytest.raises(RejectedInput):
            imageio.read_pgm(p)
