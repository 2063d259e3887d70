"""Command-line behaviour: exit codes, file outputs, determinism.

main() is called in-process; a single slow subprocess test covers the
`python -m` entry point.
"""

import subprocess
import sys

import numpy as np
import pytest

from lag.cli import main
from lag.engine import PRIMITIVE_KINDS
from lag.imaging import make_toy_dataset, read_image, write_image
from lag.trainer import checkpoint_path

CFG_TEXT = """\
y_size = 4
x_size = 16
width = 8
blocks = 1
latent_n = 4
latent_p = 8
batch = 2
toy_count = 4
total_steps = 4
fade_steps = 1
hold_steps = 1
checkpoint_every = 0
"""


@pytest.fixture(scope="module")
def trained(tmp_path_factory):
    """One tiny trained run shared by the read-only commands."""
    root = tmp_path_factory.mktemp("clirun")
    cfg = root / "toy.cfg"
    cfg.write_text(CFG_TEXT + f"out = {root / 'out'}\n")
    assert main(["train", "--config", str(cfg)]) == 0
    return {"root": root, "cfg": cfg,
            "ckpt": checkpoint_path(str(root / "out"), 4)}


def _tile(grid, row, col, size=16):
    return grid[:, row * size:(row + 1) * size, col * size:(col + 1) * size]


class TestTrain:
    def test_writes_metrics_and_checkpoint(self, trained):
        metrics = (trained["root"] / "out" / "metrics.tsv").read_text()
        assert len(metrics.splitlines()) == 4
        assert (trained["root"] / "out" / "checkpoint_0000004.lagc").exists()

    def test_rerun_is_byte_identical(self, trained, tmp_path):
        cfg = tmp_path / "again.cfg"
        cfg.write_text(CFG_TEXT + f"out = {tmp_path / 'out'}\n")
        assert main(["train", "--config", str(cfg)]) == 0
        a = (trained["root"] / "out" / "metrics.tsv").read_bytes()
        b = (tmp_path / "out" / "metrics.tsv").read_bytes()
        assert a == b

    def test_needs_config_or_resume(self):
        assert main(["train"]) == 1

    def test_unknown_config_key(self, tmp_path):
        cfg = tmp_path / "bad.cfg"
        cfg.write_text("no_such_key = 1\n")
        assert main(["train", "--config", str(cfg)]) == 1

    def test_bad_set_override(self, trained):
        assert main(["train", "--config", str(trained["cfg"]),
                     "--set", "wdith=8"]) == 1

    def test_resume_flag(self, trained, tmp_path):
        out = tmp_path / "resumed"
        code = main(["train", "--resume", trained["ckpt"],
                     "--set", "total_steps=6", "--set", f"out={out}"])
        assert code == 0
        assert (out / "metrics.tsv").read_text().count("\n") == 2

    def test_missing_dataset_dir(self, tmp_path):
        cfg = tmp_path / "d.cfg"
        cfg.write_text(CFG_TEXT + f"out = {tmp_path}\ntoy = false\n"
                                  "dataset = /nonexistent\n")
        assert main(["train", "--config", str(cfg)]) == 3


class TestSample:
    def test_grid_layout(self, trained, tmp_path):
        out = tmp_path / "g.ppm"
        assert main(["sample", "--checkpoint", trained["ckpt"], "--out",
                     str(out), "--indices", "0,1", "-k", "2"]) == 0
        grid = read_image(out)
        assert grid.shape == (1, 3, 2 * 16, (3 + 2) * 16)

    def test_k_zero_gives_three_columns(self, trained, tmp_path):
        out = tmp_path / "g.ppm"
        assert main(["sample", "--checkpoint", trained["ckpt"], "--out",
                     str(out), "-k", "0"]) == 0
        assert read_image(out).shape == (1, 3, 16, 3 * 16)

    def test_rerun_byte_identical(self, trained, tmp_path):
        args = ["sample", "--checkpoint", trained["ckpt"], "-k", "2",
                "--seed", "11"]
        a, b = tmp_path / "a.ppm", tmp_path / "b.ppm"
        assert main(args + ["--out", str(a)]) == 0
        assert main(args + ["--out", str(b)]) == 0
        assert a.read_bytes() == b.read_bytes()

    def test_external_input_files(self, trained, tmp_path):
        img = make_toy_dataset(1, 16, seed=9).data[0]
        p = tmp_path / "in.ppm"
        write_image(p, img)
        out = tmp_path / "g.ppm"
        assert main(["sample", "--checkpoint", trained["ckpt"], "--out",
                     str(out), "--inputs", str(p), "-k", "1"]) == 0
        grid = read_image(out)
        assert grid.shape == (1, 3, 16, 4 * 16)
        # first column is the input itself, byte-for-byte
        np.testing.assert_array_equal(_tile(grid.data[0], 0, 0),
                                      read_image(p).data[0])

    def test_resolution_mismatch(self, trained, tmp_path):
        p = tmp_path / "small.ppm"
        write_image(p, np.zeros((3, 8, 8)))
        assert main(["sample", "--checkpoint", trained["ckpt"], "--out",
                     str(tmp_path / "g.ppm"), "--inputs", str(p)]) == 1

    def test_index_out_of_range(self, trained, tmp_path):
        assert main(["sample", "--checkpoint", trained["ckpt"], "--out",
                     str(tmp_path / "g.ppm"), "--indices", "99"]) == 1

    def test_missing_checkpoint_is_io_error(self, tmp_path):
        assert main(["sample", "--checkpoint", str(tmp_path / "none.lagc"),
                     "--out", str(tmp_path / "g.ppm")]) == 3

    def test_malformed_input_is_io_error(self, trained, tmp_path):
        p = tmp_path / "bad.ppm"
        p.write_bytes(b"P6\n not an image")
        assert main(["sample", "--checkpoint", trained["ckpt"], "--out",
                     str(tmp_path / "g.ppm"), "--inputs", str(p)]) == 3


class TestMirror:
    def test_grid_layout(self, trained, tmp_path):
        out = tmp_path / "m.ppm"
        assert main(["mirror", "--checkpoint", trained["ckpt"], "--out",
                     str(out), "--steps", "5"]) == 0
        assert read_image(out).shape == (1, 3, 2 * 16, 5 * 16)

    def test_symmetric_input_is_constant_across_steps(self, trained, tmp_path):
        base = make_toy_dataset(1, 16, seed=3).data[0]
        sym = np.clip(0.5 * (base + base[:, :, ::-1]), -1, 1)
        p = tmp_path / "sym.ppm"
        write_image(p, sym)
        out = tmp_path / "m.ppm"
        assert main(["mirror", "--checkpoint", trained["ckpt"], "--out",
                     str(out), "--inputs", str(p), "--steps", "4"]) == 0
        grid = read_image(out).data[0]
        for col in range(1, 4):
            np.testing.assert_array_equal(_tile(grid, 1, col),
                                          _tile(grid, 1, 0))

    def test_steps_validation(self, trained, tmp_path):
        assert main(["mirror", "--checkpoint", trained["ckpt"], "--out",
                     str(tmp_path / "m.ppm"), "--steps", "1"]) == 1


class TestNoise:
    def test_zero_amplitude_reproduces_sample_center(self, trained, tmp_path):
        s, n = tmp_path / "s.ppm", tmp_path / "n.ppm"
        assert main(["sample", "--checkpoint", trained["ckpt"], "--out",
                     str(s), "--indices", "0", "-k", "0"]) == 0
        assert main(["noise", "--checkpoint", trained["ckpt"], "--out",
                     str(n), "--indices", "0", "--amplitudes", "0"]) == 0
        sample_center = _tile(read_image(s).data[0], 0, 2)
        noise_out = _tile(read_image(n).data[0], 1, 0)
        np.testing.assert_array_equal(noise_out, sample_center)

    def test_grid_layout(self, trained, tmp_path):
        out = tmp_path / "n.ppm"
        assert main(["noise", "--checkpoint", trained["ckpt"], "--out",
                     str(out), "--amplitudes", "0,0.2,0.8"]) == 0
        assert read_image(out).shape == (1, 3, 2 * 16, 3 * 16)

    def test_decreasing_amplitudes_rejected(self, trained, tmp_path):
        assert main(["noise", "--checkpoint", trained["ckpt"], "--out",
                     str(tmp_path / "n.ppm"), "--amplitudes", "0.4,0.1"]) == 1

    def test_pure_noise_output_in_range(self, trained, tmp_path):
        p = tmp_path / "zero.ppm"
        write_image(p, np.zeros((3, 16, 16)))
        out = tmp_path / "n.ppm"
        assert main(["noise", "--checkpoint", trained["ckpt"], "--out",
                     str(out), "--inputs", str(p), "--amplitudes", "2.0"]) == 0
        grid = read_image(out)
        assert grid.data.min() >= -1.0 and grid.data.max() <= 1.0


class TestDiversity:
    def test_single_sample_has_zero_diversity(self, trained, capsys):
        assert main(["diversity", "--checkpoint", "4=" + trained["ckpt"],
                     "--indices", "0,1", "-k", "1"]) == 0
        out = capsys.readouterr().out.splitlines()
        assert out[0] == "factor\tmedian_diversity"
        factor, med = out[1].split("\t")
        assert factor == "4" and float(med) == 0.0

    def test_per_input_report(self, trained, tmp_path, capsys):
        per = tmp_path / "per.tsv"
        assert main(["diversity", "--checkpoint", "4=" + trained["ckpt"],
                     "--indices", "0,1,2", "-k", "3",
                     "--per-input", str(per)]) == 0
        lines = per.read_text().splitlines()
        assert lines[0] == "factor\tinput\tdiversity"
        assert len(lines) == 4
        assert all(float(l.split("\t")[2]) >= 0 for l in lines[1:])

    def test_factor_label_mismatch(self, trained):
        assert main(["diversity", "--checkpoint", "8=" + trained["ckpt"],
                     "--indices", "0"]) == 1

    def test_malformed_checkpoint_spec(self, trained):
        assert main(["diversity", "--checkpoint", trained["ckpt"],
                     "--indices", "0"]) == 1


class TestGradcheck:
    def test_clean_run_passes(self, capsys):
        assert main(["gradcheck", "--seed", "1"]) == 0
        out = capsys.readouterr().out
        for kind in PRIMITIVE_KINDS:
            assert out.count(f"{kind:<14s}") == 1, kind
        assert "FAIL" not in out

    def test_corrupted_adjoint_detected(self, capsys):
        assert main(["gradcheck", "--corrupt", "mul"]) == 2
        assert "FAIL" in capsys.readouterr().out


class TestParsing:
    def test_unknown_subcommand(self):
        assert main(["frobnicate"]) == 1

    def test_module_entry_point(self, tmp_path):
        # one subprocess round-trip through python -m
        r = subprocess.run(
            [sys.executable, "-m", "lag", "train"],
            capture_output=True, text=True)
        assert r.returncode == 1
        assert "config" in r.stderr
