import csv

import numpy as np
import pytest

from kanreg.cli import main
from kanreg.io import read_field, read_history, read_volume, write_volume
from kanreg.sampler import Volume

TINY = ["--synthetic", "12", "--iterations", "6", "--batch-size", "128", "--widths", "3-6-3"]


def _rows(path):
    with open(path, newline="") as fh:
        return list(csv.DictReader(fh))


class TestSelfcheck:
    def test_exit_zero(self, capsys):
        assert main(["selfcheck"]) == 0
        out = capsys.readouterr().out
        assert "FAIL" not in out and "checks passed" in out


class TestRegister:
    def test_synthetic_artifacts(self, tmp_path):
        assert main(["register", *TINY, "--seeds", "0,1", "-o", str(tmp_path)]) == 0
        for s in (0, 1):
            d = tmp_path / f"seed_{s}"
            assert len(read_history(d / "history.csv")) == 6
            field, _ = read_field(d / "field.mhd")
            assert field.shape == (12, 12, 12, 3)
            assert read_volume(d / "warped.mhd").dims == (12, 12, 12)
            assert (d / "model.kanr").exists()
        rows = _rows(tmp_path / "metrics.csv")
        assert [r["seed"] for r in rows] == ["0", "1", "mean", "std"]
        assert {"tre_mean", "recovery_error", "njd_mask", "njd_all"} <= set(rows[0])

    def test_rerun_overwrites_identically(self, tmp_path):
        main(["register", *TINY, "-o", str(tmp_path)])
        first = (tmp_path / "seed_0" / "history.csv").read_bytes()
        main(["register", *TINY, "-o", str(tmp_path)])
        assert (tmp_path / "seed_0" / "history.csv").read_bytes() == first

    def test_manifest(self, tmp_path):
        rng = np.random.default_rng(0)
        write_volume(Volume(rng.normal(size=(10, 10, 10))), tmp_path / "f.mhd")
        write_volume(Volume(rng.normal(size=(10, 10, 10))), tmp_path / "m.mhd")
        (tmp_path / "run.yaml").write_text(
            "paths: {fixed: f.mhd, moving: m.mhd}\n"
            "config: {iterations: 3, batch_size: 64, widths: [3, 4, 3], basis: {mode: fixed, D: 3}}\n"
            "output_dir: out\n"
        )
        assert main(["register", str(tmp_path / "run.yaml")]) == 0
        assert (tmp_path / "out" / "seed_0" / "model.kanr").exists()

    def test_missing_fixed_path(self, tmp_path, capsys):
        write_volume(Volume(np.zeros((4, 4, 4))), tmp_path / "m.mhd")
        (tmp_path / "run.yaml").write_text("paths: {fixed: missing_fixed.mhd, moving: m.mhd}\n")
        assert main(["register", str(tmp_path / "run.yaml")]) != 0
        assert "missing_fixed.mhd" in capsys.readouterr().err

    def test_unknown_subcommand(self, capsys):
        with pytest.raises(SystemExit) as info:
            main(["frobnicate"])
        assert info.value.code != 0
        assert "usage" in capsys.readouterr().err


@pytest.fixture(scope="module")
def trained(tmp_path_factory):
    out = tmp_path_factory.mktemp("run")
    assert main(["register", *TINY, "-o", str(out)]) == 0
    return out


class TestEvaluateAndWarp:
    def test_evaluate_field_and_checkpoint_agree(self, trained, tmp_path):
        d = trained / "seed_0"
        a, b = tmp_path / "a", tmp_path / "b"
        assert main(["evaluate", "--fixed", str(d / "warped.mhd"), "--field", str(d / "field.mhd"), "-o", str(a)]) == 0
        assert main(["evaluate", "--fixed", str(d / "warped.mhd"), "--checkpoint", str(d / "model.kanr"), "-o", str(b)]) == 0
        assert _rows(a / "evaluation.csv")[0]["njd_all"] == _rows(b / "evaluation.csv")[0]["njd_all"]

    def test_warp_matches_exported(self, trained, tmp_path):
        d = trained / "seed_0"
        vol = Volume(np.random.default_rng(1).normal(size=(12, 12, 12)))
        write_volume(vol, tmp_path / "v.mhd")
        for interp in ("trilinear", "nearest"):
            out = tmp_path / f"w_{interp}.mhd"
            assert main(["warp", "--checkpoint", str(d / "model.kanr"), "--volume", str(tmp_path / "v.mhd"),
                         "--output", str(out), "--interp", interp]) == 0
            assert read_volume(out).dims == (12, 12, 12)


class TestSweep:
    def test_degree_sweep(self, tmp_path):
        assert main(["sweep", *TINY, "--seeds", "0,1", "--param", "D", "--values", "2,4,6", "-o", str(tmp_path)]) == 0
        rows = _rows(tmp_path / "sweep.csv")
        assert len(rows) == 3 * 2
        assert [r["basis"] for r in rows[::2]] == ["KAN(D=2)", "KAN(D=4)", "KAN(D=6)"]
        summary = _rows(tmp_path / "sweep_summary.csv")
        assert len(summary) == 3 and "recovery_error_mean" in summary[0]

    def test_kk_sweep(self, tmp_path):
        assert main(["sweep", *TINY, "--param", "kK", "--values", "2:8,3:12", "-o", str(tmp_path)]) == 0
        assert [r["basis"] for r in _rows(tmp_path / "sweep.csv")] == ["RandKAN(k=2,K=8)", "RandKAN(k=3,K=12)"]

    def test_lambda_sweep(self, tmp_path):
        assert main(["sweep", *TINY, "--param", "lambda", "--values", "0,0.4", "-o", str(tmp_path)]) == 0
        assert len(_rows(tmp_path / "sweep_summary.csv")) == 2
