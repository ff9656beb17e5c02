import numpy as np
import pytest

from kanreg.chebyshev import BasisConfig
from kanreg.io import (
    OUTPUT_DIR_ENV,
    ManifestError,
    load_manifest,
    read_field,
    read_header,
    read_history,
    read_labels,
    read_landmarks,
    read_volume,
    write_field,
    write_history,
    write_landmarks,
    write_volume,
)
from kanreg.sampler import Volume


def _header(path, dims="4 4 4", etype="MET_DOUBLE", extra=""):
    path.write_text(
        f"ObjectType = Image\nNDims = 3\nDimSize = {dims}\nElementSpacing = 1 1 1\n"
        f"ElementType = {etype}\n{extra}ElementDataFile = {path.stem}.raw\n"
    )
    return path


class TestVolumes:
    def test_roundtrip_bitwise(self, tmp_path):
        vol = Volume(np.random.default_rng(0).normal(size=(8, 8, 8)), (0.5, 1.0, 2.5))
        write_volume(vol, tmp_path / "v.mhd")
        back = read_volume(tmp_path / "v.mhd")
        assert np.array_equal(back.data, vol.data)
        assert back.spacing == vol.spacing

    def test_axis_order_on_disk(self, tmp_path):
        # x varies fastest in the payload
        data = np.arange(24, dtype=np.float64).reshape(2, 3, 4)
        write_volume(Volume(data), tmp_path / "v.mhd")
        flat = np.fromfile(tmp_path / "v.raw", dtype="<f8")
        assert flat[1] == data[1, 0, 0]
        assert read_header(tmp_path / "v.mhd").dims == (2, 3, 4)

    def test_size_mismatch(self, tmp_path):
        h = _header(tmp_path / "bad.mhd")
        np.zeros(63).astype("<f8").tofile(tmp_path / "bad.raw")
        with pytest.raises(ValueError, match="63|504"):
            read_volume(h)

    def test_int16_promoted_exactly(self, tmp_path):
        vals = np.random.default_rng(1).integers(-32768, 32767, 64).astype("<i2")
        vals.tofile(tmp_path / "s.raw")
        vol = read_volume(_header(tmp_path / "s.mhd", etype="MET_SHORT"))
        assert vol.data.dtype == np.float64
        assert np.array_equal(vol.data.transpose(2, 1, 0).reshape(-1), vals.astype(np.float64))

    def test_uint8(self, tmp_path):
        np.arange(64, dtype=np.uint8).tofile(tmp_path / "u.raw")
        assert read_volume(_header(tmp_path / "u.mhd", etype="MET_UCHAR")).data.max() == 63.0

    def test_unsupported_type(self, tmp_path):
        with pytest.raises(ValueError, match="ElementType"):
            read_header(_header(tmp_path / "x.mhd", etype="MET_LONG"))

    def test_malformed_line(self, tmp_path):
        p = tmp_path / "m.mhd"
        p.write_text("NDims = 3\nthis is not a header line\n")
        with pytest.raises(ValueError, match=":2:"):
            read_header(p)

    def test_missing_key(self, tmp_path):
        p = tmp_path / "m.mhd"
        p.write_text("NDims = 3\nElementType = MET_DOUBLE\n")
        with pytest.raises(ValueError, match="DimSize"):
            read_header(p)

    def test_two_dimensional(self, tmp_path):
        p = tmp_path / "m.mhd"
        p.write_text("NDims = 2\nDimSize = 4 4\nElementSpacing = 1 1\nElementType = MET_DOUBLE\nElementDataFile = m.raw\n")
        with pytest.raises(ValueError, match="3-D"):
            read_header(p)

    def test_big_endian_rejected(self, tmp_path):
        with pytest.raises(ValueError, match="big-endian"):
            read_header(_header(tmp_path / "b.mhd", extra="BinaryDataByteOrderMSB = True\n"))

    def test_missing_payload(self, tmp_path):
        with pytest.raises(FileNotFoundError):
            read_volume(_header(tmp_path / "n.mhd"))

    def test_field_roundtrip(self, tmp_path):
        field = np.random.default_rng(2).normal(size=(5, 4, 3, 3))
        write_field(field, tmp_path / "f.mhd", (1, 2, 3))
        back, spacing = read_field(tmp_path / "f.mhd")
        assert np.array_equal(back, field) and spacing == (1, 2, 3)
        with pytest.raises(ValueError):
            read_volume(tmp_path / "f.mhd")

    def test_labels(self, tmp_path):
        labels = np.random.default_rng(3).integers(0, 4, (4, 4, 4)).astype(np.uint8)
        write_volume(Volume(labels), tmp_path / "l.mhd")
        back, _ = read_labels(tmp_path / "l.mhd")
        assert np.array_equal(back, labels)

    def test_fractional_labels_rejected(self, tmp_path):
        write_volume(Volume(np.full((2, 2, 2), 0.5)), tmp_path / "l.mhd")
        with pytest.raises(ValueError):
            read_labels(tmp_path / "l.mhd")


class TestLandmarks:
    def test_two_lines(self, tmp_path):
        p = tmp_path / "lm.txt"
        p.write_text("10 20 5\n11 21 6\n")
        lms = read_landmarks(p)
        assert len(lms) == 2
        assert np.array_equal(lms.points[1], [11, 21, 6])

    def test_empty_file(self, tmp_path):
        p = tmp_path / "lm.txt"
        p.write_text("")
        assert len(read_landmarks(p)) == 0

    def test_wrong_arity_names_line(self, tmp_path):
        p = tmp_path / "lm.txt"
        p.write_text("1 2 3\n4 5\n")
        with pytest.raises(ValueError, match=":2:"):
            read_landmarks(p)

    def test_non_numeric(self, tmp_path):
        p = tmp_path / "lm.txt"
        p.write_text("1 2 x\n")
        with pytest.raises(ValueError, match=":1:"):
            read_landmarks(p)

    def test_roundtrip(self, tmp_path):
        pts = np.random.default_rng(4).uniform(0, 50, (300, 3)).round(3)
        write_landmarks(pts, tmp_path / "lm.txt")
        assert np.allclose(read_landmarks(tmp_path / "lm.txt").points, pts)


class TestHistory:
    def test_roundtrip_exact(self, tmp_path):
        h = np.column_stack([np.arange(5), np.random.default_rng(5).normal(size=(5, 5))])
        write_history(h, tmp_path / "h.csv")
        assert np.array_equal(read_history(tmp_path / "h.csv"), h)

    def test_wrong_header(self, tmp_path):
        (tmp_path / "h.csv").write_text("a,b\n1,2\n")
        with pytest.raises(ValueError):
            read_history(tmp_path / "h.csv")


class TestManifest:
    def _files(self, tmp_path):
        for name in ("f", "m"):
            write_volume(Volume(np.zeros((4, 4, 4))), tmp_path / f"{name}.mhd")

    def test_full(self, tmp_path, monkeypatch):
        monkeypatch.delenv(OUTPUT_DIR_ENV, raising=False)
        self._files(tmp_path)
        (tmp_path / "run.yaml").write_text(
            "paths: {fixed: f.mhd, moving: m.mhd}\n"
            "config:\n  iterations: 20\n  widths: [3, 8, 3]\n"
            "  basis: {mode: fixed, D: 6}\n  weights: {lam: 0.1, gamma: 5}\n"
            "seeds: [1, 2]\noutput_dir: out\n"
        )
        man = load_manifest(tmp_path / "run.yaml")
        assert man.config.iterations == 20
        assert man.config.basis == BasisConfig.fixed(6)
        assert man.config.weights.lam == 0.1 and man.config.weights.gamma == 5.0
        assert man.seeds == (1, 2)
        assert man.output_dir == tmp_path / "out"
        assert man.paths["fixed"] == tmp_path / "f.mhd"

    def test_defaults(self, tmp_path, monkeypatch):
        monkeypatch.delenv(OUTPUT_DIR_ENV, raising=False)
        self._files(tmp_path)
        (tmp_path / "run.yaml").write_text("paths: {fixed: f.mhd, moving: m.mhd}\n")
        man = load_manifest(tmp_path / "run.yaml")
        assert man.config.basis == BasisConfig.randomized(12, 84)
        assert man.config.widths == (3, 70, 70, 3)
        assert man.config.batch_size == 10000 and man.config.base_lr == 1e-4

    def test_env_override(self, tmp_path, monkeypatch):
        self._files(tmp_path)
        (tmp_path / "run.yaml").write_text("paths: {fixed: f.mhd, moving: m.mhd}\noutput_dir: out\n")
        monkeypatch.setenv(OUTPUT_DIR_ENV, str(tmp_path / "elsewhere"))
        assert load_manifest(tmp_path / "run.yaml").output_dir == tmp_path / "elsewhere"

    def test_missing_file_named(self, tmp_path):
        write_volume(Volume(np.zeros((4, 4, 4))), tmp_path / "f.mhd")
        (tmp_path / "run.yaml").write_text("paths: {fixed: f.mhd, moving: nope.mhd}\n")
        with pytest.raises(FileNotFoundError, match="nope.mhd"):
            load_manifest(tmp_path / "run.yaml")

    @pytest.mark.parametrize(
        "body",
        [
            "paths: {fixed: f.mhd}\n",
            "paths: {fixed: f.mhd, moving: m.mhd, extra: x}\n",
            "paths: {fixed: f.mhd, moving: m.mhd}\nconfig: {iterations: many}\n",
            "paths: {fixed: f.mhd, moving: m.mhd}\nconfig: {colour: red}\n",
            "paths: {fixed: f.mhd, moving: m.mhd}\nconfig: {basis: {mode: fixed}}\n",
            "paths: {fixed: f.mhd, moving: m.mhd}\nconfig: {precision: float16}\n",
            "paths: {fixed: f.mhd, moving: m.mhd}\nseeds: []\n",
        ],
    )
    def test_schema_errors(self, tmp_path, body):
        self._files(tmp_path)
        (tmp_path / "run.yaml").write_text(body)
        with pytest.raises(ManifestError):
            load_manifest(tmp_path / "run.yaml")
