"""MetaImage volumes, landmark text files, run manifests and CSV outputs."""

from __future__ import annotations

import csv
import os
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import yaml

from .chebyshev import BasisConfig
from .engine import HISTORY_COLUMNS, RegistrationConfig
from .losses import LossWeights
from .metrics import LandmarkSet
from .sampler import Volume

__all__ = [
    "OUTPUT_DIR_ENV",
    "ELEMENT_TYPES",
    "VolumeHeader",
    "RunManifest",
    "ManifestError",
    "read_header",
    "read_volume",
    "read_labels",
    "write_volume",
    "write_field",
    "read_field",
    "read_landmarks",
    "write_landmarks",
    "load_manifest",
    "write_history",
    "read_history",
]

OUTPUT_DIR_ENV = "KANREG_OUTPUT_DIR"

ELEMENT_TYPES = {
    "MET_UCHAR": np.dtype("<u1"),
    "MET_SHORT": np.dtype("<i2"),
    "MET_FLOAT": np.dtype("<f4"),
    "MET_DOUBLE": np.dtype("<f8"),
}
_TYPE_NAMES = {dt: name for name, dt in ELEMENT_TYPES.items()}


@dataclass
class VolumeHeader:
    dims: tuple[int, int, int]
    spacing: tuple[float, float, float]
    element_type: str
    data_file: str
    channels: int = 1
    byte_order_msb: bool = False

    @property
    def dtype(self) -> np.dtype:
        return ELEMENT_TYPES[self.element_type]

    @property
    def payload_bytes(self) -> int:
        return int(np.prod(self.dims)) * self.channels * self.dtype.itemsize


def _parse_ints(key, value, n):
    try:
        out = tuple(int(v) for v in value.split())
    except ValueError:
        raise ValueError(f"{key} must be integers, got {value!r}") from None
    if len(out) != n:
        raise ValueError(f"{key} needs {n} values, got {value!r}")
    return out


def read_header(path) -> VolumeHeader:
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(f"volume header not found: {path}")
    fields = {}
    for lineno, line in enumerate(path.read_text().splitlines(), 1):
        if not line.strip():
            continue
        if "=" not in line:
            raise ValueError(f"{path}:{lineno}: malformed header line {line!r}")
        key, value = (s.strip() for s in line.split("=", 1))
        fields[key] = value
    for key in ("NDims", "DimSize", "ElementType", "ElementDataFile"):
        if key not in fields:
            raise ValueError(f"{path}: header is missing {key}")
    if fields["NDims"] != "3":
        raise ValueError(f"{path}: only 3-D volumes are supported, NDims={fields['NDims']}")
    dims = _parse_ints("DimSize", fields["DimSize"], 3)
    spacing = fields.get("ElementSpacing", fields.get("ElementSize", "1 1 1"))
    try:
        spacing = tuple(float(v) for v in spacing.split())
    except ValueError:
        raise ValueError(f"{path}: ElementSpacing must be numeric, got {spacing!r}") from None
    if len(spacing) != 3:
        raise ValueError(f"{path}: ElementSpacing needs 3 values")
    etype = fields["ElementType"]
    if etype not in ELEMENT_TYPES:
        raise ValueError(f"{path}: unsupported ElementType {etype} (supported: {sorted(ELEMENT_TYPES)})")
    msb = fields.get("BinaryDataByteOrderMSB", fields.get("ElementByteOrderMSB", "False"))
    if msb.lower() == "true":
        raise ValueError(f"{path}: big-endian payloads are not supported")
    channels = int(fields.get("ElementNumberOfChannels", "1"))
    return VolumeHeader(dims, spacing, etype, fields["ElementDataFile"], channels)


def _read_payload(path: Path, header: VolumeHeader) -> np.ndarray:
    if header.data_file == "LOCAL":
        raise ValueError(f"{path}: embedded (LOCAL) payloads are not supported")
    raw = path.parent / header.data_file
    if not raw.exists():
        raise FileNotFoundError(f"payload file not found: {raw}")
    size = raw.stat().st_size
    if size != header.payload_bytes:
        raise ValueError(
            f"{raw}: payload holds {size} bytes, header declares {header.payload_bytes} "
            f"({header.dims} x {header.channels} x {header.dtype.itemsize})"
        )
    flat = np.fromfile(raw, dtype=header.dtype)
    # x varies fastest on disk, so the C-order array is indexed [z, y, x(, c)]
    shape = header.dims[::-1] + ((header.channels,) if header.channels > 1 else ())
    arr = flat.reshape(shape)
    axes = (2, 1, 0) + ((3,) if header.channels > 1 else ())
    return np.ascontiguousarray(arr.transpose(axes))


def read_volume(path) -> Volume:
    """Scalar volume indexed ``data[x, y, z]``; integer payloads become float64."""
    path = Path(path)
    header = read_header(path)
    if header.channels != 1:
        raise ValueError(f"{path}: expected a scalar volume, found {header.channels} channels")
    data = _read_payload(path, header)
    if header.element_type in ("MET_UCHAR", "MET_SHORT"):
        data = data.astype(np.float64)
    return Volume(data, header.spacing)


def read_labels(path) -> tuple[np.ndarray, tuple[float, float, float]]:
    """Integer label grid and spacing, kept in its stored integer type."""
    path = Path(path)
    header = read_header(path)
    data = _read_payload(path, header)
    if data.dtype.kind == "f":
        if not np.all(data == np.round(data)):
            raise ValueError(f"{path}: label volume holds non-integer values")
        data = data.astype(np.int64)
    if data.min() < 0:
        raise ValueError(f"{path}: labels must be non-negative")
    return data, header.spacing


def _write(path: Path, data: np.ndarray, spacing, channels: int):
    dtype = np.dtype(data.dtype).newbyteorder("<")
    if dtype not in _TYPE_NAMES:
        raise ValueError(f"cannot store element type {data.dtype}")
    path = Path(path)
    raw = path.with_suffix(".raw")
    dims = data.shape[:3]
    lines = [
        "ObjectType = Image",
        "NDims = 3",
        "BinaryData = True",
        "BinaryDataByteOrderMSB = False",
        f"DimSize = {dims[0]} {dims[1]} {dims[2]}",
        "ElementSpacing = " + " ".join(repr(float(s)) for s in spacing),
    ]
    if channels > 1:
        lines.append(f"ElementNumberOfChannels = {channels}")
    lines += [f"ElementType = {_TYPE_NAMES[dtype]}", f"ElementDataFile = {raw.name}"]
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text("\n".join(lines) + "\n")
    axes = (2, 1, 0) + ((3,) if channels > 1 else ())
    np.ascontiguousarray(data.transpose(axes), dtype=dtype).tofile(raw)


def write_volume(vol: Volume, path) -> None:
    """Header at ``path`` plus a little-endian payload next to it (same stem, .raw)."""
    _write(Path(path), vol.data, vol.spacing, 1)


def write_field(field: np.ndarray, path, spacing=(1.0, 1.0, 1.0)) -> None:
    """Displacement field dims + (3,) as a 3-channel volume."""
    field = np.asarray(field)
    if field.ndim != 4 or field.shape[-1] != 3:
        raise ValueError(f"field must have shape (X, Y, Z, 3), got {field.shape}")
    _write(Path(path), field, spacing, 3)


def read_field(path) -> tuple[np.ndarray, tuple[float, float, float]]:
    path = Path(path)
    header = read_header(path)
    if header.channels != 3:
        raise ValueError(f"{path}: a displacement field needs 3 channels, found {header.channels}")
    return _read_payload(path, header).astype(np.float64), header.spacing


def read_landmarks(path, spacing=(1.0, 1.0, 1.0)) -> LandmarkSet:
    """One ``x y z`` voxel triple per line; blank lines are skipped."""
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(f"landmark file not found: {path}")
    rows = []
    for lineno, line in enumerate(path.read_text().splitlines(), 1):
        tokens = line.split()
        if not tokens:
            continue
        if len(tokens) != 3:
            raise ValueError(f"{path}:{lineno}: expected 3 coordinates, got {len(tokens)}")
        try:
            rows.append([float(t) for t in tokens])
        except ValueError:
            raise ValueError(f"{path}:{lineno}: non-numeric coordinate in {line.strip()!r}") from None
    return LandmarkSet(np.array(rows, dtype=np.float64).reshape(-1, 3), tuple(spacing))


def write_landmarks(points, path) -> None:
    np.savetxt(Path(path), np.asarray(points, dtype=np.float64).reshape(-1, 3), fmt="%.6f")


def write_history(history: np.ndarray, path) -> None:
    """Loss history CSV with columns iteration, data, smooth, fold, total, lr."""
    with open(Path(path), "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(HISTORY_COLUMNS)
        for row in history:
            w.writerow([int(row[0])] + [repr(float(v)) for v in row[1:]])


def read_history(path) -> np.ndarray:
    with open(Path(path), newline="") as fh:
        rows = list(csv.reader(fh))
    if not rows or tuple(rows[0]) != HISTORY_COLUMNS:
        raise ValueError(f"{path}: not a loss history file")
    return np.array([[float(v) for v in r] for r in rows[1:]])


class ManifestError(ValueError):
    pass


_PATH_KEYS = ("fixed", "moving", "mask", "fixed_landmarks", "moving_landmarks", "fixed_labels", "moving_labels")
_CONFIG_KEYS = {
    "iterations": int,
    "batch_size": int,
    "base_lr": float,
    "constant_fraction": float,
    "precision": str,
    "chunk_size": int,
    "grad_clip": float,
}


@dataclass
class RunManifest:
    """Input paths, configuration overrides, seeds and the output directory."""

    paths: dict[str, Path]
    config: RegistrationConfig
    output_dir: Path
    seeds: tuple[int, ...] = (0,)
    extra: dict = field(default_factory=dict)


def _basis_from(doc) -> BasisConfig:
    if not isinstance(doc, dict) or "mode" not in doc:
        raise ManifestError("basis must be a mapping with a 'mode' key")
    mode = doc["mode"]
    try:
        if mode == "fixed":
            return BasisConfig.fixed(int(doc["D"]))
        if mode == "randomized":
            return BasisConfig.randomized(int(doc["k"]), int(doc["K"]))
        if mode == "adaptive":
            return BasisConfig.adaptive(int(doc["k"]), int(doc["K"]))
    except KeyError as exc:
        raise ManifestError(f"basis mode {mode!r} needs key {exc}") from None
    raise ManifestError(f"unknown basis mode {mode!r}")


def load_manifest(path, check_files: bool = True) -> RunManifest:
    """Parse a YAML run manifest; relative paths resolve against its directory.

    The output directory is taken from the ``KANREG_OUTPUT_DIR`` environment
    variable when set, otherwise from ``output_dir`` (default ``./output``).
    """
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(f"manifest not found: {path}")
    doc = yaml.safe_load(path.read_text()) or {}
    if not isinstance(doc, dict):
        raise ManifestError(f"{path}: manifest must be a mapping")
    base = path.parent
    paths_doc = doc.get("paths", {})
    unknown = set(paths_doc) - set(_PATH_KEYS)
    if unknown:
        raise ManifestError(f"unknown path keys {sorted(unknown)}")
    for key in ("fixed", "moving"):
        if key not in paths_doc:
            raise ManifestError(f"paths.{key} is required")
    paths = {k: (base / v) for k, v in paths_doc.items()}
    if check_files:
        for key, p in paths.items():
            if not p.exists():
                raise FileNotFoundError(f"{key} file not found: {p}")

    cfg_doc = dict(doc.get("config", {}))
    kw = {}
    for key, value in cfg_doc.items():
        if key in _CONFIG_KEYS:
            try:
                kw[key] = _CONFIG_KEYS[key](value)
            except (TypeError, ValueError):
                raise ManifestError(f"config.{key}: cannot convert {value!r}") from None
        elif key == "widths":
            kw["widths"] = tuple(int(w) for w in value)
        elif key == "basis":
            kw["basis"] = _basis_from(value)
        elif key == "weights":
            try:
                kw["weights"] = LossWeights(**{k: float(v) for k, v in value.items()})
            except TypeError as exc:
                raise ManifestError(f"config.weights: {exc}") from None
        else:
            raise ManifestError(f"unknown config key {key!r}")
    seeds = tuple(int(s) for s in doc.get("seeds", [0]))
    if not seeds:
        raise ManifestError("seeds must not be empty")
    kw["seeds"] = seeds
    try:
        cfg = RegistrationConfig(**kw)
    except ValueError as exc:
        raise ManifestError(str(exc)) from None
    env_out = os.environ.get(OUTPUT_DIR_ENV)
    if env_out:
        out = Path(env_out)
    else:
        out = Path(doc.get("output_dir", "output"))
        if not out.is_absolute():
            out = base / out
    extra = {k: v for k, v in doc.items() if k not in ("paths", "config", "seeds", "output_dir")}
    return RunManifest(paths, cfg, out, seeds, extra)
