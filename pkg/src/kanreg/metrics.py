"""Registration quality metrics: TRE, Dice, HD95 and Jacobian-determinant folding."""

from __future__ import annotations

import csv
import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy.spatial import cKDTree

from .network import KanModel, model_forward
from .sampler import half_extent, voxel_to_normalized

__all__ = [
    "LandmarkSet",
    "TreResult",
    "MetricsReport",
    "tre",
    "threshold_table",
    "dice",
    "boundary_voxels",
    "hd95",
    "jacobian_map",
    "njd",
    "map_points",
]


@dataclass
class LandmarkSet:
    """Voxel-index landmark positions; row order defines the pairing."""

    points: np.ndarray
    spacing: tuple[float, float, float] = (1.0, 1.0, 1.0)

    def __post_init__(self):
        self.points = np.asarray(self.points, dtype=np.float64).reshape(-1, 3)

    def __len__(self):
        return len(self.points)


@dataclass
class TreResult:
    mean: float
    std: float
    errors: np.ndarray

    def __str__(self):
        return f"{self.mean:.2f} ({self.std:.2f})"


def map_points(model: KanModel, vox, dims) -> np.ndarray:
    """Voxel positions x + U(x) of fixed-space voxel coordinates."""
    vox = np.asarray(vox, dtype=np.float64).reshape(-1, 3)
    pts = voxel_to_normalized(vox, dims).astype(model.dtype)
    u = np.asarray(model_forward(model, pts), dtype=np.float64)
    return vox + u * half_extent(dims)


def tre(fixed_lms: LandmarkSet, moving_lms: LandmarkSet, model: KanModel, spacing, dims) -> TreResult:
    """Distance in mm between mapped fixed landmarks and their moving partners."""
    if len(fixed_lms) != len(moving_lms):
        raise ValueError(f"landmark counts differ: {len(fixed_lms)} vs {len(moving_lms)}")
    if len(fixed_lms) == 0:
        raise ValueError("no landmarks")
    mapped = map_points(model, fixed_lms.points, dims)
    err = np.linalg.norm((mapped - moving_lms.points) * np.asarray(spacing), axis=1)
    return TreResult(float(err.mean()), float(err.std()), err)


def threshold_table(errors, thresholds=(1.0, 2.0, 3.0)) -> dict:
    """Cumulative percentage of errors within each threshold, plus outliers above the last."""
    errors = np.asarray(errors, dtype=np.float64)
    if errors.size == 0:
        raise ValueError("no errors to tabulate")
    within = {float(t): 100.0 * float(np.mean(errors <= t)) for t in thresholds}
    above = errors > thresholds[-1]
    return {
        "within": within,
        "outlier_pct": 100.0 * float(np.mean(above)),
        "outlier_count": int(above.sum()),
    }


def _labels(a, b):
    labs = np.union1d(np.unique(a), np.unique(b))
    return [int(v) for v in labs if v != 0]


def dice(warped, fixed) -> tuple[dict[int, float], float]:
    """Per-label Dice over non-background labels present in either volume, and their mean."""
    a, b = np.asarray(warped), np.asarray(fixed)
    if a.shape != b.shape:
        raise ValueError(f"label volumes differ in shape: {a.shape} vs {b.shape}")
    labels = _labels(a, b)
    if not labels:
        raise ValueError("no foreground labels in either volume")
    per = {}
    for lab in labels:
        x, y = a == lab, b == lab
        per[lab] = 2.0 * np.logical_and(x, y).sum() / (x.sum() + y.sum())
    return per, float(np.mean(list(per.values())))


def boundary_voxels(mask) -> np.ndarray:
    """Foreground voxels with at least one 6-neighbour outside the mask (grid edge counts)."""
    m = np.asarray(mask, dtype=bool)
    padded = np.pad(m, 1, constant_values=False)
    interior = np.ones_like(m)
    for axis in range(3):
        for shift in (-1, 1):
            interior &= np.roll(padded, shift, axis=axis)[1:-1, 1:-1, 1:-1]
    return np.argwhere(m & ~interior)


def _hd95_label(a, b, spacing) -> float:
    sa, sb = boundary_voxels(a), boundary_voxels(b)
    if len(sa) == 0 or len(sb) == 0:
        raise ValueError("empty foreground for HD95")
    sp = np.asarray(spacing, dtype=np.float64)
    pa, pb = sa * sp, sb * sp
    d_ab, _ = cKDTree(pb).query(pa)
    d_ba, _ = cKDTree(pa).query(pb)
    return float(np.percentile(np.concatenate([d_ab, d_ba]), 95))


def hd95(warped, fixed, spacing=(1.0, 1.0, 1.0), label: int | None = None) -> float:
    """Symmetric 95th-percentile surface distance in mm.

    With ``label`` None, the mean over non-background labels present in either
    volume; a label missing from one side raises.
    """
    a, b = np.asarray(warped), np.asarray(fixed)
    if a.shape != b.shape:
        raise ValueError(f"label volumes differ in shape: {a.shape} vs {b.shape}")
    if label is not None:
        return _hd95_label(a == label, b == label, spacing)
    labels = _labels(a, b)
    if not labels:
        raise ValueError("no foreground labels in either volume")
    return float(np.mean([_hd95_label(a == lab, b == lab, spacing) for lab in labels]))


def jacobian_map(field) -> np.ndarray:
    """det(I + dU/dx) per voxel by finite differences of a voxel-unit field (dims + (3,))."""
    field = np.asarray(field, dtype=np.float64)
    if field.ndim != 4 or field.shape[-1] != 3:
        raise ValueError(f"field must have shape (X, Y, Z, 3), got {field.shape}")
    J = np.empty(field.shape[:3] + (3, 3))
    for i in range(3):
        grads = np.gradient(field[..., i], axis=(0, 1, 2))
        for j in range(3):
            J[..., i, j] = grads[j] + (1.0 if i == j else 0.0)
    return np.linalg.det(J)


def njd(field, mask=None) -> float:
    """Percentage of voxels with det J <= 0, over ``mask`` when given."""
    det = jacobian_map(field)
    folded = det <= 0
    if mask is not None:
        m = np.asarray(mask, dtype=bool)
        if not m.any():
            raise ValueError("empty mask")
        return 100.0 * float(folded[m].mean())
    return 100.0 * float(folded.mean())


@dataclass
class MetricsReport:
    """Per-seed metric rows plus a mean/std aggregate, exportable as CSV and JSON."""

    rows: list[dict] = field(default_factory=list)
    extra: dict = field(default_factory=dict)

    def add(self, seed, **metrics):
        self.rows.append({"seed": seed, **metrics})

    def columns(self) -> list[str]:
        cols = []
        for row in self.rows:
            cols.extend(k for k in row if k not in cols)
        return cols

    def aggregate(self) -> dict[str, dict[str, float]]:
        out = {}
        for col in self.columns():
            if col == "seed":
                continue
            vals = [r[col] for r in self.rows if isinstance(r.get(col), (int, float))]
            if vals:
                v = np.asarray(vals, dtype=np.float64)
                out[col] = {"mean": float(v.mean()), "std": float(v.std())}
        return out

    def write_csv(self, path) -> None:
        cols = self.columns()
        agg = self.aggregate()
        with open(Path(path), "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(cols)
            for row in self.rows:
                w.writerow([row.get(c, "") for c in cols])
            for stat in ("mean", "std"):
                w.writerow([stat if c == "seed" else agg.get(c, {}).get(stat, "") for c in cols])

    def write_json(self, path) -> None:
        doc = {"per_seed": self.rows, "aggregate": self.aggregate(), **self.extra}
        Path(path).write_text(json.dumps(doc, indent=2, default=_jsonable))


def _jsonable(obj):
    if isinstance(obj, np.generic):
        return obj.item()
    if isinstance(obj, np.ndarray):
        return obj.tolist()
    raise TypeError(f"not JSON serializable: {type(obj)}")
