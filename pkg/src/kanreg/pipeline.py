"""Case loading, per-run evaluation and artifact export shared by the CLI."""

from __future__ import annotations

import logging
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .engine import RegistrationResult
from .io import RunManifest, read_labels, read_landmarks, read_volume, write_field, write_history, write_volume
from .metrics import LandmarkSet, dice, hd95, njd, threshold_table, tre
from .network import save_checkpoint
from .sampler import Mask, Volume, warp_dense
from .synthetic import make_pair, recovery_error

__all__ = ["Case", "load_case", "synthetic_case", "evaluate", "export_result"]

log = logging.getLogger(__name__)


@dataclass
class Case:
    """Everything needed to register one pair and score the result."""

    fixed: Volume
    moving: Volume
    mask: Mask
    fixed_landmarks: LandmarkSet | None = None
    moving_landmarks: LandmarkSet | None = None
    fixed_labels: np.ndarray | None = None
    moving_labels: np.ndarray | None = None
    truth: np.ndarray | None = None
    name: str = "case"


def load_case(manifest: RunManifest) -> Case:
    p = manifest.paths
    fixed = read_volume(p["fixed"])
    moving = read_volume(p["moving"])
    if "mask" in p:
        mask = Mask(read_volume(p["mask"]).data > 0)
    else:
        mask = Mask.full(fixed.dims)
    case = Case(fixed, moving, mask, name=Path(p["fixed"]).stem)
    if ("fixed_landmarks" in p) != ("moving_landmarks" in p):
        raise ValueError("landmarks need both fixed_landmarks and moving_landmarks")
    if "fixed_landmarks" in p:
        case.fixed_landmarks = read_landmarks(p["fixed_landmarks"], fixed.spacing)
        case.moving_landmarks = read_landmarks(p["moving_landmarks"], moving.spacing)
    if ("fixed_labels" in p) != ("moving_labels" in p):
        raise ValueError("labels need both fixed_labels and moving_labels")
    if "fixed_labels" in p:
        case.fixed_labels, _ = read_labels(p["fixed_labels"])
        case.moving_labels, _ = read_labels(p["moving_labels"])
    return case


def synthetic_case(size: int = 48, seed: int = 0) -> Case:
    pair = make_pair(size=size, seed=seed)
    return Case(
        pair.fixed,
        pair.moving,
        pair.mask,
        pair.fixed_landmarks,
        pair.moving_landmarks,
        truth=pair.truth,
        name=f"synthetic{size}",
    )


def evaluate(case: Case, model, field: np.ndarray) -> dict:
    """Metric row for one registered model; keys depend on the available references."""
    row = {
        "njd_mask": njd(field, case.mask.data),
        "njd_all": njd(field),
    }
    if case.fixed_landmarks is not None:
        res = tre(case.fixed_landmarks, case.moving_landmarks, model, case.fixed.spacing, case.fixed.dims)
        row["tre_mean"], row["tre_std"] = res.mean, res.std
        table = threshold_table(res.errors)
        for t, pct in table["within"].items():
            row[f"tre_within_{t:g}mm"] = pct
        row["tre_outlier_pct"] = table["outlier_pct"]
        row["tre_outlier_count"] = table["outlier_count"]
    if case.fixed_labels is not None:
        warped = warp_dense(Volume(case.moving_labels, case.moving.spacing), model, "nearest", field).data
        _, row["dice"] = dice(warped, case.fixed_labels)
        row["hd95"] = hd95(warped, case.fixed_labels, case.fixed.spacing)
    if case.truth is not None:
        row["recovery_error"] = recovery_error(field, case.truth, case.mask)
    return row


def export_result(result: RegistrationResult, case: Case, out_dir) -> Path:
    """Checkpoint, field, warped image and loss history under ``out_dir/seed_<s>``."""
    out = Path(out_dir) / f"seed_{result.seed}"
    out.mkdir(parents=True, exist_ok=True)
    save_checkpoint(result.model, out / "model.kanr")
    write_field(result.field, out / "field.mhd", case.fixed.spacing)
    warped = warp_dense(case.moving, result.model, "trilinear", result.field)
    write_volume(Volume(warped.data.astype(np.float64), warped.spacing), out / "warped.mhd")
    write_history(result.history, out / "history.csv")
    log.info("wrote artifacts to %s", out)
    return out
