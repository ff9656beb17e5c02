"""Per-pair optimization loop and multi-seed orchestration."""

from __future__ import annotations

import logging
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field, replace
from typing import Callable, Sequence

import numpy as np

from . import diffcore as dc
from .chebyshev import BasisConfig
from .diffcore import Dual, Tape, value_of
from .losses import LossWeights, jdet_loss, ncc_loss, total_loss, tv_loss
from .network import DEFAULT_WIDTHS, KanModel, init_model, model_forward, update_adaptive_schedule
from .optim import AdamState, LrSchedule, adam_step, lr_at
from .sampler import Mask, Volume, dense_displacement, half_extent, sample_batch, trilinear_sample_voxel

__all__ = [
    "RegistrationConfig",
    "RegistrationResult",
    "RegistrationError",
    "SeedRun",
    "HISTORY_COLUMNS",
    "register_pair",
    "run_seeds",
    "iteration_losses",
]

log = logging.getLogger(__name__)

HISTORY_COLUMNS = ("iteration", "data", "smooth", "fold", "total", "lr")
PRECISIONS = {"float64": np.float64, "float32": np.float32}


class RegistrationError(RuntimeError):
    def __init__(self, message, seed=None, iteration=None):
        super().__init__(f"{message} (seed={seed}, iteration={iteration})")
        self.seed = seed
        self.iteration = iteration


@dataclass(frozen=True)
class RegistrationConfig:
    basis: BasisConfig = BasisConfig.randomized(12, 84)
    widths: tuple[int, ...] = DEFAULT_WIDTHS
    iterations: int = 1500
    batch_size: int = 10000
    weights: LossWeights = LossWeights()
    base_lr: float = 1e-4
    constant_fraction: float = 0.5
    seeds: tuple[int, ...] = (0,)
    precision: str = "float64"
    chunk_size: int = 1 << 16
    grad_clip: float | None = None

    def __post_init__(self):
        if self.precision not in PRECISIONS:
            raise ValueError(f"precision must be one of {sorted(PRECISIONS)}, got {self.precision!r}")
        if self.iterations < 1 or self.batch_size < 1:
            raise ValueError("iterations and batch_size must be positive")

    @property
    def dtype(self):
        return PRECISIONS[self.precision]

    @property
    def schedule(self) -> LrSchedule:
        return LrSchedule(self.base_lr, self.iterations, self.constant_fraction)

    def with_overrides(self, **kw) -> "RegistrationConfig":
        return replace(self, **kw)


@dataclass
class RegistrationResult:
    model: KanModel
    history: np.ndarray  # (iterations, len(HISTORY_COLUMNS))
    field: np.ndarray  # dims + (3,), voxel units
    duration: float
    seed: int
    degenerate_batches: int = 0

    @property
    def final(self) -> dict[str, float]:
        return dict(zip(HISTORY_COLUMNS, self.history[-1].tolist()))


def _check_inputs(fixed: Volume, moving: Volume, mask: Mask):
    if fixed.dims != moving.dims:
        raise ValueError(f"fixed dims {fixed.dims} != moving dims {moving.dims}")
    if not np.allclose(fixed.spacing, moving.spacing):
        raise ValueError(f"fixed spacing {fixed.spacing} != moving spacing {moving.spacing}")
    if mask.dims != fixed.dims:
        raise ValueError(f"mask dims {mask.dims} != image dims {fixed.dims}")
    if len(mask) == 0:
        raise ValueError("mask is empty")


def iteration_losses(model, fixed, moving, batch, weights, params=None, rng=None):
    """Loss terms for one batch: (data, smooth, fold, total, degenerate).

    ``fixed`` is read at the batch voxels directly; ``moving`` is sampled at
    voxel + U with trilinear interpolation.  Spatial Jacobians come from the
    dual tangents of the same forward pass.
    """
    dtype = batch.points.dtype
    scale = half_extent(batch.dims).astype(dtype)
    u = model_forward(model, Dual.seed(batch.points), params, rng)
    phi_vox = dc.add(dc.mul(u.primal, scale), batch.voxels.astype(dtype))
    warped = trilinear_sample_voxel(moving, phi_vox)
    v = batch.voxels
    target = fixed.data[v[:, 0], v[:, 1], v[:, 2]]
    data, degenerate = ncc_loss(target, warped)
    grad_u = [[dc.getitem(u.tangent, (j, Ellipsis, i)) for j in range(3)] for i in range(3)]
    jac_phi = [[dc.add(grad_u[i][j], 1.0) if i == j else grad_u[i][j] for j in range(3)] for i in range(3)]
    smooth = tv_loss(grad_u)
    fold = jdet_loss(jac_phi, weights.epsilon)
    total = total_loss(data, smooth, fold, weights)
    return data, smooth, fold, total, degenerate


def _clip_grads(grads, max_norm):
    norm = np.sqrt(sum(float(np.sum(g * g)) for g in grads.values()))
    if norm > max_norm:
        return {k: g * (max_norm / norm) for k, g in grads.items()}
    return grads


def register_pair(
    fixed: Volume,
    moving: Volume,
    mask: Mask,
    cfg: RegistrationConfig,
    seed: int = 0,
    callback: Callable[[int, KanModel, np.ndarray], None] | None = None,
) -> RegistrationResult:
    """Fit a fresh KAN displacement model so that moving(x + U(x)) matches fixed(x)."""
    _check_inputs(fixed, moving, mask)
    dtype = cfg.dtype
    init_rng, batch_rng, noise_rng = (np.random.default_rng(s) for s in np.random.SeedSequence(seed).spawn(3))
    model = init_model(cfg.basis, cfg.widths, init_rng, seed=seed, dtype=dtype)
    fixed_c = Volume(fixed.data.astype(dtype), fixed.spacing)
    moving_c = Volume(moving.data.astype(dtype), moving.spacing)
    sched = cfg.schedule
    adam = AdamState()
    history = np.empty((cfg.iterations, len(HISTORY_COLUMNS)))
    degenerate_count = 0
    t0 = time.perf_counter()
    for it in range(cfg.iterations):
        lr = lr_at(it, sched)
        update_adaptive_schedule(model, it, cfg.iterations)
        batch = sample_batch(mask, cfg.batch_size, batch_rng, dtype)
        tape = Tape()
        named = model.named_parameters()
        leaves = {name: tape.leaf(arr) for name, arr in named.items()}
        data, smooth, fold, total, degenerate = iteration_losses(
            model, fixed_c, moving_c, batch, cfg.weights, leaves, noise_rng
        )
        degenerate_count += degenerate
        terms = [float(value_of(x)) for x in (data, smooth, fold, total)]
        if not np.all(np.isfinite(terms)):
            raise RegistrationError(f"non-finite loss {terms}", seed, it)
        history[it] = (it, *terms, lr)
        grads = dc.backward(tape, total)
        grads = {name: grads[leaf] for name, leaf in leaves.items()}
        if cfg.grad_clip is not None:
            grads = _clip_grads(grads, cfg.grad_clip)
        adam_step(adam, named, grads, lr, seed=seed, iteration=it)
        tape.release()
        if callback is not None:
            callback(it, model, history[it])
    field = dense_displacement(model, fixed.dims, cfg.chunk_size)
    duration = time.perf_counter() - t0
    log.info("seed %s: %d iterations in %.1f s, final total %.5f", seed, cfg.iterations, duration, history[-1, 4])
    return RegistrationResult(model, history, field, duration, seed, degenerate_count)


@dataclass
class SeedRun:
    """Per-seed results and metric rows, plus mean/std across successful seeds."""

    seeds: list[int]
    results: dict[int, RegistrationResult] = field(default_factory=dict)
    metrics: dict[int, dict[str, float]] = field(default_factory=dict)
    errors: dict[int, str] = field(default_factory=dict)

    def aggregate(self) -> dict[str, dict[str, float]]:
        if not self.metrics:
            return {}
        keys = list(next(iter(self.metrics.values())))
        out = {}
        for k in keys:
            vals = np.array([row[k] for row in self.metrics.values()], dtype=np.float64)
            out[k] = {"mean": float(vals.mean()), "std": float(vals.std())}
        return out


def default_metrics(result: RegistrationResult) -> dict[str, float]:
    from .metrics import njd

    row = {k: v for k, v in result.final.items() if k != "iteration"}
    row["njd"] = njd(result.field)
    row["duration"] = result.duration
    return row


def _run_one(args):
    fixed, moving, mask, cfg, seed = args
    return register_pair(fixed, moving, mask, cfg, seed)


def run_seeds(
    fixed: Volume,
    moving: Volume,
    mask: Mask,
    cfg: RegistrationConfig,
    seeds: Sequence[int] | None = None,
    metrics_fn: Callable[[RegistrationResult], dict[str, float]] = default_metrics,
    workers: int = 1,
) -> SeedRun:
    """Independent registrations per seed; a failing seed is recorded, not fatal."""
    seeds = list(cfg.seeds if seeds is None else seeds)
    if not seeds:
        raise ValueError("need at least one seed")
    run = SeedRun(seeds)
    jobs = [(fixed, moving, mask, cfg, s) for s in seeds]
    if workers > 1:
        with ProcessPoolExecutor(max_workers=workers) as pool:
            futures = {s: pool.submit(_run_one, job) for s, job in zip(seeds, jobs)}
            outcomes = {}
            for s, fut in futures.items():
                try:
                    outcomes[s] = fut.result()
                except Exception as exc:  # noqa: BLE001 - recorded per seed
                    outcomes[s] = exc
    else:
        outcomes = {}
        for s, job in zip(seeds, jobs):
            try:
                outcomes[s] = _run_one(job)
            except Exception as exc:  # noqa: BLE001 - recorded per seed
                outcomes[s] = exc
    for s in seeds:
        res = outcomes[s]
        if isinstance(res, Exception):
            log.error("seed %s failed: %s", s, res)
            run.errors[s] = str(res)
            continue
        run.results[s] = res
        run.metrics[s] = metrics_fn(res)
    return run
