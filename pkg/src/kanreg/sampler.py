"""Volumes, coordinate normalization, trilinear sampling and dense warping."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import diffcore as dc
from .diffcore import Dual, Node, value_of

__all__ = [
    "Volume",
    "Mask",
    "CoordinateBatch",
    "voxel_to_normalized",
    "normalized_to_voxel",
    "half_extent",
    "grid_voxels",
    "trilinear_sample",
    "trilinear_sample_voxel",
    "trilinear_gradient_voxel",
    "nearest_sample_voxel",
    "sample_batch",
    "dense_displacement",
    "warp_dense",
]


@dataclass
class Volume:
    """Scalar grid ``data[x, y, z]`` with physical ``spacing`` in mm per voxel."""

    data: np.ndarray
    spacing: tuple[float, float, float] = (1.0, 1.0, 1.0)

    def __post_init__(self):
        self.data = np.asarray(self.data)
        if self.data.ndim != 3:
            raise ValueError(f"volume must be 3-D, got shape {self.data.shape}")
        self.spacing = tuple(float(s) for s in self.spacing)
        if len(self.spacing) != 3 or any(s <= 0 for s in self.spacing):
            raise ValueError(f"spacing must be 3 positive values, got {self.spacing}")

    @property
    def dims(self) -> tuple[int, int, int]:
        return tuple(self.data.shape)


@dataclass
class Mask:
    data: np.ndarray
    indices: np.ndarray = field(init=False, repr=False)

    def __post_init__(self):
        self.data = np.asarray(self.data, dtype=bool)
        if self.data.ndim != 3:
            raise ValueError(f"mask must be 3-D, got shape {self.data.shape}")
        self.indices = np.argwhere(self.data)

    @classmethod
    def full(cls, dims) -> "Mask":
        return cls(np.ones(dims, dtype=bool))

    @property
    def dims(self):
        return tuple(self.data.shape)

    def __len__(self):
        return len(self.indices)


@dataclass
class CoordinateBatch:
    """Normalized points plus the voxel indices they came from."""

    points: np.ndarray
    voxels: np.ndarray
    dims: tuple[int, int, int]

    @property
    def count(self) -> int:
        return len(self.points)


def _check_dims(dims):
    dims = np.asarray(dims)
    if np.any(dims < 2):
        raise ValueError(f"every axis needs at least 2 voxels, got {tuple(dims)}")
    return dims


def half_extent(dims) -> np.ndarray:
    """Voxels per normalized unit on each axis, (dims - 1) / 2."""
    return (_check_dims(dims) - 1) / 2.0


def voxel_to_normalized(idx, dims) -> np.ndarray:
    dims = _check_dims(dims)
    return 2.0 * np.asarray(idx, dtype=np.float64) / (dims - 1) - 1.0


def normalized_to_voxel(pts, dims) -> np.ndarray:
    dims = _check_dims(dims)
    return (np.asarray(pts, dtype=np.float64) + 1.0) * (dims - 1) / 2.0


def grid_voxels(dims) -> np.ndarray:
    """All voxel indices of a grid as an (N, 3) integer array, C order."""
    return np.stack(np.meshgrid(*[np.arange(n) for n in dims], indexing="ij"), -1).reshape(-1, 3)


def _cell(data, vox):
    """Lower corner index, fractional offset and in-range flags per axis."""
    dims = np.asarray(data.shape)
    inside = (vox >= 0) & (vox <= dims - 1)
    v = np.clip(vox, 0, dims - 1)
    i0 = np.minimum(np.floor(v).astype(np.int64), dims - 2)
    return i0, v - i0, inside


def _interp(data, i0, f, order):
    """Trilinear interpolant (order 0) or its partial derivatives per axis.

    ``order`` is a 0/1 triple; a 1 replaces the axis weights (1 - f, f) by
    their derivative (-1, 1).
    """
    out = 0.0
    for cx in (0, 1):
        for cy in (0, 1):
            for cz in (0, 1):
                w = 1.0
                for axis, c in enumerate((cx, cy, cz)):
                    fa = f[:, axis]
                    if order[axis]:
                        w = w * (1.0 if c else -1.0)
                    else:
                        w = w * (fa if c else 1.0 - fa)
                out = out + w * data[i0[:, 0] + cx, i0[:, 1] + cy, i0[:, 2] + cz]
    return out


_E = ((1, 0, 0), (0, 1, 0), (0, 0, 1))


def trilinear_gradient_voxel(vol: Volume, vox):
    """Spatial gradient (N, 3) of the interpolant w.r.t. voxel coordinates.

    Differentiable on the tape through the mixed second derivatives of the
    interpolant; components are zero on clamped axes.
    """
    data = vol.data
    v = value_of(vox)
    i0, f, inside = _cell(data, v)
    grad = np.stack([_interp(data, i0, f, e) for e in _E], axis=-1) * inside
    if not isinstance(vox, Node):
        return grad

    def vjp(g):
        out = np.zeros_like(v)
        for a in range(3):
            for b in range(3):
                if a != b:
                    order = tuple(int(i in (a, b)) for i in range(3))
                    h = _interp(data, i0, f, order) * inside[:, a] * inside[:, b]
                    out[:, b] += g[:, a] * h
        return out

    return dc.custom(grad, [(vox, vjp)])


def trilinear_sample_voxel(vol: Volume, vox):
    """Trilinear intensities at continuous voxel coordinates (N, 3).

    Coordinates outside the grid are clamped to the boundary.  Accepts arrays,
    tape nodes (reverse mode) and duals (tangents via the spatial gradient).
    """
    if isinstance(vox, Dual):
        val = trilinear_sample_voxel(vol, vox.primal)
        if vox.tangent is None:
            return Dual(val, None)
        grad = trilinear_gradient_voxel(vol, vox.primal)
        return Dual(val, dc.sum(dc.mul(grad, vox.tangent), axis=-1))
    data = vol.data
    v = value_of(vox)
    i0, f, inside = _cell(data, v)
    val = _interp(data, i0, f, (0, 0, 0))
    if not isinstance(vox, Node):
        return val
    grad = None

    def vjp(g):
        nonlocal grad
        if grad is None:
            grad = np.stack([_interp(data, i0, f, e) for e in _E], axis=-1) * inside
        return g[:, None] * grad

    return dc.custom(val, [(vox, vjp)])


def trilinear_sample(vol: Volume, pts):
    """Trilinear intensities at normalized points in [-1, 1]^3."""
    scale = half_extent(vol.dims).astype(value_of(pts).dtype)
    vox = dc.mul(dc.add(pts, 1.0), scale)
    return trilinear_sample_voxel(vol, vox)


def nearest_sample_voxel(vol: Volume, vox) -> np.ndarray:
    dims = np.asarray(vol.dims)
    idx = np.clip(np.rint(np.asarray(vox)), 0, dims - 1).astype(np.int64)
    return vol.data[idx[:, 0], idx[:, 1], idx[:, 2]]


def sample_batch(mask: Mask, n: int, rng: np.random.Generator, dtype=np.float64) -> CoordinateBatch:
    """``n`` in-mask voxels drawn uniformly with replacement."""
    if len(mask) == 0:
        raise ValueError("cannot sample from an empty mask")
    pick = rng.integers(0, len(mask), size=n)
    vox = mask.indices[pick]
    pts = voxel_to_normalized(vox, mask.dims).astype(dtype)
    return CoordinateBatch(pts, vox, mask.dims)


def dense_displacement(model, dims, chunk: int = 1 << 16) -> np.ndarray:
    """U over the whole grid in voxel units, shape dims + (3,)."""
    from .network import model_forward

    vox = grid_voxels(dims)
    dtype = model.dtype
    pts = voxel_to_normalized(vox, dims).astype(dtype)
    scale = half_extent(dims).astype(dtype)
    out = np.empty((len(vox), 3), dtype=dtype)
    for lo in range(0, len(vox), chunk):
        out[lo : lo + chunk] = model_forward(model, pts[lo : lo + chunk]) * scale
    return out.reshape(tuple(dims) + (3,))


def warp_dense(vol: Volume, model, interp: str = "trilinear", field=None, chunk: int = 1 << 16) -> Volume:
    """out(x) = vol(x + U(x)) on the fixed grid; ``nearest`` for label maps."""
    if interp not in ("trilinear", "nearest"):
        raise ValueError(f"unknown interpolation {interp!r}")
    dims = vol.dims
    if field is None:
        field = dense_displacement(model, dims, chunk)
    vox = grid_voxels(dims) + field.reshape(-1, 3)
    if interp == "nearest":
        out = nearest_sample_voxel(vol, vox)
    else:
        out = trilinear_sample_voxel(vol, vox)
    return Volume(np.asarray(out).reshape(dims).astype(vol.data.dtype, copy=False), vol.spacing)
