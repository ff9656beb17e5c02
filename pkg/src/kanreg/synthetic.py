"""Synthetic registration pairs with an exactly known displacement field.

The moving image is an analytic sum of Gaussian blobs m(y).  The fixed image is
F(x) = m(x + u(x)) evaluated analytically, so the map x -> x + u(x) aligns
M = m onto F exactly and ``u`` is the ground truth for the registration field.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .metrics import LandmarkSet
from .sampler import Mask, Volume, grid_voxels, voxel_to_normalized

__all__ = ["SyntheticPair", "sinusoidal_field", "blob_image", "make_pair", "recovery_error", "identity_error"]


@dataclass
class SyntheticPair:
    fixed: Volume
    moving: Volume
    mask: Mask
    truth: np.ndarray  # dims + (3,), voxel units
    fixed_landmarks: LandmarkSet
    moving_landmarks: LandmarkSet

    @property
    def dims(self):
        return self.fixed.dims


def sinusoidal_field(vox, dims, amplitude: float, phases) -> np.ndarray:
    """u_i(x) = amplitude * sin(pi * xn_{i+1} + phase_i) in voxels, xn normalized coordinates.

    Each component varies along a different axis, so the field has a non-trivial
    shear and a maximum norm of amplitude * sqrt(3).
    """
    xn = voxel_to_normalized(vox, dims)
    return np.stack([amplitude * np.sin(np.pi * xn[:, (i + 1) % 3] + phases[i]) for i in range(3)], axis=-1)


def blob_image(vox, centers, sigmas, heights) -> np.ndarray:
    """Sum of isotropic Gaussians evaluated at continuous voxel positions (N, 3)."""
    out = np.zeros(len(vox))
    for c, s, h in zip(centers, sigmas, heights):
        d2 = np.sum((vox - c) ** 2, axis=1)
        out += h * np.exp(-0.5 * d2 / (s * s))
    return out


def recovery_error(field, truth, mask) -> float:
    """Mean Euclidean distance between two voxel-unit fields over the mask."""
    m = np.asarray(mask.data if isinstance(mask, Mask) else mask, dtype=bool)
    return float(np.linalg.norm(field[m] - truth[m], axis=-1).mean())


def make_pair(
    size: int = 48,
    max_displacement: float = 4.0,
    n_blobs: int = 1000,
    sigma_range=(1.2, 2.5),
    mask_radius: float = 0.8,
    n_landmarks: int = 100,
    seed: int = 0,
) -> SyntheticPair:
    """Blob phantom warped by a sinusoidal field of the given maximum norm (voxels)."""
    rng = np.random.default_rng(seed)
    dims = (size, size, size)
    amplitude = max_displacement / np.sqrt(3.0)
    phases = rng.uniform(0, 2 * np.pi, size=3)
    centers = rng.uniform(-4, size + 3, size=(n_blobs, 3))
    sigmas = rng.uniform(*sigma_range, size=n_blobs)
    heights = rng.uniform(0.3, 1.0, size=n_blobs) * rng.choice([-1.0, 1.0], size=n_blobs)

    vox = grid_voxels(dims).astype(np.float64)
    u = sinusoidal_field(vox, dims, amplitude, phases)
    raw_m = blob_image(vox, centers, sigmas, heights)
    raw_f = blob_image(vox + u, centers, sigmas, heights)
    lo, hi = raw_m.min(), raw_m.max()
    moving = (raw_m - lo) / (hi - lo)
    fixed = (raw_f - lo) / (hi - lo)

    xn = voxel_to_normalized(vox, dims)
    inside = np.linalg.norm(xn, axis=1) <= mask_radius
    mask = Mask(inside.reshape(dims))

    pick = rng.choice(len(mask), size=n_landmarks, replace=False)
    lf = mask.indices[pick].astype(np.float64) + rng.uniform(-0.5, 0.5, size=(n_landmarks, 3))
    lf = np.clip(lf, 0, size - 1)
    lm = lf + sinusoidal_field(lf, dims, amplitude, phases)
    return SyntheticPair(
        Volume(fixed.reshape(dims)),
        Volume(moving.reshape(dims)),
        mask,
        u.reshape(dims + (3,)),
        LandmarkSet(lf),
        LandmarkSet(lm),
    )


def identity_error(pair: SyntheticPair) -> float:
    return recovery_error(np.zeros_like(pair.truth), pair.truth, pair.mask)
