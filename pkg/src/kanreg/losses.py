"""Similarity and regularization terms of the registration objective."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import diffcore as dc
from .diffcore import value_of

__all__ = [
    "LossWeights",
    "NCC_STABILIZER",
    "ncc_loss",
    "tv_loss",
    "determinant3",
    "jdet_loss",
    "total_loss",
]

NCC_STABILIZER = 1e-10


@dataclass(frozen=True)
class LossWeights:
    lam: float = 0.4
    gamma: float = 15.0
    epsilon: float = 0.1

    def __post_init__(self):
        if min(self.lam, self.gamma, self.epsilon) < 0:
            raise ValueError(f"loss weights must be non-negative: {self}")


def ncc_loss(i_vals, j_vals):
    """Negative global NCC over the batch.

    Returns ``(loss, degenerate)``; a zero-variance batch gives a constant 0
    loss and ``degenerate=True``.
    """
    n_i, n_j = np.shape(value_of(i_vals)), np.shape(value_of(j_vals))
    if n_i != n_j or not n_i or n_i[0] == 0:
        raise ValueError(f"ncc needs equal nonzero lengths, got {n_i} and {n_j}")
    di = dc.sub(i_vals, dc.mean(i_vals))
    dj = dc.sub(j_vals, dc.mean(j_vals))
    vi = dc.sum(dc.mul(di, di))
    vj = dc.sum(dc.mul(dj, dj))
    if float(value_of(vi)) == 0.0 or float(value_of(vj)) == 0.0:
        return np.zeros((), dtype=np.asarray(value_of(i_vals)).dtype), True
    cov = dc.sum(dc.mul(di, dj))
    return dc.neg(dc.div(cov, dc.sqrt(dc.add(dc.mul(vi, vj), NCC_STABILIZER)))), False


def tv_loss(grad_u) -> object:
    """Mean over points of the entrywise L1 norm of the 3x3 displacement Jacobian.

    ``grad_u`` is a nested 3x3 list of per-point entries (see
    ``diffcore.spatial_jacobian``) or an array of shape (N, 3, 3).
    """
    if isinstance(grad_u, np.ndarray):
        if grad_u.shape[0] == 0:
            raise ValueError("empty batch")
        return np.abs(grad_u).sum(axis=(1, 2)).mean()
    total = None
    for row in grad_u:
        for e in row:
            a = dc.absolute(e)
            total = a if total is None else dc.add(total, a)
    return dc.mean(total)


def determinant3(m):
    """Cofactor expansion of a nested 3x3 list of per-point entries."""
    (a, b, c), (d, e, f), (g, h, i) = m
    t1 = dc.mul(a, dc.sub(dc.mul(e, i), dc.mul(f, h)))
    t2 = dc.mul(b, dc.sub(dc.mul(d, i), dc.mul(f, g)))
    t3 = dc.mul(c, dc.sub(dc.mul(d, h), dc.mul(e, g)))
    return dc.add(dc.sub(t1, t2), t3)


def jdet_loss(jac_phi, epsilon: float):
    """Mean of relu(epsilon - det J_phi) over points.

    ``jac_phi`` is a nested 3x3 list of entries or an array (N, 3, 3).
    """
    if isinstance(jac_phi, np.ndarray):
        det = np.linalg.det(jac_phi)
        return np.maximum(epsilon - det, 0.0).mean()
    det = determinant3(jac_phi)
    return dc.mean(dc.relu(dc.sub(epsilon, det)))


def total_loss(data, smooth, fold, w: LossWeights):
    return dc.add(dc.add(data, dc.mul(smooth, w.lam)), dc.mul(fold, w.gamma))
