"""Numerical self-tests: polynomial identities and derivative checks."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import diffcore as dc
from .chebyshev import BasisConfig, eval_basis, full_degree_set
from .diffcore import Dual, grad_check
from .engine import iteration_losses
from .losses import LossWeights
from .network import init_model, model_forward
from .sampler import Mask, sample_batch
from .synthetic import make_pair

__all__ = ["Check", "run_all"]


@dataclass
class Check:
    name: str
    ok: bool
    value: float
    limit: float

    def __str__(self):
        status = "PASS" if self.ok else "FAIL"
        return f"{status} {self.name}: {self.value:.3e} (limit {self.limit:.0e})"


def chebyshev_identities(rng) -> list[Check]:
    x = rng.uniform(-1, 1, 1000)
    T = eval_basis(x, full_degree_set(84))
    resid = np.abs(T[:, 2:] - (2 * x[:, None] * T[:, 1:-1] - T[:, :-2])).max()
    bound = np.abs(T).max() - 1.0
    return [
        Check("chebyshev recurrence residual", resid < 1e-10, resid, 1e-10),
        Check("chebyshev bound |T_n| - 1", bound <= 1e-9, max(bound, 0.0), 1e-9),
    ]


def primitive_tangents(rng) -> list[Check]:
    x = rng.uniform(-0.9, 0.9, 1000)
    h = 1e-6
    worst = 0.0
    for op in (dc.tanh, dc.sin, dc.cos, dc.arccos, dc.exp, dc.sigmoid, dc.silu):
        d = op(Dual(x, np.ones((1,) + x.shape)))
        fd = (op(x + h) - op(x - h)) / (2 * h)
        worst = max(worst, float(np.max(np.abs(d.tangent[0] - fd) / (np.abs(fd) + 1e-8))))
    return [Check("primitive tangents vs central differences", worst < 1e-6, worst, 1e-6)]


def spatial_jacobian_check(rng) -> list[Check]:
    model = init_model(BasisConfig.fixed(6), (3, 8, 3), rng, zero_head=False)
    x = rng.uniform(-0.8, 0.8, (50, 3))
    u = model_forward(model, Dual.seed(x))
    h = 1e-5
    worst = 0.0
    for j in range(3):
        e = np.zeros(3)
        e[j] = h
        fd = (model_forward(model, x + e) - model_forward(model, x - e)) / (2 * h)
        worst = max(worst, float(np.max(np.abs(u.tangent[j] - fd)) / (np.max(np.abs(fd)) + 1e-12)))
    return [Check("spatial jacobian vs central differences", worst < 1e-5, worst, 1e-5)]


def loss_gradient_check(rng) -> list[Check]:
    pair = make_pair(size=12, n_blobs=40, sigma_range=(1.0, 2.0), n_landmarks=4, seed=1)
    model = init_model(BasisConfig.fixed(4), (3, 6, 3), rng, zero_head=False)
    for layer in model.layers:
        layer.coeffs *= 4.0
    batch = sample_batch(Mask.full(pair.dims), 32, rng)
    names = list(model.named_parameters())
    values = [model.named_parameters()[n].copy() for n in names]

    def f(*ps):
        return iteration_losses(model, pair.fixed, pair.moving, batch, LossWeights(), dict(zip(names, ps)))[3]

    probes = [rng.choice(v.size, size=min(v.size, 8), replace=False) for v in values]
    err = grad_check(f, values, step=1e-6, indices=probes)
    return [Check("full loss parameter gradients", err < 1e-4, err, 1e-4)]


def run_all(seed: int = 0) -> list[Check]:
    rng = np.random.default_rng(seed)
    checks = []
    for fn in (chebyshev_identities, primitive_tangents, spatial_jacobian_check, loss_gradient_check):
        checks.extend(fn(rng))
    return checks
