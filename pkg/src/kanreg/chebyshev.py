"""Chebyshev bases over sparse degree sets, and the three degree-set regimes."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import diffcore as dc
from .diffcore import Dual, Node, value_of

__all__ = [
    "DegreeSet",
    "BasisConfig",
    "clamp_margin",
    "eval_basis",
    "basis",
    "recurrence_basis",
    "sample_degree_set",
    "full_degree_set",
]


@dataclass(frozen=True)
class DegreeSet:
    """Sorted, distinct, non-negative polynomial degrees active in one layer."""

    degrees: tuple[int, ...]

    def __post_init__(self):
        degs = tuple(int(d) for d in self.degrees)
        if not degs:
            raise ValueError("degree set must be nonempty")
        if any(d < 0 for d in degs):
            raise ValueError(f"negative degree in {degs}")
        if len(set(degs)) != len(degs):
            raise ValueError(f"duplicate degrees in {degs}")
        object.__setattr__(self, "degrees", tuple(sorted(degs)))

    @property
    def max_degree(self) -> int:
        return self.degrees[-1]

    def __len__(self):
        return len(self.degrees)

    def __iter__(self):
        return iter(self.degrees)

    def __contains__(self, d):
        return d in self.degrees

    def as_array(self, dtype=np.float64) -> np.ndarray:
        return np.asarray(self.degrees, dtype=dtype)


@dataclass(frozen=True)
class BasisConfig:
    """Which degree-set regime a model uses.

    ``fixed`` uses degrees 0..D in every layer, ``randomized`` draws
    {0} plus k of 1..K per layer, ``adaptive`` learns k of 1..K with noisy top-k.
    """

    mode: str
    D: int | None = None
    k: int | None = None
    K: int | None = None

    def __post_init__(self):
        if self.mode == "fixed":
            if self.D is None or self.D < 0:
                raise ValueError(f"fixed basis needs D >= 0, got {self.D}")
        elif self.mode in ("randomized", "adaptive"):
            if self.k is None or self.K is None or not 1 <= self.k <= self.K:
                raise ValueError(f"{self.mode} basis needs 1 <= k <= K, got k={self.k}, K={self.K}")
        else:
            raise ValueError(f"unknown basis mode {self.mode!r}")

    @classmethod
    def fixed(cls, D: int) -> "BasisConfig":
        return cls("fixed", D=D)

    @classmethod
    def randomized(cls, k: int, K: int) -> "BasisConfig":
        return cls("randomized", k=k, K=K)

    @classmethod
    def adaptive(cls, k: int, K: int) -> "BasisConfig":
        return cls("adaptive", k=k, K=K)

    def to_dict(self) -> dict:
        return {key: v for key, v in self.__dict__.items() if v is not None}

    def label(self) -> str:
        if self.mode == "fixed":
            return f"KAN(D={self.D})"
        prefix = "RandKAN" if self.mode == "randomized" else "A-KAN"
        return f"{prefix}(k={self.k},K={self.K})"


def full_degree_set(D: int) -> DegreeSet:
    if D < 0:
        raise ValueError(f"D must be >= 0, got {D}")
    return DegreeSet(tuple(range(D + 1)))


def sample_degree_set(k: int, K: int, rng: np.random.Generator) -> DegreeSet:
    """{0} plus a simple random sample of k degrees from 1..K, without replacement."""
    if not 1 <= k <= K:
        raise ValueError(f"need 1 <= k <= K, got k={k}, K={K}")
    picked = rng.choice(np.arange(1, K + 1), size=k, replace=False)
    return DegreeSet((0,) + tuple(int(d) for d in picked))


def clamp_margin(dtype) -> float:
    # float64: 1e-12 keeps |T_84(1 - margin) - 1| < 1e-6; float32 cannot resolve that
    return max(1e-12, 8.0 * float(np.finfo(dtype).eps))


def _degrees(degrees, dtype):
    if isinstance(degrees, DegreeSet):
        return degrees.as_array(dtype)
    return np.asarray(tuple(degrees), dtype=dtype)


def _trig_terms(x, deg):
    theta = np.arccos(x)[..., None]
    nt = theta * deg
    return np.cos(nt), np.sin(nt), np.sin(theta)


def _second_derivative_vjp(g, x, deg, T, dT):
    # sum_d g * T''_d using (1 - x^2) T'' = x T' - n^2 T, without a full-size temporary
    num = x * np.einsum("...d,...d->...", g, dT) - np.einsum("...d,d,...d->...", g, deg * deg, T)
    return num / (1.0 - x * x)


def eval_basis(x, degrees) -> np.ndarray:
    """T_d(x) for every d in ``degrees``, stacked on a new trailing axis."""
    x = np.asarray(x)
    if not np.issubdtype(x.dtype, np.floating):
        x = x.astype(np.float64)
    m = clamp_margin(x.dtype)
    xc = np.clip(x, -1.0 + m, 1.0 - m)
    T, _, _ = _trig_terms(xc, _degrees(degrees, x.dtype))
    return T


def _basis_with_derivative(s, deg):
    """(T, dT/ds) as tape nodes over an already-clamped input ``s``."""
    x = value_of(s)
    T, sin_nt, sin_t = _trig_terms(x, deg)
    dT = deg * sin_nt / sin_t
    T_node = dc.custom(T, [(s, lambda g: np.einsum("...d,...d->...", g, dT))])
    dT_node = dc.custom(dT, [(s, lambda g: _second_derivative_vjp(g, x, deg, T, dT))])
    return T_node, dT_node


def _tangent_basis(dT, t):
    """dT[..., d] * t[k, ..., None]: tangents of the basis given input tangents t."""
    dv, tv = value_of(dT), value_of(t)
    out = dv[None] * tv[..., None]
    return dc.custom(
        out,
        [
            (dT, lambda g: np.einsum("k...d,k...->...d", g, tv)),
            (t, lambda g: np.einsum("k...d,...d->k...", g, dv)),
        ],
    )


def basis(s, degrees):
    """Differentiable T_d(s) via cos(d * arccos(s)) for arrays, nodes or duals.

    ``s`` is clamped to the open interval first.  The result gains a trailing
    axis indexed by the entries of ``degrees``.
    """
    x = value_of(s)
    dtype = x.dtype
    m = clamp_margin(dtype)
    deg = _degrees(degrees, dtype)
    sc = dc.clip(s, -1.0 + m, 1.0 - m)
    if isinstance(sc, Dual):
        T, dT = _basis_with_derivative(sc.primal, deg)
        if sc.tangent is None:
            return Dual(T, None)
        return Dual(T, _tangent_basis(dT, sc.tangent))
    if isinstance(sc, Node):
        return _basis_with_derivative(sc, deg)[0]
    T, _, _ = _trig_terms(sc, deg)
    return T


def recurrence_basis(x, max_degree: int) -> np.ndarray:
    """T_0..T_max by the three-term recurrence; independent of the trig form."""
    x = np.asarray(x, dtype=np.float64)
    out = np.empty(x.shape + (max_degree + 1,))
    out[..., 0] = 1.0
    if max_degree >= 1:
        out[..., 1] = x
    for n in range(1, max_degree):
        out[..., n + 1] = 2.0 * x * out[..., n] - out[..., n - 1]
    return out
