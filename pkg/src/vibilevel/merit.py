"""Regularized gap functions, the D-gap function and the skewed projection.

For ``c > 0`` the regularized gap

    phi_c(y, x) = sup_{z in Y} <F(y, x), y - z> - (c/2) ||y - z||^2

is attained at ``z*_c(y, x) = P_Y(y - F(y, x)/c)`` (complete the square), so
no inner optimization is ever solved here.  The D-gap ``phi_a - phi_b`` with
``b > a > 0`` is nonnegative on ``Y`` and vanishes exactly at VI solutions.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import InvalidInput
from .model import InstanceSpec

FEAS_TOL = 1e-9


@dataclass(frozen=True)
class DGapParams:
    a: float = 1.0
    b: float = 2.0

    def __post_init__(self):
        if not (0 < self.a < self.b):
            raise InvalidInput(f"D-gap parameters need b > a > 0 (got a={self.a}, b={self.b})")

    @classmethod
    def of(cls, instance: InstanceSpec) -> "DGapParams":
        return cls(instance.dgap_a, instance.dgap_b)


@dataclass(frozen=True, eq=False)
class SkewedProjectionResult:
    z: np.ndarray
    gap_value: float
    residual: np.ndarray


def _gap(F, y, z, c):
    r = y - z
    return float(F @ r - 0.5 * c * (r @ r)), r


def skewed_projection(instance: InstanceSpec, y, x, c: float) -> SkewedProjectionResult:
    """Maximizer ``z*_c(y, x)`` of the regularized gap problem and its value."""
    if not c > 0:
        raise InvalidInput("regularization parameter c must be positive")
    y = np.asarray(y, dtype=float)
    x = np.asarray(x, dtype=float)
    if y.shape != (instance.dim_y,) or x.shape != (instance.dim_x,):
        raise InvalidInput("y or x has the wrong dimension")
    F = instance.inner.eval(y, x)
    z = instance.set_y.project(y - F / c)
    value, r = _gap(F, y, z, c)
    return SkewedProjectionResult(z=z, gap_value=value, residual=r)


def evaluate_dgap(instance: InstanceSpec, y, x, params: DGapParams):
    """Return ``(phi_ab, z*_b)`` sharing a single evaluation of ``F``.

    No feasibility check; the solvers call this on projection outputs.
    """
    F = instance.inner.eval(y, x)
    proj = instance.set_y.project
    za = proj(y - F / params.a)
    zb = proj(y - F / params.b)
    phi_a, _ = _gap(F, y, za, params.a)
    phi_b, _ = _gap(F, y, zb, params.b)
    return phi_a - phi_b, zb


def dgap(instance: InstanceSpec, y, x, params: DGapParams | None = None) -> float:
    """D-gap value ``phi_a(y, x) - phi_b(y, x)`` at a feasible ``y``.

    Raises:
        InvalidInput: ``y`` is farther than ``FEAS_TOL`` from ``Y``.
    """
    params = params or DGapParams.of(instance)
    y = np.asarray(y, dtype=float)
    x = np.asarray(x, dtype=float)
    if y.shape != (instance.dim_y,) or x.shape != (instance.dim_x,):
        raise InvalidInput("y or x has the wrong dimension")
    dist = np.linalg.norm(y - instance.set_y.project(y))
    if dist > FEAS_TOL:
        raise InvalidInput(f"y lies outside Y (distance {dist:.3e})")
    value, _ = evaluate_dgap(instance, y, x, params)
    return value


def dgap_lower_bound(instance: InstanceSpec, y, x, params: DGapParams | None = None) -> float:
    """``(b - a)/2 * ||y - z*_b(y, x)||^2``, a lower bound on the D-gap over Y."""
    params = params or DGapParams.of(instance)
    r = skewed_projection(instance, y, x, params.b).residual
    return 0.5 * (params.b - params.a) * float(r @ r)


def dgap_batch(instance: InstanceSpec, Y, x, params: DGapParams | None = None) -> np.ndarray:
    """D-gap at every row of ``Y``; vectorized when the inner map allows it."""
    params = params or DGapParams.of(instance)
    Y = np.asarray(Y, dtype=float)
    fb = instance.inner.eval_batch
    if fb is None:
        return np.array([evaluate_dgap(instance, y, x, params)[0] for y in Y])
    F = fb(Y, x)
    out = np.zeros(Y.shape[0])
    for c, sign in ((params.a, 1.0), (params.b, -1.0)):
        Z = instance.set_y.project_batch(Y - F / c)
        R = Y - Z
        out += sign * (np.einsum("ij,ij->i", F, R) - 0.5 * c * np.einsum("ij,ij->i", R, R))
    return out
