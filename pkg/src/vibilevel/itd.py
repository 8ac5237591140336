"""Iterative differentiation of the fixed-point map ``y <- z*_b(y, x)``.

With ``z*_b(y, x) = P_Y(u)`` and ``u = y - F(y, x)/b`` the chain rule gives

    J_y = J_P(u) (I - dF/dy / b),    J_x = -J_P(u) dF/dx / b,

and the implicit gradient of the iterates follows the forward recursion
``G_{t+1} = J_y(y_t) G_t + J_x(y_t)`` from ``G_0 = 0``.  Memory is one
``dim_y x dim_x`` matrix regardless of the number of inner steps.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional

import numpy as np

from .errors import InvalidInput, NonsmoothPoint, NumericalFailure
from .inner import InnerState
from .merit import DGapParams, evaluate_dgap
from .model import InstanceSpec, fd_jacobian


@dataclass(frozen=True, eq=False)
class FixedPointJacobians:
    J_y: np.ndarray
    J_x: np.ndarray
    mask: Optional[np.ndarray] = None  # projection Jacobian J_P(u); None in FD mode


@dataclass(eq=False)
class ItdState:
    grad_xy: np.ndarray
    t: int = 0

    @classmethod
    def zeros(cls, dim_y, dim_x):
        return cls(np.zeros((dim_y, dim_x)))


def fixed_point_jacobians(instance: InstanceSpec, y, x, b: float | None = None,
                          mode: str | None = None) -> FixedPointJacobians:
    """Jacobians of ``z*_b`` in ``y`` and ``x``.

    ``mode="analytic"`` uses the projection Jacobian of the set (box, simplex
    or ball interior) and the inner map's Jacobians, falling back to finite
    differences of ``F`` when those are absent.  ``mode="finite_difference"``
    differentiates ``z*_b`` itself.

    Raises:
        NonsmoothPoint: ``u`` sits on an activity boundary of the projection.
        UnsupportedAnalytic: the set has no closed-form projection Jacobian.
    """
    b = instance.dgap_b if b is None else b
    mode = mode or instance.jacobian_mode
    y = np.asarray(y, dtype=float)
    x = np.asarray(x, dtype=float)
    inner = instance.inner
    if mode == "analytic":
        u = y - inner.eval(y, x) / b
        JP = instance.set_y.projection_jacobian(u)
        Jy = JP - JP @ inner.jacobian_y(y, x) / b
        Jx = -JP @ inner.jacobian_x(y, x) / b
        return FixedPointJacobians(Jy, Jx, JP)
    if mode == "finite_difference":
        proj = instance.set_y.project

        def zb(yy, xx):
            return proj(yy - inner.eval(yy, xx) / b)

        Jy = fd_jacobian(lambda yy: zb(yy, x), y)
        Jx = fd_jacobian(lambda xx: zb(y, xx), x)
        return FixedPointJacobians(Jy, Jx, None)
    raise InvalidInput(f"unknown Jacobian mode {mode!r}")


def propagate(state: ItdState, jac: FixedPointJacobians) -> ItdState:
    """One step of ``G <- J_y G + J_x``."""
    if jac.J_y.shape[1] != state.grad_xy.shape[0] or jac.J_x.shape != state.grad_xy.shape:
        raise InvalidInput("Jacobian shapes do not match the implicit gradient")
    G = jac.J_y @ state.grad_xy + jac.J_x
    if not np.all(np.isfinite(G)):
        raise NumericalFailure("implicit gradient became non-finite")
    return ItdState(G, state.t + 1)


def hypergradient(instance: InstanceSpec, y_T, x, grad_xy) -> np.ndarray:
    """``grad_x f(y_T, x) + grad_xy^T grad_y f(y_T, x)``."""
    f = instance.outer
    grad_xy = np.asarray(grad_xy, dtype=float)
    if grad_xy.shape != (instance.dim_y, instance.dim_x):
        raise InvalidInput("grad_xy has the wrong shape")
    return np.asarray(f.grad_x(y_T, x), dtype=float) + grad_xy.T @ np.asarray(
        f.grad_y(y_T, x), dtype=float)


def unrolled_solve(instance: InstanceSpec, x, y0, T: int, tol: Optional[float] = None,
                   mode: str | None = None, grad0=None):
    """Inner fixed-point iteration with the implicit-gradient recursion alongside.

    Exactly ``T`` propagation steps are taken.  If the D-gap drops to ``tol``
    the iterate is frozen and the remaining steps reuse the Jacobians at that
    point, so an early inner stop never truncates the recursion.

    Returns:
        ``(InnerState, ItdState)``; ``InnerState.t`` counts the ``y`` updates.
    """
    if T < 0:
        raise InvalidInput("T must be >= 0")
    params = DGapParams.of(instance)
    x = np.asarray(x, dtype=float)
    y = np.asarray(y0, dtype=float)
    if y.shape != (instance.dim_y,):
        raise InvalidInput("y0 has the wrong dimension")
    itd = ItdState.zeros(instance.dim_y, instance.dim_x) if grad0 is None else ItdState(
        np.array(grad0, dtype=float))
    phi, zb = evaluate_dgap(instance, y, x, params)
    inner = InnerState(y=y, dgap_history=[phi], iterates=[y])
    frozen_jac = None
    for _ in range(T):
        if frozen_jac is not None:
            itd = propagate(itd, frozen_jac)
            continue
        jac = fixed_point_jacobians(instance, y, x, params.b, mode)
        itd = propagate(itd, jac)
        if tol is not None and phi <= tol:
            frozen_jac = jac
            continue
        step = float(np.linalg.norm(zb - y))
        y = zb
        phi, zb = evaluate_dgap(instance, y, x, params)
        if not (np.all(np.isfinite(y)) and np.isfinite(phi)):
            raise NumericalFailure(f"non-finite inner iterate at t={inner.t + 1}")
        inner.step_history.append(step)
        inner.dgap_history.append(phi)
        inner.iterates.append(y)
        inner.y = y
        inner.t += 1
    return inner, itd


@dataclass(frozen=True)
class JacobianConstants:
    """Sampled stand-ins for the Lipschitz and norm bounds on the fixed-point map.

    ``L_x``/``L_y``: Lipschitz constants of ``J_x``/``J_y`` in ``y``;
    ``C_prime``: largest ``||J_x||``; ``C_y``: bound on ``||y||`` over ``Y``;
    ``q``: largest ``||J_y||`` (the map's contraction coefficient).
    """

    L_x: float
    L_y: float
    C_prime: float
    C_y: float
    q: float
    samples: int


def sample_jacobian_constants(instance: InstanceSpec, x, n_samples=64, seed=0,
                              mode: str | None = None) -> JacobianConstants:
    """Estimate the Jacobian constants at ``x`` from random points of ``Y``.

    Points where the projection is nonsmooth are skipped.  Lipschitz ratios
    come from consecutive pairs of the accepted sample.
    """
    rng = np.random.default_rng(seed)
    x = np.asarray(x, dtype=float)
    pts, jacs = [], []
    for y in instance.set_y.sample(rng, n_samples):
        try:
            jacs.append(fixed_point_jacobians(instance, y, x, mode=mode))
        except NonsmoothPoint:
            continue
        pts.append(y)
    if not jacs:
        raise InvalidInput("every sampled point was nonsmooth")
    q = max(np.linalg.norm(j.J_y, 2) for j in jacs)
    Cp = max(np.linalg.norm(j.J_x, 2) for j in jacs)
    Lx = Ly = 0.0
    for (y1, j1), (y2, j2) in zip(zip(pts, jacs), zip(pts[1:], jacs[1:])):
        d = np.linalg.norm(y1 - y2)
        if d < 1e-12:
            continue
        Lx = max(Lx, np.linalg.norm(j1.J_x - j2.J_x, 2) / d)
        Ly = max(Ly, np.linalg.norm(j1.J_y - j2.J_y, 2) / d)
    return JacobianConstants(L_x=float(Lx), L_y=float(Ly), C_prime=float(Cp),
                             C_y=instance.set_y.norm_bound(), q=float(q), samples=len(jacs))


def implicit_gradient_bound(T: int, L_x, L_y, C_prime, C_y, q) -> float:
    """Error bound on ``||G_T - dy*/dx||`` after ``T`` cold-started steps.

    ``(L_x + L_y C'/(1-q)) C_y q^(T-1) T + C'/(1-q) q^T``; infinite when
    ``q >= 1``.
    """
    if q >= 1:
        return float("inf")
    lead = (L_x + L_y * C_prime / (1 - q)) * C_y * T * q ** (T - 1) if T > 0 else 0.0
    return float(lead + C_prime / (1 - q) * q ** T)
