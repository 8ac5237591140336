"""Bundled instances with known structure.

Seeded randomness comes from :class:`SplitMix64` so that instances are
reproducible bit for bit without depending on numpy's generator streams.
Matrices are filled row-major, one draw per entry, in the order the
constructors below consume them.
"""

from __future__ import annotations

import itertools
from dataclasses import dataclass, field
from typing import Callable, Dict, FrozenSet

import numpy as np

from .errors import InvalidInput
from .model import (
    Box,
    ConvexSet,
    HalfspaceIntersection,
    InnerMap,
    InstanceSpec,
    KnownSolution,
    OuterObjective,
)

_MASK = (1 << 64) - 1


class SplitMix64:
    """splitmix64 (Steele, Lea & Flood): 64-bit state, golden-gamma increment.

    ``uniform`` maps the top 53 bits of a draw to ``[0, 1)``.
    """

    def __init__(self, seed: int):
        self.state = int(seed) & _MASK

    def next_u64(self) -> int:
        self.state = (self.state + 0x9E3779B97F4A7C15) & _MASK
        z = self.state
        z = ((z ^ (z >> 30)) * 0xBF58476D1CE4E5B9) & _MASK
        z = ((z ^ (z >> 27)) * 0x94D049BB133111EB) & _MASK
        return z ^ (z >> 31)

    def uniform(self, lo=0.0, hi=1.0) -> float:
        return lo + (hi - lo) * ((self.next_u64() >> 11) * 2.0 ** -53)

    def uniforms(self, shape, lo=0.0, hi=1.0) -> np.ndarray:
        n = int(np.prod(shape))
        return np.array([self.uniform(lo, hi) for _ in range(n)]).reshape(shape)


def _orthonormal(A):
    """Modified Gram-Schmidt on the columns of ``A``."""
    Q = np.array(A, dtype=float)
    n = Q.shape[1]
    for j in range(n):
        for i in range(j):
            Q[:, j] -= (Q[:, i] @ Q[:, j]) * Q[:, i]
        Q[:, j] /= np.linalg.norm(Q[:, j])
    return Q


def random_spd(rng: SplitMix64, dim, lo=1.0, hi=3.0):
    """Symmetric matrix with eigenvalues drawn uniformly from ``[lo, hi]``."""
    eig = rng.uniforms(dim, lo, hi)
    V = _orthonormal(rng.uniforms((dim, dim), -1.0, 1.0))
    Q = (V * eig) @ V.T
    return 0.5 * (Q + Q.T)


def box_vi_solution(Q, R, c, box: Box, x, tol=1e-12):
    """Solve the affine box VI by enumerating lower/free/upper patterns.

    Returns ``(y, dy/dx)``.  The Jacobian is ``-Q_FF^{-1} R_F`` on the free
    rows and zero on the clamped ones.
    """
    n = Q.shape[0]
    lo, hi = box.lower, box.upper
    q = R @ x + c
    for pattern in itertools.product((-1, 0, 1), repeat=n):
        pat = np.array(pattern)
        free = pat == 0
        y = np.where(pat < 0, lo, hi).astype(float)
        if free.any():
            fixed = ~free
            rhs = -(q[free] + Q[np.ix_(free, fixed)] @ y[fixed])
            y[free] = np.linalg.solve(Q[np.ix_(free, free)], rhs)
        if np.any(y < lo - tol) or np.any(y > hi + tol):
            continue
        F = Q @ y + q
        if np.any(F[pat < 0] < -tol) or np.any(F[pat > 0] > tol):
            continue
        J = np.zeros((n, R.shape[1]))
        if free.any():
            J[free] = -np.linalg.solve(Q[np.ix_(free, free)], R[free])
        return np.clip(y, lo, hi), J
    raise InvalidInput("no active pattern solves the box VI")


def affine_inner(Q, R, c) -> InnerMap:
    """``F(y, x) = Q y + R x + c``."""
    Q = np.array(Q, dtype=float)
    R = np.array(R, dtype=float)
    c = np.array(c, dtype=float)
    mu = float(np.linalg.eigvalsh(0.5 * (Q + Q.T)).min())
    return InnerMap(
        dimension_y=Q.shape[0],
        dimension_x=R.shape[1],
        eval=lambda y, x: Q @ y + R @ x + c,
        mu=mu,
        jac_y=lambda y, x: Q,
        jac_x=lambda y, x: R,
        eval_batch=lambda Y, x: Y @ Q.T + (R @ x + c),
    )


def tracking_objective(target, x_weight=0.1) -> OuterObjective:
    """``f(y, x) = ||y - target||^2 + x_weight * ||x||^2``."""
    target = np.array(target, dtype=float)
    return OuterObjective(
        eval=lambda y, x: float((y - target) @ (y - target) + x_weight * (x @ x)),
        grad_y=lambda y, x: 2.0 * (y - target),
        grad_x=lambda y, x: 2.0 * x_weight * np.asarray(x, dtype=float),
    )


def affine_instance(Q, R, c, set_y: ConvexSet, set_x: ConvexSet, outer: OuterObjective,
                    a=1.0, b=2.0, name="affine", jacobian_mode="analytic") -> InstanceSpec:
    """Instance with an affine inner map; closed-form solution on small boxes."""
    Q = np.array(Q, dtype=float)
    R = np.array(R, dtype=float)
    c = np.array(c, dtype=float)
    known = None
    if isinstance(set_y, Box) and Q.shape[0] <= 8:
        known = KnownSolution(
            y_star_fn=lambda x: box_vi_solution(Q, R, c, set_y, np.asarray(x, float))[0],
            implicit_grad_fn=lambda x: box_vi_solution(Q, R, c, set_y, np.asarray(x, float))[1],
        )
    return InstanceSpec(inner=affine_inner(Q, R, c), outer=outer, set_y=set_y, set_x=set_x,
                        dgap_a=a, dgap_b=b, known_solution=known,
                        jacobian_mode=jacobian_mode, name=name)


@dataclass(frozen=True, eq=False)
class InstanceCatalogEntry:
    name: str
    spec: InstanceSpec
    regime_tags: FrozenSet[str] = field(default_factory=frozenset)
    notes: str = ""


def make_scalar_clamp(x_lower=0.0, x_upper=1.0) -> InstanceCatalogEntry:
    """``F = y - x`` on ``Y = [0, 1]``; ``y*(x) = clamp(x, 0, 1)``.

    The reduced objective is ``(clamp(x) - 0.25)^2`` with its minimizer at 0.25.
    """
    inner = InnerMap(
        dimension_y=1, dimension_x=1,
        eval=lambda y, x: y - x,
        mu=1.0,
        jac_y=lambda y, x: np.eye(1),
        jac_x=lambda y, x: -np.eye(1),
        eval_batch=lambda Y, x: Y - x,
    )
    outer = OuterObjective(
        eval=lambda y, x: float((y[0] - 0.25) ** 2),
        grad_y=lambda y, x: np.array([2.0 * (y[0] - 0.25)]),
        grad_x=lambda y, x: np.zeros(1),
    )
    known = KnownSolution(
        y_star_fn=lambda x: np.clip(np.asarray(x, dtype=float), 0.0, 1.0),
        implicit_grad_fn=lambda x: np.array([[1.0 if 0.0 < x[0] < 1.0 else 0.0]]),
    )
    spec = InstanceSpec(inner=inner, outer=outer, set_y=Box.cube(1),
                        set_x=Box([x_lower], [x_upper]), dgap_a=1.0, dgap_b=2.0,
                        known_solution=known, name="scalar_clamp")
    return InstanceCatalogEntry("scalar_clamp", spec, frozenset({"interior", "boundary_active"}),
                                "1-D clamp; contraction factor 1/2 with b = 2")


def _affine_data(dim, seed, y_center):
    rng = SplitMix64(seed)
    Q = random_spd(rng, dim)
    R = rng.uniforms((dim, dim), -0.5, 0.5)
    shift = rng.uniforms(dim, -0.1, 0.1)
    c = -Q @ np.asarray(y_center, dtype=float) + shift
    return Q, R, c


def make_affine_box(dim=2, seed=0, a=1.0, b=2.0) -> InstanceCatalogEntry:
    """Strongly monotone affine VI on ``[0, 1]^dim`` with ``X = [-1, 1]^dim``.

    ``Q`` has eigenvalues in ``[1, 3]``; with ``b = 2`` the fixed-point map
    contracts by at most 1/2.  ``c`` places ``y*(0)`` near the center of ``Y``
    so both interior and clamped solutions occur over ``X``.
    """
    if dim < 1:
        raise InvalidInput("dim must be >= 1")
    center = np.full(dim, 0.5)
    Q, R, c = _affine_data(dim, seed, center)
    spec = affine_instance(Q, R, c, Box.cube(dim), Box.cube(dim, -1.0, 1.0),
                           tracking_objective(center), a=a, b=b, name="affine_box")
    return InstanceCatalogEntry("affine_box", spec, frozenset({"interior", "boundary_active"}),
                                f"dim={dim}, seed={seed}")


def make_nonconvex_outer(seed=0) -> InstanceCatalogEntry:
    """Affine inner level of ``make_affine_box(2, seed)`` under a nonconvex outer loss

    ``f(y, x) = sin(3 x_1) ||y||^2 + 0.5 ||y - y_target||^2 + 0.05 ||x||^2``.
    """
    base = make_affine_box(2, seed).spec
    target = np.full(2, 0.5)

    def f(y, x):
        r = y - target
        return float(np.sin(3 * x[0]) * (y @ y) + 0.5 * (r @ r) + 0.05 * (x @ x))

    def grad_y(y, x):
        return 2 * np.sin(3 * x[0]) * y + (y - target)

    def grad_x(y, x):
        return np.array([3 * np.cos(3 * x[0]) * (y @ y) + 0.1 * x[0], 0.1 * x[1]])

    from dataclasses import replace

    spec = replace(base, outer=OuterObjective(f, grad_y, grad_x), name="nonconvex_outer")
    return InstanceCatalogEntry("nonconvex_outer", spec, frozenset({"nonconvex_outer"}),
                                f"inner = affine_box(2, {seed})")


def make_polyhedral(seed=0) -> InstanceCatalogEntry:
    """Affine VI on ``{y in [0, 1]^2 : y_1 + y_2 <= 1.2}``.

    The unconstrained solution at ``x = 0`` sits near ``(0.65, 0.65)`` so the
    diagonal face is active there.  Projection runs through Dykstra and the
    fixed-point Jacobians through finite differences.
    """
    normals = np.array([[1.0, 1.0], [-1.0, 0.0], [0.0, -1.0], [1.0, 0.0], [0.0, 1.0]])
    offsets = np.array([1.2, 0.0, 0.0, 1.0, 1.0])
    Y = HalfspaceIntersection(normals, offsets, enclosing_box=Box.cube(2),
                              feasible_point=np.array([0.5, 0.5]))
    Q, R, c = _affine_data(2, seed, np.array([0.65, 0.65]))
    spec = affine_instance(Q, R, c, Y, Box.cube(2, -1.0, 1.0),
                           tracking_objective(np.full(2, 0.5)), name="polyhedral",
                           jacobian_mode="finite_difference")
    return InstanceCatalogEntry("polyhedral", spec, frozenset({"polyhedral_Y", "boundary_active"}),
                                "box plus one diagonal halfspace")


CATALOG: Dict[str, Callable[..., InstanceCatalogEntry]] = {
    "scalar_clamp": lambda seed=0, dim=1: make_scalar_clamp(),
    "affine_box": lambda seed=0, dim=2: make_affine_box(dim, seed),
    "nonconvex_outer": lambda seed=0, dim=2: make_nonconvex_outer(seed),
    "polyhedral": lambda seed=0, dim=2: make_polyhedral(seed),
}


def get_instance(name: str, seed: int = 0, dim: int | None = None) -> InstanceCatalogEntry:
    try:
        make = CATALOG[name]
    except KeyError:
        raise InvalidInput(f"unknown instance {name!r}; choose from {sorted(CATALOG)}") from None
    return make(seed=seed) if dim is None else make(seed=seed, dim=dim)


def all_entries(seed=0):
    """Every catalog entry at its default size, plus a 3-d affine box."""
    return [make_scalar_clamp(), make_affine_box(2, seed), make_affine_box(3, seed),
            make_nonconvex_outer(seed), make_polyhedral(seed)]
