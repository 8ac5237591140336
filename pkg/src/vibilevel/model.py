"""Problem data for bilevel programs with a variational-inequality inner level.

The outer problem is ``min_{x in X} f(y*(x), x)`` where ``y*(x)`` solves the
VI ``<F(y*, x), z - y*> >= 0`` for all ``z`` in ``Y``.  This module holds the
sets ``X``/``Y`` with their Euclidean projections, the inner map ``F`` and the
outer objective ``f``, plus the finite-difference primitive shared by the
fallback Jacobians and the oracles.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Optional

import numpy as np

from .errors import (
    InvalidInput,
    InvalidInstance,
    NonsmoothPoint,
    NumericalFailure,
    ProjectionDidNotConverge,
    UnsupportedAnalytic,
)

# distance at which a pre-projection coordinate counts as sitting on an
# activity boundary of the projection
KINK_TOL = 1e-9
DYKSTRA_TOL = 1e-10
DYKSTRA_MAX_ITER = 10000
FD_STEP = 1e-5


def _frozen(a, ndim=1):
    a = np.array(a, dtype=float)
    if a.ndim != ndim:
        raise InvalidInput(f"expected a {ndim}-d array, got shape {a.shape}")
    a.setflags(write=False)
    return a


def _check_dim(v, n):
    v = np.asarray(v, dtype=float)
    if v.shape != (n,):
        raise InvalidInput(f"dimension mismatch: expected ({n},), got {v.shape}")
    return v


class ConvexSet:
    """Closed convex set with an exact or iterative Euclidean projection."""

    dim: int

    @property
    def bounded(self) -> bool:
        return True

    def project(self, v: np.ndarray) -> np.ndarray:
        raise NotImplementedError

    def project_batch(self, V: np.ndarray) -> np.ndarray:
        """Project each row of ``V``."""
        return np.array([self.project(v) for v in V])

    def contains(self, v, tol: float = 1e-9) -> bool:
        v = _check_dim(v, self.dim)
        return bool(np.linalg.norm(v - self.project(v)) <= tol)

    def projection_jacobian(self, u: np.ndarray) -> np.ndarray:
        """Jacobian of ``project`` at the (pre-projection) point ``u``."""
        raise UnsupportedAnalytic(
            f"{type(self).__name__} has no closed-form projection Jacobian")

    def activity(self, y: np.ndarray, tol: float = KINK_TOL) -> tuple:
        """Hashable description of which constraints are tight at ``y``."""
        raise NotImplementedError

    def sample(self, rng: np.random.Generator, n: int) -> np.ndarray:
        raise NotImplementedError

    def norm_bound(self) -> float:
        """Upper bound on ``||y||`` over the set."""
        raise NotImplementedError

    def center(self) -> np.ndarray:
        raise NotImplementedError


@dataclass(frozen=True, eq=False)
class Box(ConvexSet):
    lower: np.ndarray
    upper: np.ndarray

    def __post_init__(self):
        lo = _frozen(self.lower)
        hi = _frozen(self.upper)
        if lo.shape != hi.shape:
            raise InvalidInput("Box bounds have different shapes")
        if np.any(np.isnan(lo)) or np.any(np.isnan(hi)):
            raise InvalidInput("Box bounds contain NaN")
        if np.any(lo > hi):
            raise InvalidInput("Box requires lower <= upper componentwise")
        object.__setattr__(self, "lower", lo)
        object.__setattr__(self, "upper", hi)

    @classmethod
    def cube(cls, dim, lo=0.0, hi=1.0):
        return cls(np.full(dim, lo), np.full(dim, hi))

    @property
    def dim(self):
        return self.lower.shape[0]

    @property
    def bounded(self):
        return bool(np.all(np.isfinite(self.lower)) and np.all(np.isfinite(self.upper)))

    def project(self, v):
        v = _check_dim(v, self.dim)
        return np.clip(v, self.lower, self.upper)

    def project_batch(self, V):
        return np.clip(V, self.lower, self.upper)

    def projection_jacobian(self, u):
        u = _check_dim(u, self.dim)
        fixed = self.lower == self.upper
        near = (np.abs(u - self.lower) <= KINK_TOL) | (np.abs(u - self.upper) <= KINK_TOL)
        if np.any(near & ~fixed):
            raise NonsmoothPoint("pre-projection point lies on a box face", point=u)
        inside = (u > self.lower) & (u < self.upper) & ~fixed
        return np.diag(inside.astype(float))

    def activity(self, y, tol=KINK_TOL):
        y = np.asarray(y, dtype=float)
        at_lo = np.abs(y - self.lower) <= tol
        at_hi = np.abs(y - self.upper) <= tol
        return tuple(int(h) - int(l) for l, h in zip(at_lo, at_hi))

    def sample(self, rng, n):
        return rng.uniform(self.lower, self.upper, size=(n, self.dim))

    def norm_bound(self):
        return float(np.linalg.norm(np.maximum(np.abs(self.lower), np.abs(self.upper))))

    def center(self):
        return 0.5 * (self.lower + self.upper)


@dataclass(frozen=True, eq=False)
class Ball(ConvexSet):
    center_point: np.ndarray
    radius: float

    def __post_init__(self):
        object.__setattr__(self, "center_point", _frozen(self.center_point))
        if not (np.isfinite(self.radius) and self.radius > 0):
            raise InvalidInput("Ball radius must be positive and finite")
        object.__setattr__(self, "radius", float(self.radius))

    @property
    def dim(self):
        return self.center_point.shape[0]

    def project(self, v):
        v = _check_dim(v, self.dim)
        w = v - self.center_point
        n = np.linalg.norm(w)
        if n <= self.radius:
            return v
        return self.center_point + (self.radius / n) * w

    def projection_jacobian(self, u):
        u = _check_dim(u, self.dim)
        n = np.linalg.norm(u - self.center_point)
        if abs(n - self.radius) <= KINK_TOL:
            raise NonsmoothPoint("pre-projection point lies on the sphere", point=u)
        if n > self.radius:
            raise UnsupportedAnalytic(
                "ball projection Jacobian off the interior needs finite_difference mode")
        return np.eye(self.dim)

    def activity(self, y, tol=KINK_TOL):
        n = np.linalg.norm(np.asarray(y, dtype=float) - self.center_point)
        return (bool(n >= self.radius - tol),)

    def sample(self, rng, n):
        d = rng.standard_normal((n, self.dim))
        d /= np.linalg.norm(d, axis=1, keepdims=True)
        r = self.radius * rng.uniform(size=(n, 1)) ** (1.0 / self.dim)
        return self.center_point + r * d

    def norm_bound(self):
        return float(np.linalg.norm(self.center_point) + self.radius)

    def center(self):
        return np.array(self.center_point)


def project_simplex(v):
    """Euclidean projection onto the probability simplex by sort-and-threshold."""
    tau = _simplex_threshold(v)
    return np.maximum(v - tau, 0.0)


def _simplex_threshold(v):
    u = np.sort(v)[::-1]
    css = np.cumsum(u) - 1.0
    k = np.arange(1, v.shape[0] + 1)
    rho = np.nonzero(u - css / k > 0)[0][-1]
    return css[rho] / (rho + 1)


@dataclass(frozen=True, eq=False)
class Simplex(ConvexSet):
    """Probability simplex ``{y >= 0, sum(y) = 1}``."""

    dimension: int

    def __post_init__(self):
        if int(self.dimension) < 1:
            raise InvalidInput("Simplex dimension must be >= 1")

    @property
    def dim(self):
        return int(self.dimension)

    def project(self, v):
        v = _check_dim(v, self.dim)
        return project_simplex(v)

    def project_batch(self, V):
        U = -np.sort(-V, axis=1)
        css = np.cumsum(U, axis=1) - 1.0
        k = np.arange(1, V.shape[1] + 1)
        ok = U - css / k > 0
        rho = V.shape[1] - 1 - np.argmax(ok[:, ::-1], axis=1)
        tau = css[np.arange(V.shape[0]), rho] / (rho + 1)
        return np.maximum(V - tau[:, None], 0.0)

    def projection_jacobian(self, u):
        u = _check_dim(u, self.dim)
        tau = _simplex_threshold(u)
        if np.any(np.abs(u - tau) <= KINK_TOL):
            raise NonsmoothPoint("pre-projection coordinate at the simplex threshold",
                                 point=u)
        support = (u > tau).astype(float)
        return np.diag(support) - np.outer(support, support) / support.sum()

    def activity(self, y, tol=KINK_TOL):
        return tuple(bool(t) for t in np.asarray(y) <= tol)

    def sample(self, rng, n):
        return rng.dirichlet(np.ones(self.dim), size=n)

    def norm_bound(self):
        return 1.0

    def center(self):
        return np.full(self.dim, 1.0 / self.dim)


def dykstra_project(normals, offsets, v, tol=DYKSTRA_TOL, max_iter=DYKSTRA_MAX_ITER):
    """Project ``v`` onto ``{y : normals @ y <= offsets}`` with Dykstra's method.

    Each cycle sweeps the halfspaces in order, projecting ``x + p_i`` and
    updating the correction ``p_i``.  Every correction is a nonnegative
    multiple ``lam_i * a_i`` of its normal, so after a cycle the iterate is
    certified as the projection once it is feasible and every halfspace with
    ``lam_i > 0`` is tight (both to ``tol``).  A cyclic increment of the
    whole state (iterate and corrections) below ``tol`` also stops the sweep.

    Returns:
        ``(x, cycles)``.

    Raises:
        ProjectionDidNotConverge: after ``max_iter`` cycles.
    """
    A = np.asarray(normals, dtype=float)
    b = np.asarray(offsets, dtype=float)
    x = np.array(v, dtype=float)
    m = A.shape[0]
    sq = np.einsum("ij,ij->i", A, A)
    P = np.zeros_like(A)
    lam = np.zeros(m)
    increment = np.inf
    for cycle in range(1, max_iter + 1):
        x_prev = x
        P_prev = P.copy()
        for i in range(m):
            w = x + P[i]
            viol = A[i] @ w - b[i]
            if viol > 0:
                lam[i] = viol / sq[i]
                x = w - lam[i] * A[i]
            else:
                lam[i] = 0.0
                x = w
            P[i] = w - x
        if not np.all(np.isfinite(x)):
            raise NumericalFailure("Dykstra iterate became non-finite")
        slack = b - A @ x
        # x alone can stall while the corrections still move
        increment = np.sqrt(np.sum((x - x_prev) ** 2) + np.sum((P - P_prev) ** 2))
        tight = np.all(np.abs(slack[lam > 0]) <= tol)
        if (slack.min() >= -tol and tight) or increment <= tol:
            return x, cycle
    raise ProjectionDidNotConverge(
        f"Dykstra did not converge in {max_iter} cycles (increment {increment:.3e})",
        residual=increment, point=x)


@dataclass(frozen=True, eq=False)
class HalfspaceIntersection(ConvexSet):
    """Polyhedron ``{y : normals @ y <= offsets}``.

    ``enclosing_box`` certifies boundedness: on construction an LP checks that
    the polyhedron is nonempty and fits inside it.  Without a box the set is
    flagged unbounded.
    """

    normals: np.ndarray
    offsets: np.ndarray
    enclosing_box: Optional[Box] = None
    feasible_point: Optional[np.ndarray] = None
    tol: float = DYKSTRA_TOL
    max_iter: int = DYKSTRA_MAX_ITER
    _bounded: bool = field(default=False, init=False, repr=False)

    def __post_init__(self):
        A = _frozen(self.normals, ndim=2)
        b = _frozen(self.offsets)
        if A.shape[0] != b.shape[0]:
            raise InvalidInput("normals and offsets disagree in row count")
        if np.any(np.linalg.norm(A, axis=1) <= 0):
            raise InvalidInput("every halfspace normal must have positive norm")
        object.__setattr__(self, "normals", A)
        object.__setattr__(self, "offsets", b)
        if self.enclosing_box is not None and self.enclosing_box.dim != A.shape[1]:
            raise InvalidInput("enclosing box dimension mismatch")

        if self.feasible_point is None:
            object.__setattr__(self, "feasible_point", _frozen(self._find_feasible()))
        else:
            p = _frozen(self.feasible_point)
            if np.any(A @ p - b > 1e-9):
                raise InvalidInput("stored feasible point violates a halfspace")
            object.__setattr__(self, "feasible_point", p)
        object.__setattr__(self, "_bounded", self._certify_bounded())

    def _find_feasible(self):
        from scipy.optimize import linprog

        n = self.normals.shape[1]
        res = linprog(np.zeros(n), A_ub=self.normals, b_ub=self.offsets,
                      bounds=[(None, None)] * n, method="highs")
        if res.status != 0:
            raise InvalidInput("halfspace intersection is empty")
        return res.x

    def _certify_bounded(self):
        if self.enclosing_box is None:
            return False
        from scipy.optimize import linprog

        n = self.dim
        box = self.enclosing_box
        for j in range(n):
            for sign in (1.0, -1.0):
                c = np.zeros(n)
                c[j] = -sign
                res = linprog(c, A_ub=self.normals, b_ub=self.offsets,
                              bounds=[(None, None)] * n, method="highs")
                if res.status != 0:
                    return False
                if res.x[j] > box.upper[j] + 1e-9 or res.x[j] < box.lower[j] - 1e-9:
                    return False
        return True

    @property
    def dim(self):
        return self.normals.shape[1]

    @property
    def bounded(self):
        return self._bounded

    def project(self, v):
        v = _check_dim(v, self.dim)
        x, _ = dykstra_project(self.normals, self.offsets, v, self.tol, self.max_iter)
        return x

    def activity(self, y, tol=KINK_TOL):
        slack = self.offsets - self.normals @ np.asarray(y, dtype=float)
        return tuple(bool(s) for s in slack <= tol)

    def sample(self, rng, n):
        box = self.enclosing_box
        if box is None:
            raise InvalidInput("cannot sample an unbounded polyhedron")
        out = []
        while len(out) < n:
            cand = box.sample(rng, 4 * n)
            ok = np.all(cand @ self.normals.T <= self.offsets, axis=1)
            out.extend(cand[ok])
        return np.array(out[:n])

    def norm_bound(self):
        if self.enclosing_box is None:
            return float("inf")
        return self.enclosing_box.norm_bound()

    def center(self):
        if self.enclosing_box is None:
            return np.array(self.feasible_point)
        return self.project(self.enclosing_box.center())


def project(s: ConvexSet, v) -> np.ndarray:
    """Euclidean projection of ``v`` onto ``s``."""
    return s.project(_check_dim(v, s.dim))


def fd_jacobian(fn: Callable, point, step: float = FD_STEP) -> np.ndarray:
    """Central-difference Jacobian of ``fn`` at ``point``.

    The divisor is the representable step ``(p + h) - (p - h)`` rather than
    ``2h``, which removes the rounding of ``p +/- h`` from the quotient.
    """
    if not step > 0:
        raise InvalidInput("finite-difference step must be positive")
    p = np.asarray(point, dtype=float)
    cols = []
    for j in range(p.shape[0]):
        hp = p.copy()
        hm = p.copy()
        hp[j] += step
        hm[j] -= step
        fp = np.atleast_1d(np.asarray(fn(hp), dtype=float))
        fm = np.atleast_1d(np.asarray(fn(hm), dtype=float))
        if not (np.all(np.isfinite(fp)) and np.all(np.isfinite(fm))):
            raise NumericalFailure(f"non-finite function value near coordinate {j}")
        cols.append((fp - fm) / (hp[j] - hm[j]))
    return np.column_stack(cols)


@dataclass(frozen=True)
class InnerMap:
    """Inner map ``F(y, x)``, strongly monotone in ``y`` with modulus ``mu``.

    ``eval_batch`` is optional and evaluates ``F`` on rows of a 2-d ``y``;
    only the grid oracle uses it.
    """

    dimension_y: int
    dimension_x: int
    eval: Callable[[np.ndarray, np.ndarray], np.ndarray]
    mu: float
    jac_y: Optional[Callable] = None
    jac_x: Optional[Callable] = None
    eval_batch: Optional[Callable] = None

    def __call__(self, y, x):
        return self.eval(y, x)

    def jacobian_y(self, y, x):
        if self.jac_y is not None:
            return np.asarray(self.jac_y(y, x), dtype=float)
        return fd_jacobian(lambda yy: self.eval(yy, x), y)

    def jacobian_x(self, y, x):
        if self.jac_x is not None:
            return np.asarray(self.jac_x(y, x), dtype=float)
        return fd_jacobian(lambda xx: self.eval(y, xx), x)


@dataclass(frozen=True)
class OuterObjective:
    eval: Callable[[np.ndarray, np.ndarray], float]
    grad_y: Callable[[np.ndarray, np.ndarray], np.ndarray]
    grad_x: Callable[[np.ndarray, np.ndarray], np.ndarray]

    def __call__(self, y, x):
        return self.eval(y, x)


@dataclass(frozen=True)
class KnownSolution:
    """Closed-form inner solution ``y*(x)`` and its Jacobian ``d y*/dx``."""

    y_star_fn: Callable[[np.ndarray], np.ndarray]
    implicit_grad_fn: Optional[Callable[[np.ndarray], np.ndarray]] = None


JACOBIAN_MODES = ("analytic", "finite_difference")


@dataclass(frozen=True)
class InstanceSpec:
    """One bilevel problem: inner VI(Y, F(., x)) and outer objective f over X.

    ``jacobian_mode`` selects how the fixed-point Jacobians are formed when a
    caller does not say; polyhedral ``Y`` has no closed-form projection
    Jacobian and must use ``"finite_difference"``.
    """

    inner: InnerMap
    outer: OuterObjective
    set_y: ConvexSet
    set_x: ConvexSet
    dgap_a: float = 1.0
    dgap_b: float = 2.0
    known_solution: Optional[KnownSolution] = None
    jacobian_mode: str = "analytic"
    name: str = "instance"

    def __post_init__(self):
        if not (0 < self.dgap_a < self.dgap_b):
            raise InvalidInstance(
                f"D-gap parameters need 0 < a < b (got a={self.dgap_a}, b={self.dgap_b})")
        if self.inner.dimension_y != self.set_y.dim:
            raise InvalidInstance("inner map and Y disagree in dimension")
        if self.inner.dimension_x != self.set_x.dim:
            raise InvalidInstance("inner map and X disagree in dimension")
        if not self.set_y.bounded:
            raise InvalidInstance("Y must be closed, convex and bounded")
        if not self.set_x.bounded:
            raise InvalidInstance("X must be closed, convex and bounded")
        if self.jacobian_mode not in JACOBIAN_MODES:
            raise InvalidInstance(f"unknown jacobian_mode {self.jacobian_mode!r}")

    @property
    def dim_y(self):
        return self.set_y.dim

    @property
    def dim_x(self):
        return self.set_x.dim

    def with_dgap(self, a=None, b=None) -> "InstanceSpec":
        from dataclasses import replace

        return replace(self, dgap_a=self.dgap_a if a is None else float(a),
                       dgap_b=self.dgap_b if b is None else float(b))


def estimate_monotonicity(instance: InstanceSpec, n_pairs=200, seed=0) -> float:
    """Smallest observed ``<F(y1)-F(y2), y1-y2> / ||y1-y2||^2`` over sampled pairs."""
    rng = np.random.default_rng(seed)
    Y1 = instance.set_y.sample(rng, n_pairs)
    Y2 = instance.set_y.sample(rng, n_pairs)
    X = instance.set_x.sample(rng, n_pairs)
    worst = np.inf
    F = instance.inner.eval
    for y1, y2, x in zip(Y1, Y2, X):
        d = y1 - y2
        dd = d @ d
        if dd < 1e-12:
            continue
        worst = min(worst, (F(y1, x) - F(y2, x)) @ d / dd)
    return float(worst)


def check_strong_monotonicity(instance: InstanceSpec, n_pairs=200, seed=0, tol=1e-10):
    """Raise :class:`InvalidInstance` if a sampled pair breaks the claimed ``mu``."""
    rng = np.random.default_rng(seed)
    Y1 = instance.set_y.sample(rng, n_pairs)
    Y2 = instance.set_y.sample(rng, n_pairs)
    X = instance.set_x.sample(rng, n_pairs)
    F = instance.inner.eval
    mu = instance.inner.mu
    for y1, y2, x in zip(Y1, Y2, X):
        d = y1 - y2
        lhs = (F(y1, x) - F(y2, x)) @ d
        if lhs < mu * (d @ d) - tol:
            raise InvalidInstance(
                f"F is not {mu}-strongly monotone: <dF, dy> = {lhs:.3e} "
                f"< mu*|dy|^2 = {mu * (d @ d):.3e}")


def check_outer_gradients(instance: InstanceSpec, n_points=20, seed=0, rtol=1e-6):
    """Compare ``grad_y``/``grad_x`` with central differences of ``f``.

    The error is measured relative to ``max(1, ||fd||)`` so tiny gradients do
    not turn roundoff into a failure.
    """
    rng = np.random.default_rng(seed)
    Y = instance.set_y.sample(rng, n_points)
    X = instance.set_x.sample(rng, n_points)
    f = instance.outer
    worst = 0.0
    for y, x in zip(Y, X):
        gy = fd_jacobian(lambda yy: f.eval(yy, x), y)[0]
        gx = fd_jacobian(lambda xx: f.eval(y, xx), x)[0]
        ey = np.linalg.norm(f.grad_y(y, x) - gy) / max(1.0, np.linalg.norm(gy))
        ex = np.linalg.norm(f.grad_x(y, x) - gx) / max(1.0, np.linalg.norm(gx))
        worst = max(worst, ey, ex)
    if worst > rtol:
        raise InvalidInstance(f"outer gradients disagree with finite differences ({worst:.2e})")
    return worst
