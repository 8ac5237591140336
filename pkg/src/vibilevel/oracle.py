"""Reference computations that do not share code paths with the ITD solver.

* implicit gradients and hypergradients by central differences of over-solved
  inner solutions,
* brute-force grid minimization of the D-gap for small ``Y``,
* direct maximization of the regularized gap problem with SLSQP, which never
  calls the projection,
* :func:`verify_bounds`, which evaluates the R-linear envelope, the implicit
  gradient error bound and the O(1/K) outer bound with sampled constants.
"""

from __future__ import annotations

import itertools
import warnings
from dataclasses import asdict, dataclass, field
from typing import Dict, List, Optional

import numpy as np
from scipy.optimize import minimize

from .errors import (
    DegenerateFit,
    InsufficientData,
    InvalidInput,
    NonsmoothNeighborhood,
    NonsmoothPoint,
    UnsupportedAnalytic,
    UnsupportedDimension,
)
from .inner import REFERENCE_T, ROUNDOFF, envelope_check, estimate_rate, over_solve, reference_solution, solve_inner
from .itd import implicit_gradient_bound, sample_jacobian_constants, unrolled_solve
from .merit import DGapParams, dgap, dgap_batch
from .model import FD_STEP, Ball, Box, HalfspaceIntersection, InstanceSpec, Simplex, fd_jacobian
from .outer import OuterConfig, estimate_lipschitz, reduced_objective, run, true_hypergradient

FD_FALLBACK_STEP = 1e-4
BOUND_MARGIN = 0.05
ACTIVE_TOL = 1e-9


def _linear_constraints(S):
    """``(A_ineq, b_ineq, A_eq)`` describing a polyhedral set."""
    n = S.dim
    if isinstance(S, Box):
        return np.vstack([np.eye(n), -np.eye(n)]), np.concatenate([S.upper, -S.lower]), None
    if isinstance(S, Simplex):
        return -np.eye(n), np.zeros(n), np.ones((1, n))
    if isinstance(S, HalfspaceIntersection):
        return np.asarray(S.normals), np.asarray(S.offsets), None
    raise UnsupportedAnalytic(f"{type(S).__name__} is not polyhedral")


def kkt_implicit_gradient(instance: InstanceSpec, x, y_star=None) -> np.ndarray:
    """Implicit gradient from the linearized KKT system at ``y*``.

    With active constraint rows ``A`` and multipliers ``lam``,
    ``F(y*, x) + A^T lam = 0``; differentiating with ``A dy = 0`` fixed gives

        [dF/dy  A^T] [dy  ]   [-dF/dx]
        [A      0  ] [dlam] = [  0   ].

    Valid when every active inequality has a strictly positive multiplier.
    Balls are handled only at interior solutions.

    Raises:
        NonsmoothNeighborhood: an active inequality has a zero multiplier.
        UnsupportedAnalytic: the solution lies on the sphere of a ball.
    """
    x = np.asarray(x, dtype=float)
    y = reference_solution(instance, x) if y_star is None else np.asarray(y_star, dtype=float)
    S = instance.set_y
    Fy = instance.inner.jacobian_y(y, x)
    Fx = instance.inner.jacobian_x(y, x)
    if isinstance(S, Ball):
        if S.activity(y)[0]:
            raise UnsupportedAnalytic("solution on the sphere of a ball")
        return np.linalg.solve(Fy, -Fx)
    A_in, b_in, A_eq = _linear_constraints(S)
    scale = 1.0 + np.abs(b_in)
    act = np.nonzero(b_in - A_in @ y <= ACTIVE_TOL * scale)[0]
    rows = [A_in[act]] + ([A_eq] if A_eq is not None else [])
    A = np.vstack(rows) if rows else np.zeros((0, S.dim))
    F = instance.inner.eval(y, x)
    if A.shape[0]:
        lam, *_ = np.linalg.lstsq(A.T, -F, rcond=None)
        lam_in = lam[: act.size]
        if np.any(lam_in <= ACTIVE_TOL * max(1.0, float(np.linalg.norm(F)))):
            raise NonsmoothNeighborhood("weakly active constraint at the inner solution")
    m, n = A.shape[0], S.dim
    K = np.block([[Fy, A.T], [A, np.zeros((m, m))]])
    rhs = np.vstack([-Fx, np.zeros((m, instance.dim_x))])
    sol, *_ = np.linalg.lstsq(K, rhs, rcond=None)
    return sol[:n]


def fd_hypergradient(instance: InstanceSpec, x, h=FD_STEP) -> np.ndarray:
    """Central differences of ``x -> f(y*(x), x)``."""
    return fd_jacobian(lambda xx: reduced_objective(instance, xx), x, h)[0]


def _fd_solution_jacobian(instance, x, h, y_center):
    pattern = instance.set_y.activity(y_center)
    cols, noise = [], 0.0
    b = instance.dgap_b
    for j in range(instance.dim_x):
        xp = x.copy()
        xm = x.copy()
        xp[j] += h
        xm[j] -= h
        yp = over_solve(instance, xp, y_center)
        ym = over_solve(instance, xm, y_center)
        if instance.set_y.activity(yp) != pattern or instance.set_y.activity(ym) != pattern:
            raise NonsmoothNeighborhood(
                f"active pattern of y* changes within {h:g} of x along coordinate {j}")
        for xx, yy in ((xp, yp), (xm, ym)):
            z = instance.set_y.project(yy - instance.inner.eval(yy, xx) / b)
            noise = max(noise, float(np.linalg.norm(yy - z)))
        cols.append((yp - ym) / (xp[j] - xm[j]))
    return np.column_stack(cols), noise / h


def fd_implicit_gradient(instance: InstanceSpec, x, h=FD_STEP) -> np.ndarray:
    """Central-difference Jacobian of the inner solution map at ``x``.

    Each ``y*`` comes from an over-solved fixed-point run, independent of any
    closed form.  When the fixed-point residual divided by ``h`` exceeds
    ``h^2`` the step falls back to ``FD_FALLBACK_STEP``.

    Raises:
        NonsmoothNeighborhood: the active pattern differs across the stencil.
    """
    x = np.asarray(x, dtype=float)
    y_center = over_solve(instance, x)
    J, noise = _fd_solution_jacobian(instance, x, h, y_center)
    if noise > h * h and h < FD_FALLBACK_STEP:
        J, _ = _fd_solution_jacobian(instance, x, FD_FALLBACK_STEP, y_center)
    return J


def _grid(set_y, resolution):
    n = set_y.dim
    if isinstance(set_y, Box):
        axes = [np.linspace(lo, hi, resolution) for lo, hi in zip(set_y.lower, set_y.upper)]
        return np.stack(np.meshgrid(*axes, indexing="ij"), axis=-1).reshape(-1, n)
    if isinstance(set_y, Simplex):
        m = resolution - 1
        pts = [c + (m - sum(c),) for c in itertools.product(range(m + 1), repeat=n - 1)
               if sum(c) <= m]
        return np.array(pts, dtype=float) / m
    raise InvalidInput("grid oracle supports Box and Simplex sets only")


def grid_vi_solve(instance: InstanceSpec, x, resolution: int | None = None) -> np.ndarray:
    """Grid point of ``Y`` with the smallest D-gap.

    Default resolution is 1001 points per axis up to two dimensions and 101
    in three.
    """
    n = instance.dim_y
    if n > 3:
        raise UnsupportedDimension(f"grid oracle handles dim_y <= 3, got {n}")
    if resolution is None:
        resolution = 1001 if n <= 2 else 101
    pts = _grid(instance.set_y, resolution)
    x = np.asarray(x, dtype=float)
    best_val, best = np.inf, None
    for chunk in np.array_split(pts, max(1, pts.shape[0] // 200_000)):
        vals = dgap_batch(instance, chunk, x)
        i = int(np.argmin(vals))
        if vals[i] < best_val:
            best_val, best = vals[i], chunk[i]
    return best


def direct_skewed_maximize(instance: InstanceSpec, y, x, c: float, z0=None) -> np.ndarray:
    """Maximize ``<F(y,x), y - z> - (c/2)||y - z||^2`` over ``Y`` with SLSQP.

    The set enters only through explicit constraints, never through its
    projection.
    """
    y = np.asarray(y, dtype=float)
    F = instance.inner.eval(y, np.asarray(x, dtype=float))
    S = instance.set_y
    n = S.dim

    def neg(z):
        r = y - z
        return -(F @ r - 0.5 * c * (r @ r)), F - c * r

    bounds = None
    cons = []
    if isinstance(S, Box):
        bounds = list(zip(S.lower, S.upper))
    elif isinstance(S, Ball):
        cc, rr = S.center_point, S.radius
        cons.append({"type": "ineq", "fun": lambda z: rr ** 2 - (z - cc) @ (z - cc),
                     "jac": lambda z: -2 * (z - cc)})
    elif isinstance(S, Simplex):
        bounds = [(0.0, None)] * n
        cons.append({"type": "eq", "fun": lambda z: z.sum() - 1.0, "jac": lambda z: np.ones(n)})
    elif isinstance(S, HalfspaceIntersection):
        A, bb = S.normals, S.offsets
        cons.append({"type": "ineq", "fun": lambda z: bb - A @ z, "jac": lambda z: -A})
    else:
        raise InvalidInput(f"no direct maximizer for {type(S).__name__}")
    if z0 is None:
        z0 = S.center() if not isinstance(S, HalfspaceIntersection) else S.feasible_point
    with warnings.catch_warnings():
        # SLSQP clips trial points to the bounds and says so; harmless here
        warnings.simplefilter("ignore", RuntimeWarning)
        res = minimize(neg, np.array(z0, dtype=float), jac=True, method="SLSQP",
                       bounds=bounds, constraints=cons, options={"ftol": 1e-15, "maxiter": 1000})
    return res.x


@dataclass
class BoundConstants:
    q_hat: float
    C1_hat: float
    C2_hat: float
    C_y_hat: float
    C_prime_hat: float
    L_x_hat: float
    L_y_hat: float
    L_S_hat: float
    L_f_hat: float
    M_hat: float = float("nan")
    q_fit: float = float("nan")
    q_jac: float = float("nan")
    # L_S (Lbar_fy + L_fx): the composite constant with the undefined L_f_omega read as L_fx
    L_f_composite: float = float("nan")

    def as_dict(self):
        return asdict(self)


@dataclass
class VerifyRow:
    T: int
    itd_fd_abs_err: float
    itd_fd_rel_err: float
    prop1_bound: float
    lemma6_envelope_ok: bool
    prop1_status: str = "ok"


@dataclass
class OracleReport:
    x: np.ndarray
    itd_grad: np.ndarray
    fd_grad: np.ndarray
    abs_err: float
    rel_err: float
    constants: BoundConstants
    bound_satisfied: Dict[str, bool] = field(default_factory=dict)
    bound_status: Dict[str, str] = field(default_factory=dict)
    rows: List[VerifyRow] = field(default_factory=list)
    thm2: Dict[str, float] = field(default_factory=dict)
    notes: List[str] = field(default_factory=list)

    @property
    def hard_failure(self) -> bool:
        return any(s == "violated" for s in self.bound_status.values())


def judge(measured: float, bound: float, margin=BOUND_MARGIN) -> str:
    """``ok`` when the bound holds, ``warning`` within ``margin``, else ``violated``."""
    if measured <= bound:
        return "ok"
    if measured <= (1 + margin) * bound:
        return "warning"
    return "violated"


def _spectral(M) -> float:
    M = np.asarray(M, dtype=float)
    return float(np.linalg.norm(M, 2)) if np.all(np.isfinite(M)) else float("nan")


def _worst(statuses):
    order = {"ok": 0, "n/a": 0, "nonsmooth": 0, "warning": 1, "violated": 2}
    return max(statuses, key=order.__getitem__, default="ok")


def _outer_constants(instance, x, seed, n=64):
    """``M`` (largest ``||grad_y f||``), ``L_fx`` and ``Lbar_fy`` from samples."""
    rng = np.random.default_rng(seed)
    Ys = instance.set_y.sample(rng, n)
    Xs = instance.set_x.sample(rng, n)
    f = instance.outer
    M = max(np.linalg.norm(f.grad_y(y, xx)) for y, xx in zip(Ys, Xs))
    L_fx = L_fy_bar = 0.0
    for i in range(n - 1):
        dy = np.linalg.norm(Ys[i] - Ys[i + 1])
        dx = np.linalg.norm(Xs[i] - Xs[i + 1])
        if dy > 1e-12:
            L_fx = max(L_fx, np.linalg.norm(f.grad_x(Ys[i], Xs[i]) - f.grad_x(Ys[i + 1], Xs[i])) / dy)
        if dx > 1e-12:
            L_fy_bar = max(L_fy_bar,
                           np.linalg.norm(f.grad_y(Ys[i], Xs[i]) - f.grad_y(Ys[i], Xs[i + 1])) / dx)
    return float(M), float(L_fx), float(L_fy_bar)


def theorem2_bound(trace, consts: BoundConstants, phi0: float, T: int, f0: float,
                   f_best: float) -> float:
    """Right-hand side of the O(1/K) bound on ``min_k ||grad f(y*(x_k), x_k)||^2``."""
    K = len(trace.records) - 1
    beta, Lf = trace.beta, consts.L_f_hat
    denom = beta * (0.5 - beta * Lf) * K
    if K <= 0 or denom <= 0:
        return float("inf")
    q = consts.q_hat
    if q >= 1:
        return float("inf")
    w = beta / 2 + beta ** 2 * Lf
    rho = consts.C2_hat / (consts.C1_hat + consts.C2_hat) if consts.C1_hat > 0 else 1.0
    sr = np.sqrt(rho)
    inner_term = (Lf * (1 + consts.L_S_hat) * np.sqrt(max(phi0, 0) / consts.C1_hat) * w
                  / (1 - sr) * sr ** (T + 1)) if consts.C1_hat > 0 and sr < 1 else float("inf")
    itd_term = consts.M_hat * w * (
        (consts.L_x_hat + consts.L_y_hat * consts.C_prime_hat / (1 - q)) * consts.C_y_hat
        * q ** T * (T + 1) + consts.C_prime_hat / (1 - q) * q ** (T + 1))
    return float(max(f0 - f_best, 0.0) / denom + inner_term + itd_term)


def verify_bounds(instance: InstanceSpec, x, T_range, seed=0, h=FD_STEP,
                  outer_K: int | None = 50, outer_T: int = 30, jac_samples=64,
                  lipschitz_pairs=32) -> OracleReport:
    """Measure ITD errors for each ``T`` and test them against the bounds.

    The inner run starts from the projection of the origin onto ``Y``.
    ``q_hat`` is the larger of the fitted rate and the largest sampled
    ``||J_y||``.  The bound is checked in the spectral norm against the KKT
    implicit gradient, less a roundoff floor; instances without one fall back
    to the FD Jacobian with its ``h`` vs ``2h`` discrepancy as the floor.  The
    reported ``itd_fd_abs_err`` is the Frobenius distance to the FD Jacobian.  With
    ``outer_K`` set, an outer run from ``x`` checks the O(1/K) bound using
    reference gradients.
    """
    x = np.asarray(x, dtype=float)
    T_range = sorted(int(t) for t in T_range)
    if not T_range:
        raise InvalidInput("T_range is empty")
    notes = []
    y0 = instance.set_y.project(np.zeros(instance.dim_y))
    y_star = reference_solution(instance, x)
    T_max = max(T_range[-1], 5)
    state = solve_inner(instance, x, y0, T_max, None)

    try:
        rate = estimate_rate(state, y_star)
    except (DegenerateFit, InsufficientData) as exc:
        rate = None
        notes.append(f"rate fit skipped: {exc}")
    jc = sample_jacobian_constants(instance, x, jac_samples, seed)
    Lf, Ls = estimate_lipschitz(instance, lipschitz_pairs, seed)
    M, L_fx, L_fy_bar = _outer_constants(instance, x, seed)
    q_fit = rate.q_hat if rate else float("nan")
    q = max(jc.q, q_fit) if rate else jc.q
    consts = BoundConstants(
        q_hat=q, C1_hat=rate.C1_hat if rate else float("nan"),
        C2_hat=rate.C2_hat if rate else float("nan"),
        C_y_hat=max(jc.C_y, float(np.linalg.norm(y0 - y_star))), C_prime_hat=jc.C_prime,
        L_x_hat=jc.L_x, L_y_hat=jc.L_y, L_S_hat=Ls, L_f_hat=Lf, M_hat=M, q_fit=q_fit,
        q_jac=jc.q, L_f_composite=Ls * (L_fy_bar + L_fx))

    nan_grad = np.full((instance.dim_y, instance.dim_x), np.nan)
    try:
        fd = fd_implicit_gradient(instance, x, h)
    except NonsmoothNeighborhood as exc:
        notes.append(f"FD reference unavailable: {exc}")
        fd = nan_grad
    fd_norm = float(np.linalg.norm(fd))
    try:
        ref = kkt_implicit_gradient(instance, x, y_star)
        floor = ROUNDOFF * max(1.0, float(np.linalg.norm(ref)))
    except (UnsupportedAnalytic, NonsmoothNeighborhood) as exc:
        notes.append(f"bound checks use the FD reference: {exc}")
        ref = fd
        floor = (_spectral(fd - fd_implicit_gradient(instance, x, 2 * h))
                 if np.all(np.isfinite(fd)) else np.nan)
    if instance.jacobian_mode == "finite_difference" and q < 1 and np.isfinite(floor):
        # FD fixed-point Jacobians carry roundoff/h per entry, accumulated
        # through the contraction; the measured limit bias is a lower sanity value
        eps_J = ROUNDOFF * max(1.0, instance.set_y.norm_bound()) / FD_STEP
        _, lim = unrolled_solve(instance, x, y_star, REFERENCE_T, None)
        floor += max(_spectral(lim.grad_xy - ref),
                     eps_J * np.sqrt(instance.dim_y) * (1 + _spectral(ref)) / (1 - q))
    rows, prop_status, env_ok_all = [], [], True
    G = nan_grad
    for T in T_range:
        bound = implicit_gradient_bound(T, jc.L_x, jc.L_y, jc.C_prime, consts.C_y_hat, q)
        try:
            _, itd = unrolled_solve(instance, x, y0, T, None)
        except NonsmoothPoint as exc:
            notes.append(f"T={T}: {exc}")
            G = nan_grad
            status = "nonsmooth"
        else:
            G = itd.grad_xy
            measured = _spectral(G - ref) - floor
            status = judge(max(measured, 0.0), bound) if np.isfinite(measured) else "n/a"
        abs_err = float(np.linalg.norm(G - fd))
        env_ok = True
        if rate is not None:
            sub = state.__class__(y=state.iterates[min(T, state.t)], t=min(T, state.t),
                                  dgap_history=state.dgap_history[: T + 1],
                                  step_history=state.step_history[:T],
                                  iterates=state.iterates[: T + 1])
            env_ok, _, _ = envelope_check(sub, y_star, rate)
        env_ok_all &= env_ok
        prop_status.append(status)
        rows.append(VerifyRow(T, abs_err, abs_err / max(1e-12, fd_norm), bound, env_ok, status))

    report = OracleReport(x=x, itd_grad=G, fd_grad=fd, abs_err=rows[-1].itd_fd_abs_err,
                          rel_err=rows[-1].itd_fd_rel_err, constants=consts, rows=rows,
                          notes=notes)
    report.bound_status["lemma6"] = ("n/a" if rate is None else
                                     "ok" if env_ok_all else "violated")
    report.bound_status["prop1"] = _worst(prop_status)

    if outer_K:
        cfg = OuterConfig(K=outer_K, T=outer_T, track_true_grad=True, seed=seed,
                          lipschitz_pairs=lipschitz_pairs)
        trace = run(instance, x, cfg)
        if trace.error:
            notes.append(f"outer run stopped: {trace.error}")
        if trace.records and rate is not None:
            fvals = [reduced_objective(instance, r.x) for r in trace.records]
            phi0 = dgap(instance, instance.set_y.center(), trace.records[0].x,
                        DGapParams.of(instance))
            consts_run = BoundConstants(**{**consts.as_dict(), "L_f_hat": trace.L_f_hat})
            rhs = theorem2_bound(trace, consts_run, phi0, outer_T, fvals[0], min(fvals))
            lhs = trace.min_true_grad_norm_sq
            report.thm2 = {"min_grad_norm_sq": lhs, "bound": rhs,
                           "K": len(trace.records) - 1, "beta": trace.beta}
            report.bound_status["thm2"] = judge(lhs, rhs)
        else:
            report.bound_status["thm2"] = "n/a"
    report.bound_satisfied = {k: v != "violated" for k, v in report.bound_status.items()}
    return report
