"""Fixed-point solver for the inner VI and a posteriori rate estimates."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import List, Optional

import numpy as np

from .errors import DegenerateFit, Diverged, InsufficientData, InvalidInput, NumericalFailure
from .merit import DGapParams, evaluate_dgap
from .model import InstanceSpec

DEFAULT_TOL = 1e-12
REFERENCE_T = 200
DIVERGENCE_RUN = 10
# below these the log-fit and constant ratios are dominated by roundoff
ERROR_FLOOR = 1e-13
STEP_FLOOR = 1e-9
# distances this small relative to ||y*|| are not resolvable in double precision
ROUNDOFF = 8 * np.finfo(float).eps


@dataclass
class InnerState:
    """Iterates of ``y_{t+1} = z*_b(y_t, x)``.

    ``dgap_history[t]`` is the D-gap at ``iterates[t]``; ``step_history[t]`` is
    ``||iterates[t+1] - iterates[t]||``.
    """

    y: np.ndarray
    t: int = 0
    dgap_history: List[float] = field(default_factory=list)
    step_history: List[float] = field(default_factory=list)
    iterates: List[np.ndarray] = field(default_factory=list)


@dataclass(frozen=True)
class RateEstimate:
    q_hat: float
    C1_hat: float
    C2_hat: float
    delta_hat: float
    r_squared: float

    @property
    def rho(self):
        """Per-step D-gap contraction ``C2 / (C1 + C2)``."""
        return self.C2_hat / (self.C1_hat + self.C2_hat)


def solve_inner(instance: InstanceSpec, x, y0, T: int, tol: Optional[float] = DEFAULT_TOL,
                params: DGapParams | None = None) -> InnerState:
    """Run at most ``T`` fixed-point steps from ``y0``.

    Stops as soon as the D-gap is ``<= tol``; ``tol=None`` always runs all
    ``T`` steps.

    Raises:
        NumericalFailure: an iterate or D-gap value is not finite.
        Diverged: the step length grew for ``DIVERGENCE_RUN`` consecutive steps.
    """
    if T < 1:
        raise InvalidInput("T must be >= 1")
    params = params or DGapParams.of(instance)
    x = np.asarray(x, dtype=float)
    y = np.asarray(y0, dtype=float)
    if y.shape != (instance.dim_y,):
        raise InvalidInput("y0 has the wrong dimension")

    phi, zb = evaluate_dgap(instance, y, x, params)
    state = InnerState(y=y, dgap_history=[phi], iterates=[y])
    if tol is not None and phi <= tol:
        return state
    rising = 0
    for t in range(1, T + 1):
        step = float(np.linalg.norm(zb - y))
        y = zb
        phi, zb = evaluate_dgap(instance, y, x, params)
        if not (np.all(np.isfinite(y)) and np.isfinite(phi)):
            raise NumericalFailure(f"non-finite inner iterate at t={t}")
        if state.step_history and step > state.step_history[-1]:
            rising += 1
            if rising >= DIVERGENCE_RUN:
                raise Diverged(f"inner step length increased {DIVERGENCE_RUN} times in a row")
        else:
            rising = 0
        state.step_history.append(step)
        state.dgap_history.append(phi)
        state.iterates.append(y)
        state.y = y
        state.t = t
        if tol is not None and phi <= tol:
            break
    return state


def reference_solution(instance: InstanceSpec, x, y0=None) -> np.ndarray:
    """``y*(x)`` from the closed form when available, else an over-solved run."""
    x = np.asarray(x, dtype=float)
    if instance.known_solution is not None:
        return np.asarray(instance.known_solution.y_star_fn(x), dtype=float)
    return over_solve(instance, x, y0)


def over_solve(instance: InstanceSpec, x, y0=None, T=REFERENCE_T) -> np.ndarray:
    """Run ``T`` steps with no early stop.

    A D-gap threshold is not used here because the D-gap is quadratic in the
    distance to ``y*``: ``phi <= 1e-14`` still leaves ``||y - y*|| ~ 1e-7``.
    """
    if y0 is None:
        y0 = instance.set_y.center()
    return solve_inner(instance, x, y0, T, None).y


def estimate_rate(state: InnerState, y_star) -> RateEstimate:
    """Fit the R-linear rate and the descent constants of a finished run.

    ``q_hat`` is ``exp`` of the least-squares slope of ``log ||y_t - y*||``
    against ``t`` over the iterates whose error is above ``ERROR_FLOOR``.
    ``C1_hat`` and ``C2_hat`` are the extreme per-step ratios
    ``(phi_t - phi_{t+1}) / s_t^2`` and ``phi_{t+1} / s_t^2`` over steps
    longer than ``STEP_FLOOR``; ``delta_hat`` is the longest step.
    """
    y_star = np.asarray(y_star, dtype=float)
    errs = np.array([np.linalg.norm(y - y_star) for y in state.iterates])
    if np.all(errs < 1e-14):
        raise DegenerateFit("every iterate already equals the reference solution")
    below = np.nonzero(errs <= ERROR_FLOOR)[0]
    window = np.arange(below[0] if below.size else errs.size)
    if window.size < 5:
        raise InsufficientData(f"only {window.size} usable iterates for the rate fit")
    logs = np.log(errs[window])
    slope, intercept = np.polyfit(window.astype(float), logs, 1)
    fitted = slope * window + intercept
    ss_res = float(np.sum((logs - fitted) ** 2))
    ss_tot = float(np.sum((logs - logs.mean()) ** 2))
    r2 = 1.0 - ss_res / ss_tot if ss_tot > 0 else 1.0

    phi = np.asarray(state.dgap_history)
    steps = np.asarray(state.step_history)
    use = np.nonzero(steps > STEP_FLOOR)[0]
    if use.size == 0:
        raise InsufficientData("no step is long enough to estimate C1/C2")
    s2 = steps[use] ** 2
    C1 = float(np.min((phi[use] - phi[use + 1]) / s2))
    C2 = float(np.max(phi[use + 1] / s2))
    return RateEstimate(q_hat=float(np.exp(slope)), C1_hat=C1, C2_hat=C2,
                        delta_hat=float(steps.max()), r_squared=r2)


def rlinear_envelope(rate: RateEstimate, phi0: float, ts) -> np.ndarray:
    """``sqrt(phi0/C1) / (1 - sqrt(rho)) * rho^(t/2)`` at each ``t``."""
    ts = np.asarray(ts, dtype=float)
    if rate.C1_hat <= 0:
        return np.full(ts.shape, np.inf)
    sr = np.sqrt(rate.rho)
    return np.sqrt(max(phi0, 0.0) / rate.C1_hat) / (1.0 - sr) * sr ** ts


def envelope_check(state: InnerState, y_star, rate: RateEstimate):
    """Pointwise comparison of ``||y_t - y*||`` with the R-linear envelope.

    The comparison allows ``ROUNDOFF * max(1, ||y*||)`` on top of the
    envelope: once the iterates settle on the floating-point fixed point the
    envelope keeps shrinking but the error cannot.

    Returns ``(ok, errors, envelope)``.
    """
    y_star = np.asarray(y_star, dtype=float)
    errs = np.array([np.linalg.norm(y - y_star) for y in state.iterates])
    env = rlinear_envelope(rate, state.dgap_history[0], np.arange(errs.size))
    slack = ROUNDOFF * max(1.0, float(np.linalg.norm(y_star)))
    return bool(np.all(errs <= env + slack)), errs, env
