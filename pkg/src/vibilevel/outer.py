"""Projected hypergradient descent on the outer variable.

Each outer step warm-starts the inner iteration at the previous ``y_T``,
runs ``T`` fixed-point steps with the implicit-gradient recursion alongside,
assembles the hypergradient and takes ``x <- P_X(x - beta g)``.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from typing import List, Optional

import numpy as np

from .errors import InvalidInput, NonsmoothPoint, VIError
from .inner import REFERENCE_T, reference_solution
from .itd import hypergradient, unrolled_solve
from .model import InstanceSpec

log = logging.getLogger(__name__)

STOP_GRAD_SQ = 1e-16


@dataclass(frozen=True)
class OuterConfig:
    """Outer-loop settings.

    ``beta=None`` picks ``0.9 / (2 L_f_hat)`` from a sampling pass so that
    ``1/2 - beta L_f_hat > 0``.
    """

    K: int = 100
    T: int = 30
    beta: Optional[float] = None
    inner_tol: Optional[float] = 1e-12
    oracle_every: int = 0
    warm_start_grad: bool = False
    early_stop: bool = False
    track_true_grad: bool = False
    jacobian_mode: Optional[str] = None
    lipschitz_pairs: int = 32
    seed: int = 0

    def __post_init__(self):
        if self.K < 0 or self.T < 1:
            raise InvalidInput("need K >= 0 and T >= 1")
        if self.beta is not None and not self.beta > 0:
            raise InvalidInput("beta must be positive")
        if self.oracle_every < 0:
            raise InvalidInput("oracle_every must be >= 0")


@dataclass(eq=False)
class OuterRecord:
    k: int
    x: np.ndarray
    f_value: float
    hypergrad_norm_sq: float
    dgap_final: float
    inner_iters_used: int
    oracle_err: Optional[float] = None
    true_grad_norm_sq: Optional[float] = None
    hypergrad: Optional[np.ndarray] = None
    y: Optional[np.ndarray] = None
    grad_xy: Optional[np.ndarray] = None
    # ||(x - P_X(x - beta g)) / beta||^2, zero at constrained stationary points
    mapping_norm_sq: Optional[float] = None


@dataclass(eq=False)
class RunTrace:
    records: List[OuterRecord] = field(default_factory=list)
    beta: float = float("nan")
    L_f_hat: float = float("nan")
    L_S_hat: float = float("nan")
    error: Optional[str] = None

    @property
    def min_grad_norm_sq(self) -> float:
        return min((r.hypergrad_norm_sq for r in self.records), default=float("nan"))

    @property
    def min_true_grad_norm_sq(self) -> float:
        vals = [r.true_grad_norm_sq for r in self.records if r.true_grad_norm_sq is not None]
        return min(vals, default=float("nan"))

    @property
    def min_mapping_norm_sq(self) -> float:
        vals = [r.mapping_norm_sq for r in self.records if r.mapping_norm_sq is not None]
        return min(vals, default=float("nan"))


def itd_hypergradient(instance: InstanceSpec, x, T, y0=None, tol=None, mode=None, grad0=None):
    """Hypergradient after ``T`` unrolled steps; returns ``(g, inner, itd)``."""
    if y0 is None:
        y0 = instance.set_y.center()
    inner, itd = unrolled_solve(instance, x, y0, T, tol, mode, grad0)
    return hypergradient(instance, inner.y, x, itd.grad_xy), inner, itd


def reduced_objective(instance: InstanceSpec, x) -> float:
    """``f(y*(x), x)`` with the reference inner solution."""
    x = np.asarray(x, dtype=float)
    return float(instance.outer.eval(reference_solution(instance, x), x))


def true_hypergradient(instance: InstanceSpec, x, mode=None) -> np.ndarray:
    """Hypergradient at the reference ``y*(x)``.

    Uses the closed-form implicit gradient when the instance has one and
    ``REFERENCE_T`` recursion steps at the fixed point otherwise.
    """
    x = np.asarray(x, dtype=float)
    y_star = reference_solution(instance, x)
    known = instance.known_solution
    if known is not None and known.implicit_grad_fn is not None:
        G = np.asarray(known.implicit_grad_fn(x), dtype=float)
    else:
        _, itd = unrolled_solve(instance, x, y_star, REFERENCE_T, None, mode)
        G = itd.grad_xy
    return hypergradient(instance, y_star, x, G)


def estimate_lipschitz(instance: InstanceSpec, n_pairs=32, seed=0, T=50, radius=1e-2,
                       mode=None):
    """Sample ``L_f`` (hypergradient) and ``L_S`` (solution map) over ``X``.

    Each pair is a uniform point of ``X`` and a neighbour at distance
    ``radius * (norm bound of X)`` along a random direction, projected back
    onto ``X``.  Pairs touching a nonsmooth point are dropped.

    Returns:
        ``(L_f_hat, L_S_hat)``.
    """
    rng = np.random.default_rng(seed)
    X = instance.set_x
    r = radius * max(X.norm_bound(), 1.0)
    T = max(T, 50)
    Lf = Ls = 0.0
    for x1 in X.sample(rng, n_pairs):
        d = rng.standard_normal(X.dim)
        x2 = X.project(x1 + r * d / np.linalg.norm(d))
        dx = np.linalg.norm(x1 - x2)
        if dx < 1e-12:
            continue
        try:
            g1, s1, _ = itd_hypergradient(instance, x1, T, mode=mode)
            g2, s2, _ = itd_hypergradient(instance, x2, T, mode=mode)
        except NonsmoothPoint:
            continue
        Lf = max(Lf, np.linalg.norm(g1 - g2) / dx)
        Ls = max(Ls, np.linalg.norm(s1.y - s2.y) / dx)
    return float(Lf), float(Ls)


def auto_beta(L_f_hat: float) -> float:
    return 0.9 / (2.0 * max(L_f_hat, 1e-12))


def evaluate(instance: InstanceSpec, x, config: OuterConfig, y0=None, grad0=None,
             k=0) -> OuterRecord:
    """Inner solve, implicit gradient and hypergradient at ``x``."""
    x = np.asarray(x, dtype=float)
    if y0 is None:
        y0 = instance.set_y.center()
    y0 = instance.set_y.project(y0)
    g, inner, itd = itd_hypergradient(instance, x, config.T, y0, config.inner_tol,
                                      config.jacobian_mode, grad0)
    rec = OuterRecord(
        k=k, x=x, f_value=float(instance.outer.eval(inner.y, x)),
        hypergrad_norm_sq=float(g @ g), dgap_final=float(inner.dgap_history[-1]),
        inner_iters_used=inner.t, hypergrad=g, y=inner.y, grad_xy=itd.grad_xy)
    if config.oracle_every and k % config.oracle_every == 0:
        from .oracle import fd_hypergradient

        rec.oracle_err = float(np.linalg.norm(g - fd_hypergradient(instance, x)))
    if config.track_true_grad:
        gt = true_hypergradient(instance, x, config.jacobian_mode)
        rec.true_grad_norm_sq = float(gt @ gt)
    return rec


def step(instance: InstanceSpec, x_k, config: OuterConfig, y0=None, grad0=None, k=0,
         beta: float | None = None):
    """One outer iteration; returns ``(x_next, record)``.

    ``beta`` overrides ``config.beta``; one of them must be set.
    """
    beta = config.beta if beta is None else beta
    if beta is None:
        raise InvalidInput("step needs an explicit beta; run() resolves 'auto'")
    rec = evaluate(instance, x_k, config, y0, grad0, k)
    x_next = instance.set_x.project(rec.x - beta * rec.hypergrad)
    rec.mapping_norm_sq = float(np.sum((rec.x - x_next) ** 2)) / beta ** 2
    return x_next, rec


def run(instance: InstanceSpec, x0, config: OuterConfig) -> RunTrace:
    """Run ``K`` outer steps from ``x0`` and record every iterate ``x_0..x_K``.

    A solver error ends the run early; the partial trace carries the message
    in ``error`` and the offending iterate as its last record's ``x`` when
    that record could be formed.
    """
    x = instance.set_x.project(np.asarray(x0, dtype=float))
    Lf, Ls = estimate_lipschitz(instance, config.lipschitz_pairs, config.seed, config.T,
                                mode=config.jacobian_mode)
    beta = config.beta if config.beta is not None else auto_beta(Lf)
    if config.beta is None:
        log.info("beta=auto: L_f_hat=%.6g, beta=%.6g", Lf, beta)
    trace = RunTrace(beta=beta, L_f_hat=Lf, L_S_hat=Ls)
    y = instance.set_y.center()
    grad0 = None
    for k in range(config.K + 1):
        try:
            rec = evaluate(instance, x, config, y, grad0, k)
        except VIError as exc:
            trace.error = f"{type(exc).__name__} at k={k}, x={x.tolist()}: {exc}"
            log.warning(trace.error)
            break
        x_next = instance.set_x.project(x - beta * rec.hypergrad)
        rec.mapping_norm_sq = float(np.sum((x - x_next) ** 2)) / beta ** 2
        trace.records.append(rec)
        if config.early_stop and rec.hypergrad_norm_sq <= STOP_GRAD_SQ:
            break
        if k == config.K:
            break
        x = x_next
        y = rec.y
        grad0 = rec.grad_xy if config.warm_start_grad else None
    return trace
