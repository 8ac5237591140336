import numpy as np
import pytest

from vibilevel.errors import InvalidInput
from vibilevel.outer import (
    OuterConfig,
    auto_beta,
    estimate_lipschitz,
    run,
    step,
    true_hypergradient,
)
from vibilevel.problems import get_instance, make_nonconvex_outer, make_scalar_clamp

CLAMP = get_instance("scalar_clamp").spec


def test_stationary_point_is_fixed():
    x_next, rec = step(CLAMP, np.array([0.25]), OuterConfig(T=60, beta=0.1, inner_tol=None), y0=np.zeros(1))
    assert rec.hypergrad_norm_sq <= 1e-28
    assert x_next[0] == pytest.approx(0.25, abs=1e-15)


def test_single_step_value():
    x_next, _ = step(CLAMP, np.array([0.5]), OuterConfig(T=60, beta=0.1, inner_tol=None), y0=np.zeros(1))
    assert x_next[0] == pytest.approx(0.45, abs=1e-12)


def test_step_projects_onto_x():
    x_next, rec = step(CLAMP, np.array([0.5]), OuterConfig(T=60, beta=10.0, inner_tol=None), y0=np.zeros(1))
    assert x_next[0] == 0.0
    assert rec.mapping_norm_sq == pytest.approx(0.0025)


def test_step_needs_beta():
    with pytest.raises(InvalidInput):
        step(CLAMP, np.array([0.5]), OuterConfig())


def test_run_reaches_minimizer():
    trace = run(CLAMP, np.array([0.9]), OuterConfig(K=200, T=30, beta=0.1))
    assert trace.error is None and len(trace.records) == 201
    assert abs(trace.records[-1].x[0] - 0.25) <= 1e-4


def test_zero_iterations():
    trace = run(CLAMP, np.array([0.9]), OuterConfig(K=0, beta=0.1))
    assert len(trace.records) == 1 and trace.records[0].x[0] == 0.9


def test_iterates_stay_feasible():
    inst = make_nonconvex_outer(0).spec
    trace = run(inst, np.array([0.9, -0.9]), OuterConfig(K=60))
    assert all(inst.set_x.contains(r.x) for r in trace.records)


def test_auto_beta_keeps_descent_margin():
    Lf, Ls = estimate_lipschitz(CLAMP)
    beta = auto_beta(Lf)
    assert 0.5 - beta * Lf > 0
    assert Lf == pytest.approx(2.0, rel=1e-6) and Ls == pytest.approx(1.0, rel=1e-6)


def test_config_validation():
    with pytest.raises(InvalidInput):
        OuterConfig(T=0)
    with pytest.raises(InvalidInput):
        OuterConfig(beta=-1.0)
    with pytest.raises(InvalidInput):
        OuterConfig(oracle_every=-2)


def test_solver_error_returns_partial_trace():
    # at x = 1 the inner iterates reach y = 1 where u sits on the kink of the clamp
    trace = run(make_scalar_clamp(0.0, 2.0).spec, np.array([1.0]),
                OuterConfig(K=5, T=80, beta=0.5, inner_tol=None))
    assert trace.error is not None and "NonsmoothPoint" in trace.error
    assert "k=0" in trace.error and trace.records == []


def test_oracle_and_true_gradient_columns():
    trace = run(CLAMP, np.array([0.7]),
                OuterConfig(K=4, beta=0.1, oracle_every=2, track_true_grad=True, inner_tol=None))
    errs = [r.oracle_err for r in trace.records]
    assert errs[1] is None and errs[3] is None
    assert all(e <= 1e-8 for e in errs[::2])
    for r in trace.records:
        assert r.true_grad_norm_sq == pytest.approx(4 * (r.x[0] - 0.25) ** 2, abs=1e-12)


def test_warm_started_gradient():
    base = run(CLAMP, np.array([0.7]), OuterConfig(K=10, T=3, beta=0.1, inner_tol=None))
    warm = run(CLAMP, np.array([0.7]),
               OuterConfig(K=10, T=3, beta=0.1, inner_tol=None, warm_start_grad=True))
    # with G carried over the implicit gradient converges to 1 instead of 1 - 2^-3
    assert abs(warm.records[-1].grad_xy[0, 0] - 1) < abs(base.records[-1].grad_xy[0, 0] - 1)


def test_true_hypergradient_without_closed_form():
    inst = get_instance("polyhedral").spec
    x = np.array([0.1, 0.2])
    from vibilevel.oracle import fd_hypergradient

    np.testing.assert_allclose(true_hypergradient(inst, x), fd_hypergradient(inst, x), atol=1e-8)


def test_boundary_limit_has_vanishing_gradient_mapping():
    # seed 0 drives x_2 onto the face x_2 = -1, where grad f stays nonzero
    inst = make_nonconvex_outer(0).spec
    trace = run(inst, inst.set_x.center(), OuterConfig(K=300))
    assert trace.records[-1].x[1] == -1.0
    assert trace.min_grad_norm_sq > 1e-2
    assert trace.min_mapping_norm_sq < 1e-8


def test_interior_limit_is_stationary():
    inst = make_nonconvex_outer(4).spec
    trace = run(inst, inst.set_x.center(), OuterConfig(K=500))
    final = trace.records[-1]
    assert np.all(np.abs(final.x) < 1 - 1e-3)
    assert np.sqrt(final.hypergrad_norm_sq) <= 1e-3
