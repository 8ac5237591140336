import numpy as np
import pytest

from conftest import linear_instance
from vibilevel.errors import InvalidInput, NonsmoothNeighborhood, UnsupportedDimension
from vibilevel.inner import solve_inner
from vibilevel.itd import unrolled_solve
from vibilevel.model import Ball, Box, InstanceSpec
from vibilevel.oracle import (
    direct_skewed_maximize,
    fd_hypergradient,
    fd_implicit_gradient,
    grid_vi_solve,
    judge,
    kkt_implicit_gradient,
    verify_bounds,
)
from vibilevel.problems import (
    affine_inner,
    all_entries,
    get_instance,
    make_affine_box,
    make_scalar_clamp,
    tracking_objective,
)

WIDE_CLAMP = make_scalar_clamp(0.0, 2.0).spec


class TestFiniteDifferenceOracle:
    def test_interior(self):
        assert fd_implicit_gradient(WIDE_CLAMP, [0.5])[0, 0] == pytest.approx(1.0, abs=1e-6)

    def test_clamped(self):
        assert abs(fd_implicit_gradient(WIDE_CLAMP, [1.5])[0, 0]) <= 1e-8

    def test_linear(self):
        G = fd_implicit_gradient(linear_instance(), [0.8, 1.2])
        np.testing.assert_allclose(G, 0.5 * np.eye(2), atol=1e-6)

    def test_kink_neighbourhood(self):
        with pytest.raises(NonsmoothNeighborhood):
            fd_implicit_gradient(WIDE_CLAMP, [1.0])

    def test_reduced_objective_gradient(self):
        g = fd_hypergradient(WIDE_CLAMP, [0.5])
        assert g[0] == pytest.approx(0.5, abs=1e-8)


class TestKKT:
    @pytest.mark.parametrize("seed", range(4))
    def test_matches_enumeration(self, seed):
        inst = make_affine_box(3, seed).spec
        for x in inst.set_x.sample(np.random.default_rng(seed), 10):
            try:
                G = kkt_implicit_gradient(inst, x)
            except NonsmoothNeighborhood:
                continue
            np.testing.assert_allclose(G, inst.known_solution.implicit_grad_fn(x), atol=1e-12)

    def test_polyhedral_face(self):
        inst = get_instance("polyhedral").spec
        x = np.array([0.1, 0.2])
        np.testing.assert_allclose(kkt_implicit_gradient(inst, x), fd_implicit_gradient(inst, x),
                                   atol=1e-8)

    def test_ball_interior(self):
        Q = np.array([[2.0, 0.5], [0.5, 1.0]])
        inst = InstanceSpec(affine_inner(Q, -np.eye(2), np.zeros(2)),
                            tracking_objective(np.zeros(2)), Ball([0.0, 0.0], 5.0), Box.cube(2))
        np.testing.assert_allclose(kkt_implicit_gradient(inst, [0.2, 0.3]), np.linalg.inv(Q),
                                   atol=1e-12)


class TestGrid:
    def test_clamp_interior(self):
        assert grid_vi_solve(WIDE_CLAMP, [0.5])[0] == pytest.approx(0.5, abs=1e-3)

    def test_clamp_boundary(self):
        assert grid_vi_solve(WIDE_CLAMP, [2.0])[0] == pytest.approx(1.0, abs=1e-3)

    @pytest.mark.parametrize("entry", [e for e in all_entries() if isinstance(e.spec.set_y, Box)],
                             ids=lambda e: f"{e.name}{e.spec.dim_y}")
    def test_agrees_with_fixed_point(self, entry):
        inst = entry.spec
        res = 1001 if inst.dim_y <= 2 else 101
        for x in inst.set_x.sample(np.random.default_rng(7), 3):
            y_fp = solve_inner(inst, x, inst.set_y.center(), 200).y
            assert np.abs(grid_vi_solve(inst, x, res) - y_fp).max() <= 2.0 / res

    def test_dimension_limit(self):
        inst = make_affine_box(4, 0).spec
        with pytest.raises(UnsupportedDimension):
            grid_vi_solve(inst, np.zeros(4))

    def test_polyhedron_rejected(self):
        with pytest.raises(InvalidInput):
            grid_vi_solve(get_instance("polyhedral").spec, np.zeros(2))


def test_direct_maximizer_on_box():
    inst = get_instance("affine_box").spec
    y, x = np.array([0.2, 0.9]), np.array([0.4, -0.7])
    z = direct_skewed_maximize(inst, y, x, 2.0)
    np.testing.assert_allclose(z, inst.set_y.project(y - inst.inner.eval(y, x) / 2.0), atol=1e-8)


def test_judge_margin():
    assert judge(1.0, 1.0) == "ok"
    assert judge(1.04, 1.0) == "warning"
    assert judge(1.06, 1.0) == "violated"


class TestVerify:
    def test_clamp_rows(self):
        rep = verify_bounds(get_instance("scalar_clamp").spec, [0.5], range(1, 31), outer_K=None)
        for row in rep.rows:
            assert row.itd_fd_abs_err == pytest.approx(2.0 ** -row.T, abs=1e-9)
            assert row.prop1_bound >= row.itd_fd_abs_err
        assert rep.bound_status == {"lemma6": "ok", "prop1": "ok"}

    def test_nonsmooth_point_flags_rows(self):
        rep = verify_bounds(WIDE_CLAMP, [1.0], [1, 2, 80], outer_K=None)
        assert [r.T for r in rep.rows] == [1, 2, 80]
        assert rep.rows[-1].prop1_status == "nonsmooth"
        assert np.isnan(rep.rows[0].itd_fd_abs_err)
        assert not rep.hard_failure

    def test_polyhedral_fd_mode(self):
        inst = get_instance("polyhedral").spec
        x = np.array([0.1, 0.2])
        rep = verify_bounds(inst, x, [40], outer_K=None)
        assert rep.rel_err <= 1e-4
        assert rep.bound_status["prop1"] == "ok"

    def test_theorem_check(self):
        rep = verify_bounds(get_instance("affine_box").spec, [0.2, -0.1], [5, 10], outer_K=30)
        assert rep.bound_status["thm2"] == "ok"
        assert rep.thm2["min_grad_norm_sq"] <= rep.thm2["bound"]

    def test_empty_range(self):
        with pytest.raises(InvalidInput):
            verify_bounds(WIDE_CLAMP, [0.5], [])


def test_itd_limit_is_independent_of_start():
    inst = get_instance("affine_box").spec
    x = np.array([0.3, 0.3])
    _, a = unrolled_solve(inst, x, np.zeros(2), 80)
    _, b = unrolled_solve(inst, x, np.ones(2), 80)
    np.testing.assert_allclose(a.grad_xy, b.grad_xy, atol=1e-14)
