"""Acceptance criteria, one test each; every test prints a PASS/FAIL line.

The lines are also collected and repeated in the pytest terminal summary.
"""

import time

import numpy as np
import pytest

from conftest import ACCEPTANCE_LINES
from vibilevel.cli import main
from vibilevel.inner import estimate_rate, reference_solution, solve_inner, envelope_check
from vibilevel.itd import unrolled_solve
from vibilevel.merit import DGapParams
from vibilevel.model import Ball, Box, HalfspaceIntersection, InstanceSpec, Simplex
from vibilevel.oracle import (
    direct_skewed_maximize,
    fd_hypergradient,
    kkt_implicit_gradient,
    verify_bounds,
)
from vibilevel.outer import OuterConfig, itd_hypergradient, run
from vibilevel.merit import skewed_projection
from vibilevel.problems import affine_inner, all_entries, get_instance, tracking_objective

ENTRIES = all_entries()

# smallest nonconvex_outer seed whose run from the center of X ends in the
# interior of X; elsewhere the limit sits on a face where grad f does not vanish
INTERIOR_SEED = 4


def record(n, ok, detail, elapsed, limit=None):
    timing = f"{elapsed:.1f}s" + (f" (limit {limit}s)" if limit else "")
    line = f"criterion {n}: {'PASS' if ok else 'FAIL'} | {detail} | {timing}"
    ACCEPTANCE_LINES.append(line)
    print(line)
    assert ok, line


def test_criterion_1_fixed_point():
    t0 = time.perf_counter()
    worst = 0.0
    for e in ENTRIES:
        inst = e.spec
        if inst.known_solution is None:
            continue
        b = inst.dgap_b
        for x in inst.set_x.sample(np.random.default_rng(1), 100):
            y = reference_solution(inst, x)
            z = inst.set_y.project(y - inst.inner.eval(y, x) / b)
            worst = max(worst, float(np.linalg.norm(y - z)))
    dt = time.perf_counter() - t0
    record(1, worst <= 1e-9 and dt < 5, f"max ||y* - z*_b(y*)|| = {worst:.2e} <= 1e-9", dt, 5)


def _batched_dgap(inst, Y, x):
    p = DGapParams.of(inst)
    F = inst.inner.eval_batch(Y, x)
    out, Zb = np.zeros(len(Y)), None
    for c, sign in ((p.a, 1.0), (p.b, -1.0)):
        Z = inst.set_y.project_batch(Y - F / c)
        R = Y - Z
        out += sign * (np.einsum("ij,ij->i", F, R) - 0.5 * c * np.einsum("ij,ij->i", R, R))
        Zb = Z
    lower = 0.5 * (p.b - p.a) * np.sum((Y - Zb) ** 2, axis=1)
    return out, lower


def test_criterion_2_dgap_certificate():
    t0 = time.perf_counter()
    rng = np.random.default_rng(2)
    n_points, min_phi, min_margin, max_at_sol = 0, np.inf, np.inf, 0.0
    per_instance = 10_000 // len(ENTRIES)
    for e in ENTRIES:
        inst = e.spec
        for x in inst.set_x.sample(rng, per_instance // 100):
            Y = inst.set_y.sample(rng, 100)
            phi, lower = _batched_dgap(inst, Y, x)
            n_points += len(Y)
            min_phi = min(min_phi, phi.min())
            min_margin = min(min_margin, (phi - lower).min())
            y_star = reference_solution(inst, x)
            max_at_sol = max(max_at_sol, _batched_dgap(inst, y_star[None, :], x)[0][0])
    dt = time.perf_counter() - t0
    ok = (n_points >= 10_000 and min_phi >= -1e-10 and min_margin >= -1e-10
          and max_at_sol <= 1e-8 and dt < 10)
    record(2, ok, f"{n_points} points: min phi = {min_phi:.2e}, min(phi - lower) = "
                  f"{min_margin:.2e}, max phi(y*) = {max_at_sol:.2e}", dt, 10)


def test_criterion_3_inner_rate():
    t0 = time.perf_counter()
    clamp = get_instance("scalar_clamp").spec
    st = solve_inner(clamp, np.array([0.5]), np.array([0.0]), 50, tol=None)
    rate = estimate_rate(st, np.array([0.5]))
    env_clamp, _, _ = envelope_check(st, np.array([0.5]), rate)
    box = get_instance("affine_box").spec
    env_box = True
    for x in box.set_x.sample(np.random.default_rng(3), 10):
        sb = solve_inner(box, x, box.set_y.project(np.zeros(2)), 50, tol=None)
        y_star = reference_solution(box, x)
        ok_x, _, _ = envelope_check(sb, y_star, estimate_rate(sb, y_star))
        env_box &= ok_x
    dt = time.perf_counter() - t0
    ok = abs(rate.q_hat - 0.5) <= 0.01 and env_clamp and env_box and dt < 5
    record(3, ok, f"q_hat = {rate.q_hat:.6f}, clamp envelope {env_clamp}, "
                  f"affine_box envelope {env_box}", dt, 5)


def _log_slope(errs, floor):
    # the converged error at the last T is the attainable floor (FD-mode
    # Jacobians settle well above roundoff); fit only the decay above it
    floor = max(floor, errs[-1])
    T = np.arange(1, len(errs) + 1)
    keep = errs > 100 * floor
    return np.polyfit(T[keep], np.log(errs[keep]), 1)[0]


def test_criterion_4_itd_exactness():
    t0 = time.perf_counter()
    clamp = get_instance("scalar_clamp").spec
    exact = max(abs(abs(unrolled_solve(clamp, [0.5], np.zeros(1), T)[1].grad_xy[0, 0] - 1)
                    - 2.0 ** -T) for T in range(1, 31))
    details, ok = [f"clamp |err - 2^-T| <= {exact:.1e}"], exact <= 1e-9
    for e in ENTRIES:
        inst = e.spec
        x = inst.set_x.center() + 0.1
        rep = verify_bounds(inst, x, range(1, 51), outer_K=None)
        rel40 = next(r.itd_fd_rel_err for r in rep.rows if r.T == 40)
        ref = kkt_implicit_gradient(inst, x)
        y0 = inst.set_y.project(np.zeros(inst.dim_y))
        errs = np.array([np.linalg.norm(unrolled_solve(inst, x, y0, T)[1].grad_xy - ref, 2)
                         for T in range(1, 51)])
        slope = _log_slope(errs, 1e-15 * max(1.0, np.linalg.norm(ref)))
        q = rep.constants.q_fit
        dominated = all(r.prop1_status == "ok" for r in rep.rows)
        inst_ok = rel40 <= 1e-5 and slope <= np.log(q) + 0.05 and dominated
        ok &= inst_ok
        details.append(f"{e.name}{inst.dim_y}: rel_err(40)={rel40:.1e}, slope={slope:.3f} "
                       f"vs log q+0.05={np.log(q) + 0.05:.3f}, prop1 {'ok' if dominated else 'NO'}")
    dt = time.perf_counter() - t0
    record(4, ok and dt < 60, "; ".join(details), dt, 60)


def _smooth_at(inst, x, h):
    pattern = inst.set_y.activity(reference_solution(inst, x))
    for j in range(inst.dim_x):
        for s in (-2 * h, 2 * h):
            xx = x.copy()
            xx[j] += s
            if inst.set_y.activity(reference_solution(inst, xx)) != pattern:
                return False
    return True


def test_criterion_5_hypergradient_oracle():
    t0 = time.perf_counter()
    worst, details = 0.0, []
    for e in ENTRIES:
        inst = e.spec
        rng = np.random.default_rng(5)
        c = inst.set_x.center()
        checked, inst_worst = 0, 0.0
        while checked < 50:
            x = c + 0.95 * (inst.set_x.sample(rng, 1)[0] - c)
            if not _smooth_at(inst, x, 1e-5):
                continue
            g, _, _ = itd_hypergradient(inst, x, 60, inst.set_y.center())
            fd = fd_hypergradient(inst, x)
            inst_worst = max(inst_worst, np.linalg.norm(g - fd) / np.linalg.norm(fd))
            checked += 1
        worst = max(worst, inst_worst)
        details.append(f"{e.name}{inst.dim_y}: {inst_worst:.1e}")
    dt = time.perf_counter() - t0
    record(5, worst <= 1e-5 and dt < 60, "max rel_err " + ", ".join(details), dt, 60)


def test_criterion_6_outer_rate(tmp_path):
    t0 = time.perf_counter()
    cfg = tmp_path / "sweep.cfg"
    cfg.write_text(f"instance: nonconvex_outer\nseed: {INTERIOR_SEED}\nT: 30\nbeta: auto\n"
                   "sweep_axis: K\nsweep_values: 50, 100, 200, 400\n")
    out = tmp_path / "sweep.csv"
    assert main(["sweep", "--config", str(cfg), "--out", str(out), "--quiet"]) == 0
    data = np.loadtxt(out, delimiter=",", skiprows=1)
    K, min_g, product = data[:, 0], data[:, 1], data[:, 2]

    inst = get_instance("nonconvex_outer", INTERIOR_SEED).spec
    final = run(inst, inst.set_x.center(), OuterConfig(K=400, T=30)).records[-1].x
    interior = bool(np.all(np.abs(final) < 1 - 1e-3))
    # O(1/K): K * min ||g||^2 never climbs above twice its K = 50 value
    bounded = bool(np.all(product <= 2 * product[0]))
    spread = product.max() / product.min()
    dt = time.perf_counter() - t0
    ok = interior and bounded and min_g[-1] <= 1e-4 and dt < 120
    record(6, ok, "K*min||g||^2 = " + ", ".join(f"{k:.0f}:{p:.2e}" for k, p in zip(K, product))
           + f" (max/min {spread:.1e}); min||g||^2 at K=400 = {min_g[-1]:.2e}; "
             f"limit x = {np.round(final, 4).tolist()} interior={interior}", dt, 120)


def _random_set(rng, kind, n):
    if kind == "box":
        lo = rng.uniform(-1, 0, n)
        return Box(lo, lo + rng.uniform(0.2, 2, n))
    if kind == "ball":
        return Ball(rng.uniform(-1, 1, n), rng.uniform(0.3, 2))
    if kind == "simplex":
        return Simplex(n)
    m = rng.integers(1, 4)
    A = np.vstack([np.eye(n), -np.eye(n), rng.normal(size=(m, n))])
    b = np.concatenate([np.ones(2 * n), rng.uniform(0.2, 1.0, m)])
    return HalfspaceIntersection(A, b, enclosing_box=Box.cube(n, -1, 1),
                                 feasible_point=np.zeros(n))


def test_criterion_7_skewed_projection():
    t0 = time.perf_counter()
    rng = np.random.default_rng(7)
    worst_proj, worst_direct, count = 0.0, 0.0, 0
    for i in range(1000):
        kind = ("box", "ball", "simplex", "polyhedron")[i % 4]
        n = int(rng.integers(1, 5)) if kind != "simplex" else int(rng.integers(2, 5))
        S = _random_set(rng, kind, n)
        M = rng.normal(size=(n, n))
        Q = M @ M.T + 0.5 * np.eye(n)
        m = int(rng.integers(1, 4))
        inst = InstanceSpec(affine_inner(Q, rng.normal(size=(n, m)), rng.normal(size=n)),
                            tracking_objective(np.zeros(n)), S, Box.cube(m, -1, 1))
        y = S.sample(rng, 1)[0]
        x = rng.uniform(-1, 1, m)
        c = float(rng.uniform(0.5, 5.0))
        z = skewed_projection(inst, y, x, c).z
        natural = S.project(y - inst.inner.eval(y, x) / c)
        direct = direct_skewed_maximize(inst, y, x, c)
        worst_proj = max(worst_proj, float(np.abs(z - natural).max()))
        worst_direct = max(worst_direct, float(np.abs(z - direct).max()))
        count += 1
    dt = time.perf_counter() - t0
    ok = worst_proj <= 1e-6 and worst_direct <= 1e-6 and dt < 30
    record(7, ok, f"{count} instances: max |z - P(y - F/c)| = {worst_proj:.1e}, "
                  f"max |z - direct| = {worst_direct:.1e}", dt, 30)


def test_criterion_8_determinism(tmp_path):
    t0 = time.perf_counter()
    cfg = tmp_path / "run.cfg"
    cfg.write_text("instance: nonconvex_outer\nK: 40\nT: 20\nbeta: auto\noracle_every: 10\n"
                   "seed: 3\n")
    outs = []
    for tag in ("a", "b"):
        out = tmp_path / f"{tag}.csv"
        assert main(["run", "--config", str(cfg), "--out", str(out), "--quiet"]) == 0
        outs.append(out.read_bytes())
    dt = time.perf_counter() - t0
    record(8, outs[0] == outs[1], f"two runs, {len(outs[0])} bytes each, identical="
                                  f"{outs[0] == outs[1]}", dt)
