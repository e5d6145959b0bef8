import numpy as np
import pytest
from scipy.optimize import minimize

from oracles import kinetic_objective
from otbb.fvmodel import FVModel, build_grid_mesh
from otbb.means import SymmetricMean
from otbb.measures import GenericMeasure, w2_1d_quantile
from otbb.solver import (AffineProjector, SolverOptions, kkt_report, prox_kinetic,
                         prox_kinetic_mean, prox_kinetic_reference, solve)
from otbb.timedisc import assemble, continuity_residual
from otbb.trimodel import TriModel, build_flat_mesh


def test_prox_matches_vectorized_reference():
    rng = np.random.default_rng(5)
    st, mt = rng.uniform(-3, 3, 2000), rng.normal(size=(2000, 2))
    gamma, w = rng.uniform(0.01, 10, 2000), rng.uniform(0.1, 5, 2000)
    s, m = prox_kinetic(st, mt, gamma, w)
    s2, m2 = prox_kinetic_reference(st, mt, gamma, w)
    np.testing.assert_allclose(s, s2, rtol=1e-12, atol=1e-14)
    np.testing.assert_allclose(m, m2, rtol=1e-12, atol=1e-14)


def test_prox_void_region():
    # s~ + m~^2 / (2 gamma w) <= 0 maps to the origin
    s, m = prox_kinetic(np.array([-1.0, -0.5]), np.array([0.8, 0.5]), 0.4, 1.0)
    np.testing.assert_array_equal(s, 0.0)
    np.testing.assert_array_equal(m, 0.0)


def test_prox_beats_perturbations():
    rng = np.random.default_rng(6)
    st, mt = rng.uniform(-1, 2, 300), rng.normal(size=300)
    gamma = rng.uniform(0.1, 3, 300)
    s, m = prox_kinetic(st, mt, gamma, 1.0)
    base = kinetic_objective(s, m, st, mt, gamma, 1.0)
    for _ in range(20):
        ds, dm = 1e-4 * rng.normal(size=(2, 300))
        other = kinetic_objective(np.maximum(s + ds, 0), m + dm, st, mt, gamma, 1.0)
        assert np.all(other >= base - 1e-12)


@pytest.mark.parametrize("kind", ["geometric", "harmonic", "logarithmic"])
def test_mean_prox_matches_bounded_minimizer(kind):
    mean = SymmetricMean(kind)
    rng = np.random.default_rng(7)
    at, bt = rng.uniform(-1, 3, 40), rng.uniform(-1, 3, 40)
    mt = rng.normal(size=40) * 2
    gamma = 0.7
    a, b, _ = prox_kinetic_mean(at, bt, mt, gamma, mean)

    def F(x, i):
        return 0.5 * mt[i] ** 2 / (mean(x[0], x[1]) + gamma) + ((x[0] - at[i]) ** 2 + (x[1] - bt[i]) ** 2) / (2 * gamma)

    for i in range(40):
        ours = F((a[i], b[i]), i)
        best = min(minimize(F, x0, args=(i,), bounds=[(0, None)] * 2, method="L-BFGS-B").fun
                   for x0 in ([max(at[i], 0.1), max(bt[i], 0.1)], [1.0, 1.0], [0.0, 2.0], [2.0, 0.0]))
        assert ours <= best + 1e-8 * max(1.0, abs(best))


def test_direct_and_cg_projections_agree():
    model = FVModel(build_grid_mesh([[0, 1], [0, 1]], [4, 4]))
    rng = np.random.default_rng(8)
    P0 = rng.uniform(0.5, 1.5, 16)
    P1 = rng.uniform(0.5, 1.5, 16)
    P1 *= P0.sum() / P1.sum()
    problem = assemble(model, P0, P1, N=4)
    direct = AffineProjector(problem, "direct")
    cg = AffineProjector(problem, "cg")
    z = rng.normal(size=direct.point_from_path(problem.initial_path()).shape)
    a, b = direct.project(z), cg.project(z)
    assert direct.norm(a - b) <= 1e-7 * max(1.0, direct.norm(a))
    assert direct.norm(direct.residual(a)) < 1e-9 if np.ndim(direct.residual(a)) else direct.residual(a) < 1e-9


def test_projection_is_idempotent():
    model = TriModel(build_flat_mesh((0, 0), (1, 1), 3))
    problem = assemble(model, np.ones(model.n_density), np.ones(model.n_density), N=3)
    proj = AffineProjector(problem, "direct")
    z = np.random.default_rng(9).normal(size=proj.point_from_path(problem.initial_path()).shape)
    once = proj.project(z)
    assert proj.norm(proj.project(once) - once) <= 1e-10 * max(1.0, proj.norm(once))


def test_identical_endpoints_cost_nothing():
    model = FVModel(build_grid_mesh([0.0, 1.0], 10))
    rho = GenericMeasure.uniform_box([0.2], [0.7])
    path, stats = solve(assemble(model, rho, rho, N=4))
    assert stats.objective <= 1e-8


def test_solve_shift_and_kkt():
    model = FVModel(build_grid_mesh([0.0, 2.0], 32))
    mu = GenericMeasure.uniform_box([0.0], [1.0])
    nu = GenericMeasure.uniform_box([0.5], [1.5])
    problem = assemble(model, mu, nu, N=8)
    path, stats = solve(problem, SolverOptions(tol=1e-7))
    assert stats.converged
    # clamping round-off negatives may move the residual by O(tol / tau)
    assert continuity_residual(problem, path) <= 200 * 1e-7 * problem.N
    target = 0.5 * w2_1d_quantile(mu, nu)
    assert abs(stats.objective - target) / target < 0.05
    rep = kkt_report(problem, path, stats.multipliers, tol=1e-7)
    assert rep["feasible"]
    assert rep["fenchel_gap"] <= 1e-3 * stats.objective


def test_solve_is_deterministic():
    model = FVModel(build_grid_mesh([0.0, 1.0], 12), "geometric")
    P0 = np.linspace(0.5, 1.5, 12)
    P1 = P0[::-1].copy()
    a, sa = solve(assemble(model, P0, P1, N=4))
    b, sb = solve(assemble(model, P0, P1, N=4))
    np.testing.assert_array_equal(a.P, b.P)
    np.testing.assert_array_equal(a.M, b.M)
    assert sa.objective == sb.objective and sa.iterations == sb.iterations


def test_options_validation():
    with pytest.raises(ValueError):
        SolverOptions(tol=0)
    with pytest.raises(ValueError):
        SolverOptions(relaxation=2.0)
    with pytest.raises(ValueError):
        SolverOptions(linear_solver="lu")
    assert SolverOptions.from_dict({"tol": 1e-4, "unknown": 1}).tol == 1e-4
