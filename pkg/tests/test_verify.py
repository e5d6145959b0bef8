import json

import numpy as np
import pytest

from otbb.fvmodel import FVModel, build_grid_mesh
from otbb.measures import GenericMeasure, TestFunction, constant_function, pair, vector_field
from otbb.verify import (ConvergenceSpec, ModelFamily, assumption_sweep, check_a4,
                         controllability_bound, convergence_experiment, decreasing_enough,
                         fitted_slope, no_flux_battery, point_pairs, sweeps_csv)


def test_a4_quadratic_flux_on_two_cells():
    model = FVModel(build_grid_mesh([0.0, 2.0], 2))
    m = vector_field(lambda x: x * (2 - x), lambda x: (2 - 2 * x)[..., None])
    assert check_a4(model, m) <= 1e-10


def test_a4_zero_field():
    model = FVModel(build_grid_mesh([[0, 1], [0, 1]], [5, 5]))
    zero = vector_field(lambda x: np.zeros_like(x), lambda x: np.zeros(x.shape + (2,)))
    assert check_a4(model, zero) == 0.0


def test_a4_divergence_free_2d():
    dom = [(0.0, 1.0), (0.0, 1.0)]
    model = FVModel(build_grid_mesh([list(d) for d in dom], [8, 8]))
    for f, deg in no_flux_battery(dom):
        assert check_a4(model, f, order=max(9, deg)) <= 1e-10


def test_a2_constant_function_is_exact():
    model = FVModel(build_grid_mesh([[0, 1], [0, 2]], [4, 6]))
    P = np.random.default_rng(0).uniform(0, 2, model.n_density)
    one = constant_function(1.0, 2)
    gap = pair(model.reconstruct("CE", P), one).value - pair(model.reconstruct("A", P), one).value
    assert abs(gap) <= 1e-13


def test_a3_cosine_errors_decrease():
    phi = TestFunction(lambda x: np.cos(np.pi * x[:, 0] / 2),
                       lambda x: -np.pi / 2 * np.sin(np.pi * x / 2))
    grad = vector_field(phi.gradient, lambda x: np.zeros(x.shape + (1,)))
    errs, hs = [], []
    for cells in (16, 32, 64):
        model = FVModel(build_grid_mesh([0.0, 2.0], cells))
        worst = 0.0
        for f in range(model.mesh.n_faces):
            M = np.zeros(model.mesh.n_faces)
            M[f] = 1.0
            div = GenericMeasure(1, model.mesh.centers, model.divergence(M) * model.density_weights)
            RY = model.reconstruct("Y", M)
            err = abs(pair(div, phi).value + pair(RY, grad).value) / RY.total_variation()
            worst = max(worst, err)
        errs.append(worst)
        hs.append(2.0 / cells)
    assert errs[0] > errs[1] > errs[2]
    # uniform grids are at least first order; symmetry makes them second order
    assert fitted_slope(hs, errs) >= 1.0


def test_sweep_needs_three_levels():
    with pytest.raises(ValueError):
        assumption_sweep(ModelFamily("fv", ((0.0, 2.0),), base=8), "A2", levels=(0, 1))
    with pytest.raises(ValueError):
        assumption_sweep(ModelFamily("fv", ((0.0, 2.0),), base=8), "A7")


def test_sweep_is_seeded_and_serializable():
    fam = ModelFamily("fv", ((0.0, 1.0), (0.0, 1.0)), base=4)
    a = assumption_sweep(fam, "A2", seed=3)
    b = assumption_sweep(fam, "A2", seed=3)
    assert [l.error for l in a.levels] == [l.error for l in b.levels]
    assert a.passed
    json.dumps(a.to_json())
    assert sweeps_csv([a]).count("\n") == 4


def test_a4_sweep_absolute_threshold():
    s = assumption_sweep(ModelFamily("sphere", base=1), "A4")
    assert s.passed and max(l.error for l in s.levels) <= 1e-10


def test_decrease_rule():
    assert decreasing_enough([0.4, 0.2, 0.1], [1.0, 0.6, 0.3])
    assert not decreasing_enough([0.4, 0.2, 0.1], [1.0, 0.8, 0.3])
    # errors at round-off always pass
    assert decreasing_enough([0.4, 0.2, 0.1], [1e-15, 1e-14, 1e-15])
    assert np.isnan(fitted_slope([0.4, 0.2, 0.1], [0.0, 0.0, 0.0]))
    assert fitted_slope([0.4, 0.2, 0.1], [0.16, 0.04, 0.01]) == pytest.approx(2.0)


def test_identical_marginals_converge_to_zero():
    fam = ModelFamily("fv", ((0.0, 1.0),), resolutions=(8, 16))
    rho = GenericMeasure.uniform_box([0.25], [0.75])
    spec = ConvergenceSpec(fam, rho, rho, [(4, 0), (8, 1)], oracle="quantile")
    table = convergence_experiment(spec, jobs=1)
    assert table.ground_truth == 0.0
    assert all(r.objective <= 1e-8 for r in table.rows)
    assert "wall" not in table.to_csv().splitlines()[0]


def test_controllability_same_point_costs_zero():
    fam = ModelFamily("fv", ((0.0, 2.0),), base=16)
    model = fam.build(0)
    res = model.controllability_path(0.5, 0.5, 8)
    assert res.cost == 0.0


def test_controllability_report_fit():
    rep = controllability_bound(ModelFamily("fv", ((0.0, 2.0),), base=16), N=8)
    assert rep.r_squared >= 0.95
    assert rep.max_step_factor <= rep.step_bound
    assert len(point_pairs(ModelFamily("fv", ((0.0, 2.0),)), (0.25, 0.5))) == 2
