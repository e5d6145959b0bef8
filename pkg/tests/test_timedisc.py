import numpy as np
import pytest

from otbb.fvmodel import FVModel, build_grid_mesh
from otbb.measures import GenericMeasure, MassMismatchError
from otbb.timedisc import (FinalPenalty, SpaceTimePath, assemble, continuity_residual,
                           evaluate_cost)


@pytest.fixture(scope="module")
def model():
    return FVModel(build_grid_mesh([0.0, 1.0], 8))


def test_assemble_rejects_bad_data(model):
    rho = GenericMeasure.uniform_box([0.0], [1.0])
    with pytest.raises(MassMismatchError):
        assemble(model, rho, 2 * rho, N=4)
    with pytest.raises(ValueError):
        assemble(model, rho, N=4)
    with pytest.raises(ValueError):
        assemble(model, rho, rho, N=0)
    with pytest.raises(ValueError):
        assemble(model, -np.ones(8), N=4, P1=-np.ones(8))


def test_constant_path_costs_nothing(model):
    P = np.ones(8)
    problem = assemble(model, P, P, N=5)
    path = SpaceTimePath.constant(P, 5, model.momentum_shape)
    assert continuity_residual(problem, path) == 0.0
    assert evaluate_cost(problem, path) == 0.0


def test_infeasible_path_is_infinite(model):
    P = np.ones(8)
    problem = assemble(model, P, P, N=3)
    path = SpaceTimePath.constant(P, 3, model.momentum_shape)
    path.M[1, 3] = 1.0
    assert evaluate_cost(problem, path) == np.inf


def test_single_face_transfer_cost(model):
    # move mass delta between neighbouring cells in one step
    P0 = np.ones(8)
    P1 = P0.copy()
    P1[3] -= 0.2
    P1[4] += 0.2
    problem = assemble(model, P0, P1, N=1)
    M = np.zeros(model.momentum_shape)
    M[3] = 0.2 / 8
    path = SpaceTimePath(np.stack([P0, P1]), M[None])
    assert continuity_residual(problem, path) < 1e-12
    # weight |f| d_f = 1/8, face mean of the midpoint densities 0.9 and 1.1 is 1
    assert evaluate_cost(problem, path) == pytest.approx((1 / 8) * 0.025**2 / 2)


def test_path_json_roundtrip(model):
    rng = np.random.default_rng(1)
    path = SpaceTimePath(rng.uniform(size=(4, 8)), rng.normal(size=(3, 7)))
    back = SpaceTimePath.from_json(path.to_json())
    np.testing.assert_array_equal(back.P, path.P)
    np.testing.assert_array_equal(back.M, path.M)


@pytest.mark.parametrize("kind", ["potential", "quadratic", "entropy"])
def test_penalty_prox_minimizes(kind):
    rng = np.random.default_rng(2)
    vol = rng.uniform(0.5, 1.5, 6)
    pen = FinalPenalty(kind, vol, potential=rng.uniform(0, 1, 6), scale=0.7)
    target = rng.normal(size=6)
    step = 0.3
    P = pen.prox(target, step)

    def obj(Q):
        return pen.value(Q) + np.sum(vol * (Q - target) ** 2) / (2 * step)

    base = obj(P)
    for _ in range(50):
        Q = np.maximum(P + 1e-3 * rng.normal(size=6), 0.0)
        assert obj(Q) >= base - 1e-12


def test_entropy_penalty_is_nonnegative():
    pen = FinalPenalty("entropy", np.ones(4))
    assert pen.value(np.full(4, 1 / np.e)) == pytest.approx(0.0, abs=1e-15)
    assert pen.value(np.array([0.0, 0.5, 2.0, 1.0])) >= 0
