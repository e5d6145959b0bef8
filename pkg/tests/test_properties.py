import numpy as np
from hypothesis import given, settings
from hypothesis import strategies as st

from invariants import CHECKS
from oracles import kinetic_objective
from otbb.means import KINDS, SymmetricMean
from otbb.measures import GenericMeasure, w2_1d_quantile
from otbb.solver import prox_kinetic, prox_kinetic_residual

SEEDS = st.integers(min_value=0, max_value=2**32 - 1)
MANY = settings(max_examples=500, derandomize=True, deadline=None)
SOME = settings(max_examples=100, derandomize=True, deadline=None)


def _run(check, seed):
    failures = check(np.random.default_rng(seed))
    assert not failures, failures


@MANY
@given(SEEDS)
def test_action_homogeneity(seed):
    _run(CHECKS[0], seed)


@MANY
@given(SEEDS)
def test_action_monotone_in_density(seed):
    _run(CHECKS[1], seed)


@MANY
@given(SEEDS)
def test_action_jointly_convex(seed):
    _run(CHECKS[2], seed)


@MANY
@given(SEEDS)
def test_means_admissible(seed):
    _run(CHECKS[3], seed)


@MANY
@given(SEEDS)
def test_young_inequality(seed):
    _run(CHECKS[4], seed)


@MANY
@given(SEEDS)
def test_pairing_bilinear(seed):
    _run(CHECKS[5], seed)


finite = st.floats(min_value=-50, max_value=50, allow_nan=False)
positive = st.floats(min_value=1e-3, max_value=1e3, allow_nan=False)


@SOME
@given(finite, finite, positive, positive)
def test_prox_satisfies_optimality(s_t, m_t, gamma, w):
    s, m = prox_kinetic(np.array([s_t]), np.array([m_t]), gamma, w)
    assert s[0] >= 0
    assert prox_kinetic_residual(s, m, np.array([s_t]), np.array([m_t]), gamma, w)[0] <= 1e-10
    # moving toward the input inside s >= 0 never helps
    base = kinetic_objective(s, m, s_t, m_t, gamma, w)[0]
    for t in (1e-3, 1e-2):
        trial = kinetic_objective(np.maximum(s + t * (s_t - s), 0.0), m + t * (m_t - m), s_t, m_t, gamma, w)[0]
        assert trial >= base - 1e-9 * max(1.0, abs(base))


@SOME
@given(st.sampled_from(KINDS), positive, positive)
def test_mean_between_harmonic_and_arithmetic(kind, a, b):
    v = float(SymmetricMean(kind)(a, b))
    harmonic = 2 * a * b / (a + b)
    assert harmonic * (1 - 1e-12) <= v <= 0.5 * (a + b) * (1 + 1e-12)


@SOME
@given(st.floats(min_value=-2, max_value=2), st.floats(min_value=0.1, max_value=3))
def test_quantile_shift_cost(shift, width):
    mu = GenericMeasure.uniform_box([0.0], [width])
    nu = GenericMeasure.uniform_box([shift], [shift + width])
    assert abs(w2_1d_quantile(mu, nu) - shift**2) <= 1e-10 * max(1.0, shift**2)
