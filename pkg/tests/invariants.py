"""Invariant checks on seeded random instances.

Each check takes a numpy Generator and returns a list of failure messages
(empty when the invariant holds). They are shared by the hypothesis suites
and the acceptance run.
"""

from functools import lru_cache

import numpy as np

from otbb.fvmodel import FVModel, build_grid_mesh
from otbb.means import KINDS, SymmetricMean
from otbb.measures import GenericMeasure, TestFunction, pair
from otbb.trimodel import TriModel, build_flat_mesh, build_icosphere

RTOL = 1e-10


@lru_cache(maxsize=None)
def models():
    return (
        FVModel(build_grid_mesh([0.0, 1.0], 7)),
        FVModel(build_grid_mesh([[0.0, 1.0], [0.0, 2.0]], [3, 4]), "geometric"),
        FVModel(build_grid_mesh([[0.0, 1.0], [0.0, 1.0]], [3, 3]), "harmonic"),
        FVModel(build_grid_mesh([0.0, 2.0], 5), "logarithmic"),
        TriModel(build_icosphere(1)),
        TriModel(build_flat_mesh((0, 0), (1, 1), 3)),
    )


def pick_model(rng):
    ms = models()
    return ms[int(rng.integers(len(ms)))]


def random_density(model, rng, zeros=True):
    P = rng.uniform(0.05, 3.0, model.n_density)
    if zeros and rng.random() < 0.3:
        P[rng.random(model.n_density) < 0.2] = 0.0
    return P


def random_momentum(model, rng):
    dofs = rng.normal(size=len(model.y_weights()))
    return model.dofs_to_momentum(dofs), dofs


def _close(a, b, rtol=RTOL):
    if np.isinf(a) and np.isinf(b):
        return True
    return abs(a - b) <= rtol * max(1.0, abs(a), abs(b))


def check_action_homogeneity(rng):
    model = pick_model(rng)
    P = random_density(model, rng, zeros=False)
    M, _ = random_momentum(model, rng)
    lam = rng.uniform(0.2, 5.0)
    base = model.action(P, M)
    errs = []
    if not _close(model.action(lam * P, M), base / lam):
        errs.append(f"{model}: A(lam P, M) != A(P, M)/lam")
    if not _close(model.action(P, lam * M), lam**2 * base):
        errs.append(f"{model}: A(P, lam M) != lam^2 A(P, M)")
    if not _close(model.action(lam * P, lam * M), lam * base):
        errs.append(f"{model}: A not 1-homogeneous jointly")
    return errs


def check_action_monotone(rng):
    model = pick_model(rng)
    P = random_density(model, rng)
    M, _ = random_momentum(model, rng)
    bigger = P + rng.uniform(0.0, 1.0, P.shape)
    a, b = model.action(bigger, M), model.action(P, M)
    if not a <= b * (1 + 1e-12) + 1e-14:
        return [f"{model}: action increased with the density ({a} > {b})"]
    return []


def check_action_convex(rng):
    model = pick_model(rng)
    P1, P2 = random_density(model, rng, False), random_density(model, rng, False)
    (M1, _), (M2, _) = random_momentum(model, rng), random_momentum(model, rng)
    t = rng.uniform()
    mid = model.action(t * P1 + (1 - t) * P2, t * M1 + (1 - t) * M2)
    chord = t * model.action(P1, M1) + (1 - t) * model.action(P2, M2)
    if not mid <= chord * (1 + 1e-12) + 1e-14:
        return [f"{model}: convexity violated ({mid} > {chord})"]
    return []


def check_mean_admissible(rng):
    errs = []
    a = rng.uniform(0, 10, 16)
    b = rng.uniform(0, 10, 16)
    a[:2] = 0.0
    lam = rng.uniform(0.01, 100)
    for kind in KINDS:
        th = SymmetricMean(kind)
        if abs(float(th(1.0, 1.0)) - 1) > 1e-14:
            errs.append(f"{kind}: theta(1,1) != 1")
        v = th(a, b)
        if np.max(np.abs(v - th(b, a))) > 1e-14 * max(1.0, np.max(v)):
            errs.append(f"{kind}: not symmetric")
        if np.max(np.abs(th(lam * a, lam * b) - lam * v)) > 1e-12 * lam * max(1.0, np.max(v)):
            errs.append(f"{kind}: not 1-homogeneous")
        if np.any(v > 0.5 * (a + b) * (1 + 1e-14) + 1e-300):
            errs.append(f"{kind}: exceeds the arithmetic mean")
        if np.any(v < 0):
            errs.append(f"{kind}: negative")
    return errs


def check_young(rng):
    """|<M, B>_Y| <= 2 sqrt(A(P, M)) sqrt(A*(P, B))."""
    model = pick_model(rng)
    P = random_density(model, rng, zeros=False)
    M, m = random_momentum(model, rng)
    B = rng.normal(size=m.shape) * rng.uniform(0.1, 10)
    lhs = abs(model.y_product_dofs(m, B))
    rhs = 2 * np.sqrt(model.action(P, M)) * np.sqrt(model.conjugate_dofs(P, B))
    # the bound is attained when B is the derivative of A in M
    if not lhs <= rhs * (1 + 1e-12) + 1e-13:
        return [f"{model}: Young inequality fails ({lhs} > {rhs})"]
    return []


def _random_measure(rng, dim=2):
    k = int(rng.integers(1, 5))
    mu = GenericMeasure.atomic(rng.uniform(0, 1, (k, dim)), rng.uniform(0, 1, k))
    if rng.random() < 0.7:
        lo = rng.uniform(0, 0.5, dim)
        mu = mu + GenericMeasure.uniform_box(lo, lo + rng.uniform(0.1, 0.5, dim), rng.uniform(0.1, 2))
    return mu


def _random_function(rng, dim=2):
    c = rng.normal(size=dim)
    k = rng.normal(size=dim)
    return TestFunction(lambda x: np.sin(x @ k) + x @ c,
                        lambda x: np.cos(x @ k)[..., None] * k + c, name="sin+lin")


def check_pairing_linearity(rng):
    mu, nu = _random_measure(rng), _random_measure(rng)
    f, g = _random_function(rng), _random_function(rng)
    a, b = rng.normal(size=2)
    errs = []
    lhs = pair(a * mu + b * nu, f).value
    rhs = a * pair(mu, f).value + b * pair(nu, f).value
    if not _close(lhs, rhs, 1e-12):
        errs.append(f"pairing not linear in the measure ({lhs} vs {rhs})")
    lhs = pair(mu, f.scaled(a) + g.scaled(b)).value
    rhs = a * pair(mu, f).value + b * pair(mu, g).value
    if not _close(lhs, rhs, 1e-12):
        errs.append(f"pairing not linear in the function ({lhs} vs {rhs})")
    return errs


CHECKS = (check_action_homogeneity, check_action_monotone, check_action_convex,
          check_mean_admissible, check_young, check_pairing_linearity)


def run_all(seed):
    """All checks on the instance drawn from `seed`; returns failure messages."""
    rng = np.random.default_rng(seed)
    out = []
    for check in CHECKS:
        out.extend(check(rng))
    return out
