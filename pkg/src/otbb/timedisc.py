"""Staggered space-time discretization.

Densities P_0..P_N sit on time nodes k/N and momenta M_1..M_N on the
intervals between them. The cost of a path is

    tau * sum_k A((P_{k-1} + P_k)/2, M_k)

under the discrete continuity equation (P_k - P_{k-1})/tau + Div M_k = 0.

Everything here talks to a spatial model through a small interface that
both ``FVModel`` and ``TriModel`` implement: ``n_density``,
``momentum_shape``, ``density_weights``, ``divergence``, ``action``,
``sample_density``, ``reconstruct``, ``potential_nodes``.
"""

from dataclasses import dataclass
from typing import Callable, Optional

import numpy as np
from scipy.special import wrightomega

from .measures import GenericMeasure, MassMismatchError, TestFunction

RESIDUAL_TOL = 1e-8
NEGATIVE_TOL = 1e-9
ASSEMBLY_MASS_TOL = 1e-10


@dataclass
class SpaceTimePath:
    """Densities of shape (N+1, n) and momenta of shape (N, *momentum_shape)."""

    P: np.ndarray
    M: np.ndarray

    def __post_init__(self):
        self.P = np.asarray(self.P, dtype=float)
        self.M = np.asarray(self.M, dtype=float)
        if self.P.ndim != 2 or len(self.M) != len(self.P) - 1:
            raise ValueError("a path needs N+1 densities and N momenta")

    @property
    def N(self):
        return len(self.M)

    @property
    def tau(self):
        return 1.0 / self.N

    def is_nonnegative(self, tol=0.0):
        return bool(np.all(self.P >= -tol))

    def averaged(self):
        return 0.5 * (self.P[:-1] + self.P[1:])

    def to_json(self):
        return {"N": self.N, "P": self.P.tolist(), "M": self.M.tolist()}

    @classmethod
    def from_json(cls, data):
        return cls(np.array(data["P"], dtype=float), np.array(data["M"], dtype=float))

    @classmethod
    def constant(cls, P, N, momentum_shape):
        P = np.asarray(P, dtype=float)
        return cls(np.tile(P, (N + 1, 1)), np.zeros((N,) + tuple(momentum_shape)))


# ---------------------------------------------------------------- penalties


@dataclass(frozen=True)
class FinalPenalty:
    """Convex penalty G on the final density, weighted by cell/vertex volumes.

    kinds: 'potential' (scale * sum vol V P), 'quadratic'
    (scale * sum vol P^2 / 2), 'entropy' (scale * sum vol P log P) and
    'zero'. `offset` is added to the value; the entropy default makes G >= 0.
    """

    kind: str
    volumes: np.ndarray
    potential: Optional[np.ndarray] = None
    scale: float = 1.0
    offset: Optional[float] = None

    def __post_init__(self):
        if self.kind not in ("potential", "quadratic", "entropy", "zero"):
            raise ValueError(f"unknown penalty kind {self.kind!r}")
        if self.kind == "potential" and self.potential is None:
            raise ValueError("potential penalty needs potential values")
        if self.scale < 0:
            raise ValueError("penalty scale must be nonnegative")
        if self.offset is None:
            off = self.scale * float(np.sum(self.volumes)) / np.e if self.kind == "entropy" else 0.0
            object.__setattr__(self, "offset", off)

    def value(self, P):
        P = np.asarray(P, dtype=float)
        if np.any(P < -NEGATIVE_TOL):
            return np.inf
        P = np.maximum(P, 0.0)
        vol = self.volumes
        if self.kind == "zero":
            core = 0.0
        elif self.kind == "potential":
            core = np.sum(vol * self.potential * P)
        elif self.kind == "quadratic":
            core = 0.5 * np.sum(vol * P**2)
        else:
            safe = np.where(P > 0, P, 1.0)
            core = np.sum(vol * np.where(P > 0, P * np.log(safe), 0.0))
        return float(self.scale * core + self.offset)

    def prox(self, target, step):
        """argmin_P G(P) + sum vol (P - target)^2 / (2 step) over P >= 0."""
        target = np.asarray(target, dtype=float)
        c = step * self.scale
        if self.kind == "zero" or c == 0:
            return np.maximum(target, 0.0)
        if self.kind == "potential":
            return np.maximum(target - c * self.potential, 0.0)
        if self.kind == "quadratic":
            return np.maximum(target / (1 + c), 0.0)
        # P/c + log(P/c) = target/c - 1 - log c, solved by the Wright omega function
        z = target / c - 1 - np.log(c)
        return c * np.real(wrightomega(z))


def potential_penalty(model, potential: Callable, scale=1.0):
    """Penalty sum vol V(node) P with V evaluated at the model's nodes."""
    values = np.asarray(potential(model.potential_nodes()), dtype=float)
    return FinalPenalty("potential", model.density_weights, values, scale)


# ---------------------------------------------------------------- problems


@dataclass
class DiscreteProblem:
    """Boundary data and time step for J^{N} on a spatial model.

    With `P1` given both endpoints are pinned; otherwise `penalty` acts on
    the free final density.
    """

    model: object
    N: int
    P0: np.ndarray
    P1: Optional[np.ndarray] = None
    penalty: Optional[FinalPenalty] = None

    @property
    def tau(self):
        return 1.0 / self.N

    @property
    def pinned(self):
        return self.P1 is not None

    def momentum_shape(self):
        return tuple(self.model.momentum_shape)

    def initial_path(self):
        """Linear interpolation of the boundary data, zero momentum."""
        end = self.P1 if self.pinned else self.P0
        s = np.linspace(0.0, 1.0, self.N + 1)[:, None]
        P = (1 - s) * self.P0[None, :] + s * end[None, :]
        return SpaceTimePath(P, np.zeros((self.N,) + self.momentum_shape()))


def _as_density(model, data):
    if isinstance(data, GenericMeasure):
        return model.sample_density(data)
    arr = np.asarray(data, dtype=float)
    if arr.shape != (model.n_density,):
        raise ValueError(f"density has shape {arr.shape}, expected ({model.n_density},)")
    return arr


def assemble(model, P0, P1=None, penalty=None, N=16):
    """Build the discrete problem; raises on negative data or a mass gap."""
    N = int(N)
    if N < 1:
        raise ValueError("need at least one time step")
    P0 = _as_density(model, P0)
    if np.any(P0 < 0):
        raise ValueError("initial density has negative entries")
    if P1 is None and penalty is None:
        raise ValueError("give a final density or a final penalty")
    if P1 is not None:
        if penalty is not None:
            raise ValueError("final density and penalty are mutually exclusive")
        P1 = _as_density(model, P1)
        if np.any(P1 < 0):
            raise ValueError("final density has negative entries")
        m0 = float(np.dot(model.density_weights, P0))
        m1 = float(np.dot(model.density_weights, P1))
        if abs(m0 - m1) > ASSEMBLY_MASS_TOL * max(1.0, abs(m0)):
            raise MassMismatchError(m0, m1)
    return DiscreteProblem(model, N, P0, P1, penalty)


def _check_shapes(problem, path):
    if path.N != problem.N:
        raise ValueError(f"path has {path.N} steps, problem has {problem.N}")
    if path.P.shape[1] != problem.model.n_density:
        raise ValueError("path densities do not match the model")
    if path.M.shape[1:] != problem.momentum_shape():
        raise ValueError("path momenta do not match the model")


def continuity_residuals(problem, path):
    """Array (N, n) of (P_k - P_{k-1})/tau + Div M_k."""
    _check_shapes(problem, path)
    model = problem.model
    div = np.stack([model.divergence(m) for m in path.M])
    return np.diff(path.P, axis=0) / problem.tau + div


def continuity_residual(problem, path):
    """Max-norm of the discrete continuity residual."""
    return float(np.max(np.abs(continuity_residuals(problem, path)), initial=0.0))


def endpoint_residual(problem, path):
    r = float(np.max(np.abs(path.P[0] - problem.P0)))
    if problem.pinned:
        r = max(r, float(np.max(np.abs(path.P[-1] - problem.P1))))
    return r


def evaluate_cost(problem, path, residual_tol=RESIDUAL_TOL, negative_tol=NEGATIVE_TOL,
                  momentum_tol=0.0):
    """tau * sum_k A((P_{k-1}+P_k)/2, M_k) plus the final penalty.

    Returns +inf when a density dips below -negative_tol, or when the
    continuity or endpoint residual exceeds residual_tol. Small negatives
    are clamped to zero before the action is evaluated, and momenta of
    size at most momentum_tol on void elements are dropped the same way.
    """
    _check_shapes(problem, path)
    if np.any(path.P < -negative_tol):
        return np.inf
    if continuity_residual(problem, path) > residual_tol:
        return np.inf
    if endpoint_residual(problem, path) > residual_tol:
        return np.inf
    P = np.maximum(path.P, 0.0)
    Q = 0.5 * (P[:-1] + P[1:])
    model = problem.model
    total = 0.0
    for k in range(problem.N):
        M = path.M[k]
        if momentum_tol > 0:
            M = model.drop_void_momentum(Q[k], M, momentum_tol)
        total += model.action(Q[k], M)
        if total == np.inf:
            return np.inf
    total *= problem.tau
    if problem.penalty is not None:
        total += problem.penalty.value(P[-1])
    return float(total)


# ---------------------------------------------------------------- space-time


@dataclass(frozen=True)
class SpaceTimeFunction:
    """phi(t, x) with spatial gradient and time derivative, on arrays of points."""

    value: Callable
    grad: Callable
    dt: Callable
    bounds: tuple = (None, None, None)

    def at(self, t, part="value"):
        fn = {"value": self.value, "dt": self.dt}[part]
        return TestFunction(lambda x: fn(t, x), lambda x: np.zeros(np.shape(x)),
                            "C2", self.bounds)

    def grad_at(self, t):
        return TestFunction(lambda x: self.grad(t, x), lambda x: np.zeros(np.shape(x) + np.shape(x)[-1:]),
                            "C2", self.bounds, vector=True)


_TG, _TW = np.polynomial.legendre.leggauss(3)
_TG = 0.5 * (_TG + 1)
_TW = 0.5 * _TW


@dataclass(frozen=True)
class SpaceTimeMeasure:
    """Measure on [0,1] x X given per time interval.

    Each segment is (t0, t1, start, end): the spatial measure varies
    linearly in time from `start` to `end` (equal for constant profiles).
    """

    segments: tuple
    vector: bool = False

    def at_time(self, t):
        for t0, t1, a, b in self.segments:
            if t0 <= t <= t1:
                s = (t - t0) / (t1 - t0)
                return a.scaled(1 - s) + b.scaled(s) if a is not b else a
        raise ValueError("time outside [0, 1]")

    def pair(self, f, part="value"):
        """Pair with phi, its time derivative (part='dt') or gradient (part='grad')."""
        total = 0.0
        for t0, t1, a, b in self.segments:
            h = t1 - t0
            for s, w in zip(_TG, _TW):
                t = t0 + s * h
                g = f.grad_at(t) if part == "grad" else f.at(t, part)
                va = a.pair(g).value
                vb = va if b is a else b.pair(g).value
                total += h * w * ((1 - s) * va + s * vb)
        return total

    def mass(self):
        """Space-time total mass (integral over t of the spatial mass)."""
        return float(sum((t1 - t0) * 0.5 * (a.mass() + b.mass()) for t0, t1, a, b in self.segments))


def spacetime_reconstruct(model, path, which):
    """CE: time-linear R^CE(P_k); A: constant R^A(Q_k); Y: constant R_Y(M_k)."""
    N = path.N
    ts = np.linspace(0.0, 1.0, N + 1)
    segs = []
    if which == "CE":
        meas = [model.reconstruct("CE", p) for p in path.P]
        segs = [(ts[k], ts[k + 1], meas[k], meas[k + 1]) for k in range(N)]
    elif which == "A":
        for k, q in enumerate(path.averaged()):
            m = model.reconstruct("A", q)
            segs.append((ts[k], ts[k + 1], m, m))
    elif which == "Y":
        for k, mom in enumerate(path.M):
            m = model.reconstruct("Y", mom)
            segs.append((ts[k], ts[k + 1], m, m))
    else:
        raise ValueError(f"unknown reconstruction {which!r}")
    return SpaceTimeMeasure(tuple(segs), vector=which == "Y")
