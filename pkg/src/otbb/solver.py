"""Douglas-Rachford splitting for the discrete transport problem.

Unknowns are the free densities P, the momenta M and consensus copies S
of the mean density on every (element, step). The problem is

    min f(P, M, S)  subject to  (P, M, S) in an affine set,

where f sums the kinetic terms w |m|^2 / (2 s), the positivity of P and
an optional final penalty, and the affine set encodes the continuity
equation, S = mean of (P_{k-1} + P_k)/2, and pinned endpoints.

All norms are weighted: tau*|K| on densities and tau*w_e on element
copies, so each kinetic prox is weight-free and the splitting behaves
the same under mesh refinement.
"""

import csv
import math
import time
from dataclasses import asdict, dataclass, field
from typing import Optional

import numba
import numpy as np
import scipy.sparse as sp
import scipy.sparse.linalg as spla
from scipy.linalg import eigh

from .timedisc import (NEGATIVE_TOL, DiscreteProblem, SpaceTimePath, assemble,
                       continuity_residual, evaluate_cost)

NEWTON_MAX = 8
MEAN_NEWTON_MAX = 50


# ---------------------------------------------------------------- options


@dataclass
class SolverOptions:
    tol: float = 1e-6
    max_iter: int = 20000
    r: float = 1.0
    adapt: bool = True
    relaxation: float = 1.8
    linear_solver: str = "direct"
    trace_path: Optional[str] = None
    adapt_every: int = 25
    min_iter: int = 10

    def __post_init__(self):
        if not self.tol > 0:
            raise ValueError("tolerance must be positive")
        if int(self.max_iter) < 1:
            raise ValueError("max_iter must be at least 1")
        if not self.r > 0:
            raise ValueError("penalty parameter must be positive")
        if not 1.0 <= self.relaxation < 2.0:
            raise ValueError("relaxation must lie in [1, 2)")
        if self.linear_solver not in ("direct", "cg"):
            raise ValueError("linear solver must be 'direct' or 'cg'")

    @classmethod
    def from_dict(cls, data):
        known = {k: v for k, v in (data or {}).items() if k in cls.__dataclass_fields__}
        return cls(**known)


@dataclass
class SolveStats:
    iterations: int
    primal_residual: float
    dual_residual: float
    objective: float
    continuity_residual: float
    wall_time: float
    converged: bool
    prox_objective: float = float("nan")
    step: float = float("nan")
    multipliers: Optional[np.ndarray] = field(default=None, repr=False)

    def to_json(self):
        out = asdict(self)
        out.pop("multipliers")
        return out


# ---------------------------------------------------------------- proximal maps


def _split_momentum(s, m):
    s = np.asarray(s, dtype=float)
    m = np.asarray(m, dtype=float)
    vector = m.shape != s.shape
    m_sq = np.sum(m**2, axis=-1) if vector else m**2
    return s, m, vector, m_sq


def _largest_cubic_root(s_t, c, rhs):
    """Largest real root of (s - s_t)(s + c)^2 = rhs by Cardano's formula."""
    # u = s + c solves u^3 + a u^2 + b = 0
    a = -(c + s_t)
    b = -rhs
    p = -a * a / 3
    q = 2 * a**3 / 27 + b
    disc = (q / 2) ** 2 + (p / 3) ** 3
    sq = np.sqrt(np.maximum(disc, 0.0))
    one = np.cbrt(-q / 2 + sq) + np.cbrt(-q / 2 - sq)
    pm = np.minimum(p, -1e-300)
    arg = np.clip(3 * q / (2 * pm) * np.sqrt(-3 / pm), -1.0, 1.0)
    three = 2 * np.sqrt(-pm / 3) * np.cos(np.arccos(arg) / 3)
    return np.where(disc > 0, one, three) - a / 3 - c


@numba.njit(cache=True, error_model="numpy")
def _kinetic_roots(s_t, c, rhs):
    out = np.empty_like(s_t)
    for i in range(s_t.size):
        st, ci, ri = s_t[i], c[i], rhs[i]
        lb = max(st, 0.0)
        if (lb - st) * (lb + ci) ** 2 - ri >= 0.0:
            s = lb
        else:
            # Cardano on u = s + c: u^3 + a u^2 - rhs = 0
            a = -(ci + st)
            p = -a * a / 3.0
            q = 2.0 * a**3 / 27.0 - ri
            disc = (q / 2.0) ** 2 + (p / 3.0) ** 3
            if disc > 0.0:
                sq = math.sqrt(disc)
                u = np.cbrt(-q / 2.0 + sq) + np.cbrt(-q / 2.0 - sq)
            else:
                pm = min(p, -1e-300)
                arg = min(1.0, max(-1.0, 3.0 * q / (2.0 * pm) * math.sqrt(-3.0 / pm)))
                u = 2.0 * math.sqrt(-pm / 3.0) * math.cos(math.acos(arg) / 3.0)
            s = max(u - a / 3.0 - ci, lb)
            for _ in range(NEWTON_MAX):
                g = (s - st) * (s + ci) ** 2 - ri
                dg = (s + ci) * (3.0 * s + ci - 2.0 * st)
                step = g / dg if dg > 0.0 else 0.0
                s = max(s - step, lb)
                if abs(step) <= 4e-16 * max(1.0, s):
                    break
        out[i] = s if s > 0.0 else 0.0
    return out


def prox_kinetic(s_tilde, m_tilde, gamma, w=1.0):
    """Prox of w |m|^2 / (2 s) with step gamma, elementwise.

    The minimizer has m = s m~/(s + gamma w), and s is the largest root of
    (s - s~)(s + gamma w)^2 = gamma w |m~|^2 / 2. Right of max(s~, 0) the
    cubic is convex and increasing, so the Cardano root is polished by a
    few safeguarded Newton steps. A root <= 0 means the answer is (0, 0).
    """
    s_t, m_t, vector, m_sq = _split_momentum(s_tilde, m_tilde)
    c = np.broadcast_to(np.asarray(gamma * w, dtype=float), s_t.shape)
    rhs = 0.5 * c * m_sq
    flat = lambda x: np.ascontiguousarray(x, dtype=float).ravel()
    s = _kinetic_roots(flat(s_t), flat(c), flat(rhs)).reshape(s_t.shape)
    scale = np.where(s > 0, s / (s + c), 0.0)
    m = m_t * (scale[..., None] if vector else scale)
    return s, m


def prox_kinetic_reference(s_tilde, m_tilde, gamma, w=1.0):
    """Vectorized variant of `prox_kinetic`, kept as an independent check."""
    s_t, m_t, vector, m_sq = _split_momentum(s_tilde, m_tilde)
    c = np.broadcast_to(np.asarray(gamma * w, dtype=float), s_t.shape)
    rhs = 0.5 * c * m_sq
    lb = np.maximum(s_t, 0.0)
    g_lb = (lb - s_t) * (lb + c) ** 2 - rhs
    s = np.maximum(_largest_cubic_root(s_t, c, rhs), lb)
    for _ in range(NEWTON_MAX):
        g = (s - s_t) * (s + c) ** 2 - rhs
        dg = (s + c) * (3 * s + c - 2 * s_t)
        step = np.where(dg > 0, g / np.where(dg > 0, dg, 1.0), 0.0)
        s = np.maximum(s - step, lb)
        if np.all(np.abs(step) <= 4e-16 * np.maximum(1.0, s)):
            break
    s = np.where(g_lb >= 0, lb, s)
    s = np.where(s > 0, s, 0.0)
    scale = np.where(s > 0, s / (s + c), 0.0)
    m = m_t * (scale[..., None] if vector else scale)
    return s, m


def prox_kinetic_residual(s, m, s_tilde, m_tilde, gamma, w=1.0):
    """Relative residual of the cubic optimality condition (0 at the void).

    The cubic is normalized by the size of its terms before cancellation,
    (|s| + |s~|)(s + gamma w)^2 and gamma w |m~|^2 / 2, so a root that is
    exact up to rounding of s scores at the level of machine epsilon.
    """
    s_t, m_t, vector, m_sq = _split_momentum(s_tilde, m_tilde)
    s = np.asarray(s, dtype=float)
    c = gamma * w
    g = (s - s_t) * (s + c) ** 2 - 0.5 * c * m_sq
    scale = np.maximum.reduce([np.ones_like(s), (np.abs(s) + np.abs(s_t)) * (s + c) ** 2, 0.5 * c * m_sq])
    res = np.abs(g) / scale
    # at the void the condition is the inequality s~ + |m~|^2/(2 c) <= 0
    void = s <= 0
    viol = np.maximum(s_t + m_sq / (2 * c), 0.0) / np.maximum(1.0, np.abs(s_t))
    return np.where(void, viol, res)


def _mean_prox_objective(mean, a, b, at, bt, c, gamma):
    th = mean(a, b)
    return c / (th + gamma) + ((a - at) ** 2 + (b - bt) ** 2) / (2 * gamma)


_MEAN_CODES = {"geometric": 1, "harmonic": 2, "logarithmic": 3}


@numba.njit(cache=True, error_model="numpy")
def _theta_derivatives(kind, a, b):
    if kind == 1:
        g = math.sqrt(a * b)
        return g, 0.5 * g / a, 0.5 * g / b, -0.25 * g / (a * a), 0.25 / g, -0.25 * g / (b * b)
    if kind == 2:
        s = a + b
        return (2 * a * b / s, 2 * b * b / s**2, 2 * a * a / s**2,
                -4 * b * b / s**3, 4 * a * b / s**3, -4 * a * a / s**3)
    # logarithmic mean a g(r), r = b/a, g(r) = (r - 1)/log r; by 1-homogeneity
    # theta_a = g - r g', theta_b = g' and the Hessian is g''/a [[r^2, -r], [-r, 1]]
    x = (b - a) / a
    r = 1.0 + x
    if abs(x) < 1e-3:
        g = 1 + x / 2 - x * x / 12 + x**3 / 24 - 19 * x**4 / 720
        g1 = 0.5 - x / 6 + x * x / 8 - 19 * x**3 / 180
        g2 = -1.0 / 6 + x / 4 - 19 * x * x / 60
    else:
        lr = math.log1p(x)
        g = x / lr
        g1 = (lr - x / r) / (lr * lr)
        g2 = (2 * x - (r + 1) * lr) / (r * r * lr**3)
    h = g2 / a
    return a * g, g - r * g1, g1, h * r * r, -h * r, h


@numba.njit(cache=True, error_model="numpy")
def _mean_objective(kind, a, b, at, bt, c, gamma):
    th = 0.0
    if a > 0 and b > 0:
        th = _theta_derivatives(kind, a, b)[0]
    return c / (th + gamma) + ((a - at) ** 2 + (b - bt) ** 2) / (2 * gamma)


@numba.njit(cache=True, error_model="numpy")
def _mean_gradient_hessian(kind, a, b, at, bt, c, gamma):
    th, ta, tb, taa, tab, tbb = _theta_derivatives(kind, a, b)
    u = th + gamma
    ga = -c * ta / u**2 + (a - at) / gamma
    gb = -c * tb / u**2 + (b - bt) / gamma
    k = 2 * c / u**3
    haa = k * ta * ta - c * taa / u**2 + 1 / gamma
    hab = k * ta * tb - c * tab / u**2
    hbb = k * tb * tb - c * tbb / u**2 + 1 / gamma
    return ga, gb, haa, hab, hbb


@numba.njit(cache=True, error_model="numpy")
def _mean_newton(kind, a, b, at, bt, c, gamma):
    """Damped Newton inside the quadrant; returns (a, b, F, converged)."""
    f0 = _mean_objective(kind, a, b, at, bt, c, gamma)
    for _ in range(MEAN_NEWTON_MAX):
        ga, gb, haa, hab, hbb = _mean_gradient_hessian(kind, a, b, at, bt, c, gamma)
        det = haa * hbb - hab * hab
        if not (det > 0.0 and math.isfinite(det)):
            return a, b, f0, False
        da = -(hbb * ga - hab * gb) / det
        db = -(haa * gb - hab * ga) / det
        slope = ga * da + gb * db
        if not slope < 0.0:
            return a, b, f0, slope == 0.0
        # fraction to the boundary keeps the iterate strictly inside
        t = 1.0
        if da < 0:
            t = min(t, 0.99 * a / -da)
        if db < 0:
            t = min(t, 0.99 * b / -db)
        f1 = f0
        accepted = False
        for _ in range(60):
            f1 = _mean_objective(kind, a + t * da, b + t * db, at, bt, c, gamma)
            if f1 <= f0 + 1e-4 * t * slope:
                accepted = True
                break
            t *= 0.5
        if not accepted:
            return a, b, f0, -slope <= 1e-24 * max(1.0, f0)
        a += t * da
        b += t * db
        f0 = f1
        if abs(t * da) + abs(t * db) <= 1e-15 * (a + b) or -slope <= 1e-30 * max(1.0, f0):
            return a, b, f0, True
    return a, b, f0, False


@numba.njit(cache=True, error_model="numpy")
def _mean_log_newton(kind, a, b, at, bt, c, gamma):
    """Levenberg-Marquardt in (log a, log b), where the axes sit at infinity."""
    x, y = math.log(a), math.log(b)
    f0 = _mean_objective(kind, a, b, at, bt, c, gamma)
    mu = 1e-3
    for _ in range(4 * MEAN_NEWTON_MAX):
        ga, gb, haa, hab, hbb = _mean_gradient_hessian(kind, a, b, at, bt, c, gamma)
        gx, gy = a * ga, b * gb
        hxx = a * a * haa + a * ga
        hxy = a * b * hab
        hyy = b * b * hbb + b * gb
        if abs(gx) + abs(gy) <= 1e-15 * max(1.0, f0):
            break
        moved = False
        for _ in range(60):
            p, q = hxx + mu, hyy + mu
            det = p * q - hxy * hxy
            if det > 0.0 and p > 0.0:
                dx = -(q * gx - hxy * gy) / det
                dy = -(p * gy - hxy * gx) / det
                dx = max(-30.0, min(30.0, dx))
                dy = max(-30.0, min(30.0, dy))
                an, bn = math.exp(x + dx), math.exp(y + dy)
                f1 = _mean_objective(kind, an, bn, at, bt, c, gamma)
                if an > 0.0 and bn > 0.0 and f1 < f0:
                    x, y, a, b = x + dx, y + dy, an, bn
                    moved = abs(dx) + abs(dy) > 1e-15
                    f0 = f1
                    mu = max(mu * 0.1, 1e-12)
                    break
            mu *= 10.0
        if not moved:
            break
    return a, b, f0


@numba.njit(cache=True, error_model="numpy")
def _mean_prox_kernel(kind, at, bt, c, gamma):
    a_out = np.empty_like(at)
    b_out = np.empty_like(bt)
    for i in range(at.size):
        ati, bti, ci = at[i], bt[i], c[i]
        ap, bp = max(ati, 0.0), max(bti, 0.0)
        if ci <= 0.0:
            a_out[i], b_out[i] = ap, bp
            continue
        # theta vanishes on the axes, where the minimizers are explicit
        best_a, best_b = 0.0, bp
        best = _mean_objective(kind, 0.0, bp, ati, bti, ci, gamma)
        f = _mean_objective(kind, ap, 0.0, ati, bti, ci, gamma)
        if f < best:
            best_a, best_b, best = ap, 0.0, f
        floor = 1e-3 * max(abs(ati) + abs(bti), 1e-8)
        a, b, f0, done = _mean_newton(kind, max(ap, floor), max(bp, floor), ati, bti, ci, gamma)
        if f0 < best:
            best_a, best_b, best = a, b, f0
        if not done or min(a, b) <= 1e-6 * (a + b):
            # Newton can jam against a singular axis; log coordinates cannot
            a, b, f0 = _mean_log_newton(kind, max(ap, floor), max(bp, floor), ati, bti, ci, gamma)
            if f0 < best:
                best_a, best_b, best = a, b, f0
        a_out[i], b_out[i] = best_a, best_b
    return a_out, b_out


def prox_kinetic_mean(a_tilde, b_tilde, m_tilde, gamma, mean):
    """Prox of |m|^2 / (2 theta(a, b)) with step gamma over a, b >= 0.

    Minimizing out m leaves F(a, b) = |m~|^2 / (2 (theta + gamma)) plus
    the quadratic distance. F is convex on the closed quadrant: damped
    Newton finds the interior minimizer and the axes, where theta = 0,
    have explicit ones; the smaller of the candidates wins.
    """
    at = np.asarray(a_tilde, dtype=float)
    bt = np.asarray(b_tilde, dtype=float)
    m_t = np.asarray(m_tilde, dtype=float)
    vector = m_t.shape != at.shape
    m_sq = np.sum(m_t**2, axis=-1) if vector else m_t**2
    c = np.ascontiguousarray(0.5 * m_sq, dtype=float).ravel()
    if mean.is_linear:
        raise ValueError("the arithmetic mean uses prox_kinetic")
    a, b = _mean_prox_kernel(_MEAN_CODES[mean.kind], np.ascontiguousarray(at, dtype=float).ravel(),
                             np.ascontiguousarray(bt, dtype=float).ravel(), c, float(gamma))
    a = a.reshape(at.shape)
    b = b.reshape(bt.shape)
    th = mean(a, b)
    scale = np.where(th > 0, th / (th + gamma), 0.0)
    m = m_t * (scale[..., None] if vector else scale)
    return a, b, m


# ---------------------------------------------------------------- affine set


class AffineProjector:
    """Weighted projection onto continuity + averaging + pinning constraints.

    Layout of a point: [P_free (nf*n), m (N*nm), S (N*ne*k)] with k = 1 for
    a linear mean and k = 2 (pair copies) otherwise. The direct backend
    eliminates S and m and factors the reduced saddle-point system in
    (P, multipliers); the CG backend solves the full normal equations.
    """

    def __init__(self, problem, linear_solver="direct"):
        self.problem = problem
        model = problem.model
        if model.n_components() != 1:
            raise ValueError("singular constraint system: the mesh is disconnected")
        self.linear_solver = linear_solver
        N, tau = problem.N, problem.tau
        n = model.n_density
        self.n = n
        self.N = N
        self.free = list(range(1, N)) if problem.pinned else list(range(1, N + 1))
        nf = len(self.free)
        layout = model.kinetic_layout()
        self.layout = layout
        Ddiv = sp.csr_matrix(model.div_matrix())
        nm = Ddiv.shape[1]
        self.nm = nm
        self.ne = layout.n
        self.edim = layout.dim
        self.linear = layout.mean_matrix is not None
        if self.linear:
            G = sp.csr_matrix(layout.mean_matrix)
            self.copies = 1
        else:
            e = np.arange(layout.n)
            rows = np.concatenate([2 * e, 2 * e + 1])
            cols = np.concatenate([layout.pairs[:, 0], layout.pairs[:, 1]])
            G = sp.csr_matrix((np.ones(2 * layout.n), (rows, cols)), shape=(2 * layout.n, n))
            self.copies = 2
        ns = G.shape[0]
        self.sizes = (nf * n, N * nm, N * ns)
        # known densities per node (zero where free)
        known = np.zeros((N + 1, n))
        known[0] = problem.P0
        if problem.pinned:
            known[N] = problem.P1
        self.known = known
        fidx = {k: j for j, k in enumerate(self.free)}
        # time difference T and averaging C acting on free densities
        T_rows, C_rows = [], []
        I = sp.identity(n, format="csr")
        r = np.zeros((N, n))
        c0 = np.zeros((N, ns))
        for k in range(1, N + 1):
            tb = [None] * nf
            cb = [None] * nf
            for node, sign in ((k, 1.0), (k - 1, -1.0)):
                if node in fidx:
                    j = fidx[node]
                    tb[j] = sign / tau * I if tb[j] is None else tb[j] + sign / tau * I
                    cb[j] = 0.5 * G if cb[j] is None else cb[j] + 0.5 * G
            T_rows.append(tb)
            C_rows.append(cb)
            r[k - 1] = -(known[k] - known[k - 1]) / tau
            c0[k - 1] = 0.5 * G @ (known[k - 1] + known[k])
        if nf:
            T = sp.bmat([[b if b is not None else sp.csr_matrix((n, n)) for b in row] for row in T_rows], format="csr")
            C = sp.bmat([[b if b is not None else sp.csr_matrix((ns, n)) for b in row] for row in C_rows], format="csr")
        else:
            T = sp.csr_matrix((N * n, 0))
            C = sp.csr_matrix((N * ns, 0))
        D = sp.block_diag([Ddiv] * N, format="csr")
        self.r = r.ravel()
        self.c0 = c0.ravel()
        # a pinned problem has one redundant continuity row (total mass)
        keep = np.ones(N * n, dtype=bool)
        if problem.pinned:
            keep[-1] = False
        self.keep = keep
        self.T, self.C, self.D = T[keep], C, D[keep]
        self.D_full = D
        self.Ddiv = Ddiv
        self.G = G
        self.rk = self.r[keep]
        vol = model.density_weights
        ew = layout.weights
        # the free final node of a penalized problem carries half weight,
        # which keeps time averaging and differencing simultaneously diagonal
        self.node_weights = np.ones(nf)
        if not problem.pinned and nf:
            self.node_weights[-1] = 0.5
        self.wP = np.kron(self.node_weights, tau * vol)
        self.wM = np.tile(np.repeat(tau * ew, nm // layout.n), N)
        self.wS = np.tile(np.repeat(tau * ew, self.copies), N)
        self.weights = np.concatenate([self.wP, self.wM, self.wS])
        self._factor = None
        self._cg_matrix = None

    # slicing helpers
    def split(self, z):
        a, b, _ = self.sizes
        return z[:a], z[a:a + b], z[a + b:]

    def join(self, P, m, S):
        return np.concatenate([P, m, S])

    def norm(self, z):
        return float(np.sqrt(np.dot(self.weights, z * z)))

    def _time_basis(self):
        """Eigenbasis shared by the time difference and time averaging.

        With Delta the (N x nf) difference on free nodes and What the node
        weights, Avg^T Avg = What - Delta^T Delta / 4, so both are diagonal
        in the generalized eigenvectors U of (Delta^T Delta, What). The
        multiplier space is spanned by Delta U / sqrt(nu) plus, when both
        ends are pinned, one extra orthonormal direction.
        """
        N, free = self.N, self.free
        nf = len(free)
        delta = np.zeros((N, nf))
        for j, k in enumerate(free):
            delta[k - 1, j] += 1.0
            if k < N:
                delta[k, j] -= 1.0
        if nf == 0:
            return np.zeros((0, 0)), np.zeros(0), np.zeros((N, 0)), np.eye(N)
        nu, U = eigh(delta.T @ delta, np.diag(self.node_weights))
        lam_basis = delta @ U / np.sqrt(nu)
        q, _ = np.linalg.qr(np.hstack([lam_basis, np.eye(N)]))
        extra = q[:, nf:N]
        return U, nu, lam_basis, extra

    def _direct(self):
        if self._factor is None:
            model = self.problem.model
            tau = self.problem.tau
            U, nu, lam_basis, extra = self._time_basis()
            V = sp.diags(model.density_weights)
            ew = np.repeat(self.layout.weights, self.copies)
            K = (self.G.T @ sp.diags(ew) @ self.G).tocsc()
            wm = np.repeat(self.layout.weights, self.nm // self.layout.n)
            L = (self.Ddiv @ sp.diags(1.0 / wm) @ self.Ddiv.T).tocsc()
            I = sp.identity(self.n, format="csc")
            blocks = []
            for j, v in enumerate(nu):
                a = 1.0 - 0.25 * v
                c = np.sqrt(v) / tau
                Mj = sp.bmat([[tau * (V + a * K), c * I], [c * I, -L / tau]], format="csc")
                blocks.append(self._splu(Mj))
            vol = model.density_weights[:, None]
            border = self._splu(sp.bmat([[L, vol], [vol.T, None]], format="csc")) if extra.shape[1] else None
            self._factor = (U, nu, lam_basis, extra, blocks, border)
        return self._factor

    @staticmethod
    def _splu(Mat):
        try:
            return spla.splu(Mat, permc_spec="MMD_AT_PLUS_A", diag_pivot_thresh=0.0,
                             options={"SymmetricMode": True})
        except RuntimeError as exc:
            raise ValueError(f"singular constraint system: {exc}") from exc

    def project(self, z, return_multipliers=False):
        P, m, S = self.split(np.asarray(z, dtype=float))
        if self.linear_solver == "cg":
            return self._project_cg(z, return_multipliers)
        U, nu, lam_basis, extra, blocks, border = self._direct()
        n, N, tau = self.n, self.N, self.problem.tau
        b1 = (self.wP * P + self.C.T @ (self.wS * (S - self.c0))).reshape(-1, n)
        b2 = (self.r - self.D_full @ m).reshape(N, n)
        h1 = U.T @ b1
        h2 = lam_basis.T @ b2
        p = np.empty_like(h1)
        ell = np.empty_like(h2)
        for j, lu in enumerate(blocks):
            sol = lu.solve(np.concatenate([h1[j], h2[j]]))
            p[j], ell[j] = sol[:n], sol[n:]
        lam = lam_basis @ ell
        if extra.shape[1]:
            vol = self.problem.model.density_weights
            rhs = -tau * (extra[:, 0] @ b2)
            # drop the total-mass component, which only a mass gap can produce
            rhs = rhs - vol * (vol @ rhs) / (vol @ vol)
            ext = border.solve(np.concatenate([rhs, [0.0]]))[:n]
            lam = lam + np.outer(extra[:, 0], ext)
        Pn = (U @ p).ravel()
        lam = lam.ravel()
        if not (np.all(np.isfinite(Pn)) and np.all(np.isfinite(lam))):
            raise ValueError("singular constraint system")
        mn = m - (self.D_full.T @ lam) / self.wM
        Sn = self.C @ Pn + self.c0
        out = self.join(Pn, mn, Sn)
        if return_multipliers:
            return out, lam
        return out

    def _full_operator(self):
        nP, nm, ns = self.sizes
        top = sp.hstack([self.T, self.D, sp.csr_matrix((self.T.shape[0], ns))])
        bottom = sp.hstack([-self.C, sp.csr_matrix((ns, nm)), sp.identity(ns)])
        A = sp.vstack([top, bottom], format="csr")
        b = np.concatenate([self.rk, self.c0])
        return A, b

    def _project_cg(self, z, return_multipliers=False):
        if self._cg_matrix is None:
            A, b = self._full_operator()
            AWA = (A @ sp.diags(1.0 / self.weights) @ A.T).tocsr()
            self._cg_matrix = (A, b, AWA, 1.0 / AWA.diagonal())
        A, b, AWA, dinv = self._cg_matrix
        rhs = A @ z - b
        pre = spla.LinearOperator(AWA.shape, matvec=lambda v: dinv * v)
        lam, info = spla.cg(AWA, rhs, rtol=1e-13, atol=0.0, maxiter=20 * AWA.shape[0], M=pre)
        if info != 0:
            raise ValueError("conjugate gradient failed on the constraint system")
        out = z - (A.T @ lam) / self.weights
        if return_multipliers:
            return out, self._full_multipliers(lam[: self.T.shape[0]])
        return out

    def _full_multipliers(self, lam):
        full = np.zeros(self.N * self.n)
        full[self.keep] = lam
        return full

    def residual(self, z):
        A, b = self._full_operator()
        return float(np.max(np.abs(A @ z - b), initial=0.0))

    # conversions between points and paths
    def point_from_path(self, path):
        model = self.problem.model
        P = np.concatenate([path.P[k] for k in self.free]) if self.free else np.zeros(0)
        m = np.concatenate([model.momentum_to_dofs(M) for M in path.M])
        S = self.C @ P + self.c0
        return self.join(P, m, S)

    def path_from_point(self, z):
        model = self.problem.model
        P, m, _ = self.split(z)
        full = self.known.copy()
        for j, k in enumerate(self.free):
            full[k] = P[j * self.n:(j + 1) * self.n]
        M = np.stack([model.dofs_to_momentum(m[k * self.nm:(k + 1) * self.nm]) for k in range(self.N)])
        return SpaceTimePath(full, M)


def project_affine(problem, point, linear_solver="direct"):
    """Projection of a point (array layout of `AffineProjector`) onto the affine set."""
    proj = _projector(problem, linear_solver)
    return proj.project(np.asarray(point, dtype=float))


def _projector(problem, linear_solver):
    cache = problem.__dict__.setdefault("_projectors", {})
    if linear_solver not in cache:
        cache[linear_solver] = AffineProjector(problem, linear_solver)
    return cache[linear_solver]


# ---------------------------------------------------------------- splitting


def _prox_f(proj, v, gamma):
    problem = proj.problem
    P, m, S = proj.split(v)
    P = np.maximum(P, 0.0)
    if not problem.pinned and problem.penalty is not None:
        n = proj.n
        P = P.copy()
        P[-n:] = problem.penalty.prox(v[:len(P)][-n:], gamma / (proj.node_weights[-1] * problem.tau))
    ne, d = proj.ne, proj.edim
    mm = m.reshape(-1, ne, d)
    if proj.linear:
        s_new, m_new = prox_kinetic(S.reshape(-1, ne), mm if d > 1 else mm[..., 0], gamma)
        S_new = s_new.ravel()
    else:
        ab = S.reshape(-1, ne, 2)
        a, b, m_new = prox_kinetic_mean(ab[..., 0], ab[..., 1], mm if d > 1 else mm[..., 0],
                                        gamma, proj.layout.mean)
        S_new = np.stack([a, b], axis=-1).ravel()
    return proj.join(P, np.asarray(m_new).ravel(), S_new)


def _kinetic_value(proj, z):
    problem = proj.problem
    P, m, S = proj.split(z)
    ne, d = proj.ne, proj.edim
    msq = np.sum(m.reshape(-1, ne, d) ** 2, axis=-1)
    if proj.linear:
        s = S.reshape(-1, ne)
    else:
        ab = S.reshape(-1, ne, 2)
        s = proj.layout.mean(np.maximum(ab[..., 0], 0), np.maximum(ab[..., 1], 0))
    w = problem.tau * proj.layout.weights[None, :]
    with np.errstate(divide="ignore", invalid="ignore"):
        terms = np.where(s > 0, w * msq / (2 * np.where(s > 0, s, 1.0)), np.where(msq > 0, np.inf, 0.0))
    val = float(np.sum(terms))
    if not problem.pinned and problem.penalty is not None:
        val += problem.penalty.value(np.maximum(P[-proj.n:], 0.0))
    return val


def _tolerances(problem, path, tol):
    """(negative, residual, void-momentum) tolerances matching a solver tolerance."""
    scale = max(1.0, float(np.max(np.abs(path.P))))
    neg_tol = max(NEGATIVE_TOL, 10 * tol * scale)
    res_tol = max(1e-8, 20 * neg_tol / problem.tau)
    mom_tol = 10 * tol * max(1.0, float(np.max(np.abs(path.M), initial=0.0)))
    return neg_tol, res_tol, mom_tol


def _finish_path(problem, path, tol):
    """Clamp round-off negatives and evaluate the cost at solver tolerances."""
    neg_tol, res_tol, mom_tol = _tolerances(problem, path, tol)
    P = path.P.copy()
    P[(P < 0) & (P >= -neg_tol)] = 0.0
    clamped = SpaceTimePath(P, path.M)
    return clamped, evaluate_cost(problem, clamped, residual_tol=res_tol, negative_tol=neg_tol,
                                  momentum_tol=mom_tol)


def solve(problem, opts=None, initial=None):
    """Minimize the discrete cost; returns (path, stats)."""
    opts = opts or SolverOptions()
    t0 = time.perf_counter()
    proj = _projector(problem, opts.linear_solver)
    start = initial if initial is not None else problem.initial_path()
    y = proj.point_from_path(start)
    gamma = 1.0 / opts.r
    alpha = opts.relaxation
    z_prev = proj.project(y)
    trace = [] if opts.trace_path else None
    converged = False
    primal = dual = np.inf
    it = 0
    for it in range(1, int(opts.max_iter) + 1):
        z = proj.project(y) if it > 1 else z_prev
        x = _prox_f(proj, 2 * z - y, gamma)
        y = y + alpha * (x - z)
        zn = max(1.0, proj.norm(z))
        primal = proj.norm(x - z) / zn
        dual = proj.norm(z - z_prev) / zn if it > 1 else np.inf
        z_prev = z
        if trace is not None:
            trace.append((it, primal, dual, _kinetic_value(proj, x)))
        if it >= opts.min_iter and primal <= opts.tol and dual <= opts.tol:
            converged = True
            break
        if opts.adapt and it % opts.adapt_every == 0 and np.isfinite(dual) and dual > 0:
            ratio = primal / dual
            if ratio > 10 or ratio < 0.1:
                factor = 0.5 if ratio > 10 else 2.0
                y = z + factor * (y - z)
                gamma *= factor
    z, lam = proj.project(y, return_multipliers=True)
    x = _prox_f(proj, 2 * z - y, gamma)
    path, objective = _finish_path(problem, proj.path_from_point(z), opts.tol)
    # continuity multipliers as potentials phi_k per unit volume
    phi = -(lam / gamma).reshape(problem.N, proj.n) / (problem.tau * problem.model.density_weights[None, :])
    stats = SolveStats(
        iterations=it,
        primal_residual=float(primal),
        dual_residual=float(dual),
        objective=objective,
        continuity_residual=continuity_residual(problem, path),
        wall_time=time.perf_counter() - t0,
        converged=converged,
        prox_objective=_kinetic_value(proj, x),
        step=gamma,
        multipliers=phi,
    )
    if trace is not None:
        with open(opts.trace_path, "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["iter", "primal", "dual", "objective"])
            for row in trace:
                w.writerow([row[0]] + [repr(float(v)) for v in row[1:]])
    return path, stats


def solve_jko(model, rho0, penalty, N, opts=None):
    """One JKO step: free final density, penalty on P_N."""
    problem = assemble(model, rho0, penalty=penalty, N=N)
    return solve(problem, opts)


# ---------------------------------------------------------------- diagnostics


def discrete_gradient(model, phi):
    """Adjoint of Div for the X and Y products: <phi, Div M>_X = -<M, G phi>_Y."""
    D = model.div_matrix()
    yw = model.y_weights()
    return -(D.T @ (model.density_weights * phi)) / yw


def kkt_report(problem, path, multipliers=None, tol=1e-6):
    """Residual summary of a candidate minimizer.

    `multipliers` are potentials phi of shape (N, n), one per continuity
    row and per unit volume. The Fenchel gap is
    tau * sum_k [A(Q_k, M_k) + A*(Q_k, G phi_k) + <G phi_k, M_k>], which is
    nonnegative by the Young inequality and vanishes at a saddle point.
    """
    model = problem.model
    N, tau = problem.N, problem.tau
    phi = np.zeros((N, model.n_density)) if multipliers is None else np.asarray(multipliers, float)
    cont = continuity_residual(problem, path)
    neg = float(max(0.0, -np.min(path.P)))
    P = np.maximum(path.P, 0.0)
    Q = 0.5 * (P[:-1] + P[1:])
    neg_tol, res_tol, mom_tol = _tolerances(problem, path, tol)
    gap = 0.0
    for k in range(N):
        Mk = model.drop_void_momentum(Q[k], path.M[k], mom_tol)
        m = model.momentum_to_dofs(Mk)
        B = discrete_gradient(model, phi[k])
        gap += tau * (model.action(Q[k], Mk) + model.conjugate_dofs(Q[k], B)
                      + model.y_product_dofs(m, B))
    # stationarity in the interior densities: dA*/dQ and the potential jump
    stat = 0.0
    for j in range(1, N):
        dA = 0.5 * tau * (model.conjugate_gradient(Q[j - 1], discrete_gradient(model, phi[j - 1]))
                          + model.conjugate_gradient(Q[j], discrete_gradient(model, phi[j])))
        coef = model.density_weights * (phi[j] - phi[j - 1]) - dA
        # complementarity: coef >= 0 with equality where P_j > 0
        viol = np.where(P[j] > 0, np.abs(coef), np.maximum(-coef, 0.0))
        stat = max(stat, float(np.max(viol / model.density_weights)))
    feasible = cont <= res_tol and neg <= neg_tol
    return {
        "continuity_residual": cont,
        "negative_part": neg,
        "feasible": bool(feasible),
        "fenchel_gap": float(gap),
        "stationarity": stat,
        "cost": _finish_path(problem, path, tol)[1],
    }
