"""Independent reference computations used by the tests."""

import numpy as np

GOLDEN = (np.sqrt(5) - 1) / 2


def _golden(f, lo, hi, iters):
    """Vectorized golden-section minimization of convex f on [lo, hi]."""
    a, b = lo.copy(), hi.copy()
    c = b - GOLDEN * (b - a)
    d = a + GOLDEN * (b - a)
    fc, fd = f(c), f(d)
    for _ in range(iters):
        left = fc <= fd
        b = np.where(left, d, b)
        a = np.where(left, a, c)
        d_new = np.where(left, c, a + GOLDEN * (b - a))
        c_new = np.where(left, b - GOLDEN * (b - a), d)
        fnew = f(np.where(left, c_new, d_new))
        fd, fc = np.where(left, fc, fnew), np.where(left, fnew, fd)
        c, d = c_new, d_new
    x = 0.5 * (a + b)
    # keep an exact endpoint when it is at least as good (void minimizers)
    return np.where(f(lo) <= f(x), lo, x)


def kinetic_objective(s, m, st, mt, gamma, w):
    """w m^2/(2s) + |(s, m) - (st, mt)|^2 / (2 gamma), with the void convention at s = 0."""
    with np.errstate(divide="ignore", invalid="ignore"):
        kin = np.where(s > 0, w * m**2 / (2 * np.where(s > 0, s, 1.0)), np.where(m == 0, 0.0, np.inf))
    return kin + ((s - st) ** 2 + (m - mt) ** 2) / (2 * gamma)


def brute_force_prox(st, mt, gamma, w, iters=100):
    """Minimize the prox objective by nested derivative-free line searches.

    The inner search runs over m for fixed s; the outer one over s in
    [0, s_max] minimizes the convex marginal. No closed form is used.
    """
    st, mt, gamma, w = (np.asarray(v, dtype=float) for v in np.broadcast_arrays(st, mt, gamma, w))
    m_lo, m_hi = np.minimum(mt, 0.0), np.maximum(mt, 0.0)
    s_max = np.maximum(st, 0.0) + mt**2 / (2 * gamma * w) + 1.0

    def inner(s):
        return _golden(lambda m: kinetic_objective(s, m, st, mt, gamma, w), m_lo, m_hi, iters)

    def marginal(s):
        return kinetic_objective(s, np.where(s > 0, inner(s), 0.0), st, mt, gamma, w)

    s = _golden(marginal, np.zeros_like(st), s_max, iters)
    m = np.where(s > 0, inner(s), 0.0)
    return s, m
