"""Symmetric means used to weight density pairs across a face."""

import numpy as np

KINDS = ("arithmetic", "geometric", "harmonic", "logarithmic")

_T, _W = np.polynomial.legendre.leggauss(24)
_T = 0.5 * (_T + 1)
_W = 0.5 * _W


class SymmetricMean:
    """theta(a, b) on nonnegative pairs, vectorized.

    All kinds satisfy theta(1, 1) = 1, symmetry, 1-homogeneity and
    theta <= (a + b)/2. Except for the arithmetic mean they vanish as soon
    as one argument does.
    """

    def __init__(self, kind="arithmetic"):
        if kind not in KINDS:
            raise ValueError(f"unknown mean {kind!r}; expected one of {KINDS}")
        self.kind = kind

    def __repr__(self):
        return f"SymmetricMean({self.kind!r})"

    @property
    def is_linear(self):
        return self.kind == "arithmetic"

    def __call__(self, a, b):
        a = np.asarray(a, dtype=float)
        b = np.asarray(b, dtype=float)
        if self.kind == "arithmetic":
            return 0.5 * (a + b)
        pos = (a > 0) & (b > 0)
        sa = np.where(pos, a, 1.0)
        sb = np.where(pos, b, 1.0)
        if self.kind == "geometric":
            out = np.sqrt(sa * sb)
        elif self.kind == "harmonic":
            out = 2 * sa * sb / (sa + sb)
        else:
            out = _log_mean(sa, sb)
        return np.where(pos, out, 0.0)

    def derivatives(self, a, b):
        """theta and its first and second partials at strictly positive (a, b)."""
        a = np.asarray(a, dtype=float)
        b = np.asarray(b, dtype=float)
        if self.kind == "arithmetic":
            z = np.zeros(np.broadcast(a, b).shape)
            return 0.5 * (a + b), z + 0.5, z + 0.5, z, z, z
        if self.kind == "geometric":
            g = np.sqrt(a * b)
            return (g, 0.5 * g / a, 0.5 * g / b,
                    -0.25 * g / a**2, 0.25 / g, -0.25 * g / b**2)
        if self.kind == "harmonic":
            s = a + b
            return (2 * a * b / s, 2 * b**2 / s**2, 2 * a**2 / s**2,
                    -4 * b**2 / s**3, 4 * a * b / s**3, -4 * a**2 / s**3)
        # logarithmic mean as the integral of a^(1-t) b^t over t in [0, 1]
        la, lb = np.log(a)[..., None], np.log(b)[..., None]
        e = np.exp((1 - _T) * la + _T * lb)
        ia, ib = 1 / a[..., None], 1 / b[..., None]
        q = lambda g: np.sum(_W * g, axis=-1)
        return (_log_mean(a, b), q((1 - _T) * e * ia), q(_T * e * ib),
                q(-(1 - _T) * _T * e * ia**2), q((1 - _T) * _T * e * ia * ib),
                q(-_T * (1 - _T) * e * ib**2))


def _log_mean(a, b):
    r = b / a
    x = r - 1
    small = np.abs(x) < 1e-4
    safe = np.where(small, 2.0, r)
    exact = a * (safe - 1) / np.log(safe)
    series = a * (1 + x / 2 - x**2 / 12 + x**3 / 24)
    return np.where(small, series, exact)


def as_mean(mean):
    if isinstance(mean, SymmetricMean):
        return mean
    return SymmetricMean(mean or "arithmetic")
