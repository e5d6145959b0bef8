"""Quadrature rules on intervals, boxes and triangles."""

from functools import lru_cache

import numpy as np

DEFAULT_ORDER = 5


@lru_cache(maxsize=None)
def gauss_legendre01(npts):
    """Gauss-Legendre nodes and weights on [0, 1]."""
    x, w = np.polynomial.legendre.leggauss(npts)
    return 0.5 * (x + 1.0), 0.5 * w


def points_for_order(order):
    """Number of 1-D Gauss points exact up to polynomial degree `order`."""
    return max(1, (int(order) + 2) // 2)


def box_nodes(lo, hi, order=DEFAULT_ORDER):
    """Tensor Gauss rule on a batch of axis-aligned boxes.

    Degenerate axes (lo == hi) are kept fixed, so faces of a grid are
    boxes of one lower dimension. Weights include the region measure.

    Parameters
    ----------
    lo, hi : array, shape (n, d)

    Returns
    -------
    nodes : array, shape (n, q, d)
    weights : array, shape (n, q)
    """
    lo = np.atleast_2d(np.asarray(lo, dtype=float))
    hi = np.atleast_2d(np.asarray(hi, dtype=float))
    n, d = lo.shape
    t, w = gauss_legendre01(points_for_order(order))
    ext = hi - lo
    flat = np.abs(ext) <= 0.0
    # Every axis uses the same 1-D rule; degenerate axes collapse onto lo.
    grids = np.meshgrid(*([np.arange(len(t))] * d), indexing="ij")
    idx = np.stack([g.ravel() for g in grids], axis=1)  # (q, d)
    tt = t[idx]
    ww = w[idx]
    nodes = lo[:, None, :] + ext[:, None, :] * tt[None, :, :]
    wfac = np.where(flat[:, None, :], 1.0, ww[None, :, :] * np.abs(ext)[:, None, :])
    # A degenerate axis must contribute its weight only once.
    keep = np.ones((n, len(idx)), dtype=bool)
    for a in range(d):
        keep &= ~(flat[:, a][:, None] & (idx[None, :, a] != 0))
    weights = np.prod(wfac, axis=2) * keep
    return nodes, weights


_DUNAVANT5 = (
    np.array([
        [1 / 3, 1 / 3, 1 / 3],
        [0.0597158717897698204929, 0.4701420641051150897535, 0.4701420641051150897535],
        [0.4701420641051150897535, 0.0597158717897698204929, 0.4701420641051150897535],
        [0.4701420641051150897535, 0.4701420641051150897535, 0.0597158717897698204929],
        [0.7974269853530873223980, 0.1012865073234563388009, 0.1012865073234563388009],
        [0.1012865073234563388009, 0.7974269853530873223980, 0.1012865073234563388009],
        [0.1012865073234563388009, 0.1012865073234563388009, 0.7974269853530873223980],
    ]),
    np.array([0.225] + [0.1323941527885061807294] * 3 + [0.1259391805448271525957] * 3),
)


@lru_cache(maxsize=None)
def triangle_rule(order=DEFAULT_ORDER):
    """Barycentric nodes (q, 3) and weights (q,) summing to one."""
    if order <= 1:
        return np.array([[1 / 3, 1 / 3, 1 / 3]]), np.array([1.0])
    if order == 2:
        b = np.array([[2 / 3, 1 / 6, 1 / 6], [1 / 6, 2 / 3, 1 / 6], [1 / 6, 1 / 6, 2 / 3]])
        return b, np.full(3, 1 / 3)
    if order <= 5:
        return _DUNAVANT5
    # Collapsed square: one extra point absorbs the Jacobian factor (1 - u).
    n = points_for_order(order + 1)
    t, w = gauss_legendre01(n)
    u, v = np.meshgrid(t, t, indexing="ij")
    wu, wv = np.meshgrid(w, w, indexing="ij")
    l1 = u.ravel()
    l2 = ((1 - u) * v).ravel()
    bary = np.stack([1 - l1 - l2, l1, l2], axis=1)
    weights = (2 * wu * wv * (1 - u)).ravel()
    return bary, weights


def triangle_nodes(verts, order=DEFAULT_ORDER):
    """Quadrature on a batch of flat triangles.

    Parameters
    ----------
    verts : array, shape (n, 3, D)

    Returns
    -------
    nodes : (n, q, D), weights : (n, q) including the triangle area,
    bary : (q, 3) barycentric coordinates of the nodes.
    """
    verts = np.asarray(verts, dtype=float)
    bary, w = triangle_rule(order)
    nodes = np.einsum("qi,nid->nqd", bary, verts)
    area = triangle_areas(verts)
    return nodes, area[:, None] * w[None, :], bary


def triangle_areas(verts):
    verts = np.asarray(verts, dtype=float)
    e1 = verts[:, 1] - verts[:, 0]
    e2 = verts[:, 2] - verts[:, 0]
    if verts.shape[-1] == 2:
        return 0.5 * np.abs(e1[:, 0] * e2[:, 1] - e1[:, 1] * e2[:, 0])
    return 0.5 * np.linalg.norm(np.cross(e1, e2), axis=1)


def radial_jacobian(nodes, offsets):
    """Area factor of the radial map from a flat triangle onto the unit sphere.

    For a plane n.p = h the factor at p is (n.p)/|p|^3 = h/|p|^3.
    """
    r = np.linalg.norm(nodes, axis=-1)
    return np.asarray(offsets)[:, None] / r**3
