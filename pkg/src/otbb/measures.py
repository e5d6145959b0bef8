"""Finite measures, test functions, pairings and exact W2 oracles.

A measure is a list of weighted atoms plus blocks of constant-density
pieces. Pieces live on axis-aligned boxes (grid cells, grid faces or free
intervals) or on triangles, optionally radially projected onto the unit
sphere. This class is closed under every reconstruction the discrete
models produce.
"""

from dataclasses import dataclass, field
from typing import Callable, Optional

import numpy as np
from scipy.optimize import linprog

from . import quadrature as quad

MASS_TOL = 1e-12
SPHERE_TOL = 1e-12
LP_MAX_ATOMS = 64


class MassMismatchError(ValueError):
    """Raised when two measures that must share their mass do not."""

    def __init__(self, mass_a, mass_b):
        super().__init__(f"mass mismatch: {mass_a!r} vs {mass_b!r}")
        self.mass_a = mass_a
        self.mass_b = mass_b


# ---------------------------------------------------------------- functions


@dataclass(frozen=True)
class TestFunction:
    """Smooth scalar function or vector field with advertised bounds.

    `value` and `gradient` act on arrays of points of shape (n, d). For a
    vector field the value has shape (n, d) and the gradient is the
    Jacobian with shape (n, d, d), rows indexing components.
    `bounds` lists sup-norm bounds of the value, first and second
    derivatives; a missing entry is None.
    """

    __test__ = False

    value: Callable
    gradient: Callable
    regularity: str = "C2"
    bounds: tuple = (None, None, None)
    vector: bool = False
    name: str = ""

    def __call__(self, x):
        return self.value(np.asarray(x, dtype=float))

    def grad(self, x):
        return self.gradient(np.asarray(x, dtype=float))

    def divergence(self, x):
        if not self.vector:
            raise TypeError("divergence needs a vector field")
        return np.trace(self.grad(x), axis1=-2, axis2=-1)

    def scaled(self, c):
        return TestFunction(
            lambda x: c * self.value(x),
            lambda x: c * self.gradient(x),
            self.regularity,
            tuple(None if b is None else abs(c) * b for b in self.bounds),
            self.vector,
            self.name,
        )

    def __add__(self, other):
        if self.vector != other.vector:
            raise TypeError("cannot add scalar and vector test functions")
        bounds = tuple(
            None if a is None or b is None else a + b
            for a, b in zip(self.bounds, other.bounds)
        )
        return TestFunction(
            lambda x: self.value(x) + other.value(x),
            lambda x: self.gradient(x) + other.gradient(x),
            min(self.regularity, other.regularity),
            bounds,
            self.vector,
        )


def constant_function(c, dim):
    c = float(c)
    return TestFunction(
        lambda x: np.full(np.shape(x)[:-1], c),
        lambda x: np.zeros(np.shape(x)),
        "C2",
        (abs(c), 0.0, 0.0),
        name=f"const({c})",
    )


def linear_function(coef, offset=0.0):
    """x -> coef . x + offset (bounds of the value are left open)."""
    coef = np.asarray(coef, dtype=float)
    return TestFunction(
        lambda x: x @ coef + offset,
        lambda x: np.broadcast_to(coef, np.shape(x)).copy(),
        "C2",
        (None, float(np.linalg.norm(coef)), 0.0),
        name="linear",
    )


def vector_field(value, jacobian, bounds=(None, None, None), name=""):
    return TestFunction(value, jacobian, "C2", bounds, vector=True, name=name)


# ---------------------------------------------------------------- measures


@dataclass(frozen=True)
class PieceBlock:
    """Constant-density pieces of one geometric kind.

    kind 'box': `lo`, `hi` of shape (n, d); axes with lo == hi are
    collapsed, so grid faces are boxes of one dimension less and in 1-D a
    face is a point carrying counting measure.
    kind 'triangle': `verts` of shape (n, 3, 3). With `spherical` the
    piece lives on the radial image of the triangle on the unit sphere.
    With `pullback` a vector density V acts on b through (DPsi^T V) . b,
    where Psi is the radial map onto the flat triangle.
    """

    kind: str
    density: np.ndarray
    lo: Optional[np.ndarray] = None
    hi: Optional[np.ndarray] = None
    verts: Optional[np.ndarray] = None
    spherical: bool = False
    pullback: bool = False
    labels: Optional[tuple] = None

    def __len__(self):
        return len(self.density)

    @property
    def vector(self):
        return np.ndim(self.density) == 2

    def scaled(self, c):
        return PieceBlock(self.kind, c * self.density, self.lo, self.hi, self.verts,
                          self.spherical, self.pullback, self.labels)

    def region_measure(self):
        if self.kind == "box":
            ext = self.hi - self.lo
            return np.prod(np.where(ext > 0, ext, 1.0), axis=1)
        if self.spherical:
            return spherical_triangle_area(self.verts)
        return quad.triangle_areas(self.verts)

    def diameters(self):
        if self.kind == "box":
            return np.linalg.norm(self.hi - self.lo, axis=1)
        v = self.verts
        edges = np.stack([np.linalg.norm(v[:, i] - v[:, (i + 1) % 3], axis=1)
                          for i in range(3)], axis=1)
        diam = edges.max(axis=1)
        return diam * (np.pi / 2 if self.spherical else 1.0)

    def quadrature(self, order=quad.DEFAULT_ORDER):
        """Nodes (n, q, d) on the region and weights (n, q) w.r.t. its measure.

        Also returns, for pullback pieces, the transported densities
        (n, q, d), otherwise None.
        """
        if self.kind == "box":
            nodes, weights = quad.box_nodes(self.lo, self.hi, order)
            return nodes, weights, None
        flat_nodes, weights, _ = quad.triangle_nodes(self.verts, order)
        if not self.spherical:
            return flat_nodes, weights, None
        normal, offset = triangle_planes(self.verts)
        weights = weights * quad.radial_jacobian(flat_nodes, offset)
        # exact on constants: the solid angle is known in closed form
        weights *= (spherical_triangle_area(self.verts) / weights.sum(axis=1))[:, None]
        nodes = flat_nodes / np.linalg.norm(flat_nodes, axis=-1, keepdims=True)
        transported = None
        if self.pullback and self.vector:
            transported = radial_pullback(nodes, normal, offset, self.density)
        return nodes, weights, transported


def triangle_planes(verts):
    """Outward unit normals n_K and offsets h_K = n_K . vertex."""
    n = np.cross(verts[:, 1] - verts[:, 0], verts[:, 2] - verts[:, 0])
    n /= np.linalg.norm(n, axis=1, keepdims=True)
    h = np.einsum("nd,nd->n", n, verts[:, 0])
    flip = h < 0
    n[flip] *= -1
    h[flip] *= -1
    return n, h


def radial_pullback(x, normal, offset, vec):
    """DPsi(x)^T V for Psi(x) = h x / (n . x), evaluated at sphere points x."""
    nx = np.einsum("nqd,nd->nq", x, normal)
    xv = np.einsum("nqd,nd->nq", x, vec)
    h = offset[:, None]
    return (h / nx)[..., None] * vec[:, None, :] - (h * xv / nx**2)[..., None] * normal[:, None, :]


def spherical_triangle_area(verts):
    """Solid angle of the radial image of each triangle."""
    a, b, c = (verts[:, i] / np.linalg.norm(verts[:, i], axis=1, keepdims=True)
               for i in range(3))
    num = np.abs(np.einsum("nd,nd->n", a, np.cross(b, c)))
    den = (1 + np.einsum("nd,nd->n", a, b) + np.einsum("nd,nd->n", b, c)
           + np.einsum("nd,nd->n", c, a))
    return 2 * np.arctan2(num, den)


@dataclass(frozen=True)
class GenericMeasure:
    """Weighted atoms plus constant-density pieces, scalar or vector valued."""

    dim: int
    atoms_x: np.ndarray = field(default=None)
    atoms_w: np.ndarray = field(default=None)
    blocks: tuple = ()
    vector: bool = False

    def __post_init__(self):
        d = self.dim
        ax = np.zeros((0, d)) if self.atoms_x is None else np.asarray(self.atoms_x, float).reshape(-1, d)
        default_w = np.zeros((0, d)) if self.vector else np.zeros(0)
        aw = default_w if self.atoms_w is None else np.asarray(self.atoms_w, float)
        if self.vector:
            aw = aw.reshape(-1, d)
        else:
            aw = aw.reshape(-1)
        if len(ax) != len(aw):
            raise ValueError("atom positions and weights differ in length")
        for b in self.blocks:
            if b.vector != self.vector:
                raise TypeError("piece density kind does not match the measure")
        object.__setattr__(self, "atoms_x", ax)
        object.__setattr__(self, "atoms_w", aw)
        object.__setattr__(self, "blocks", tuple(b for b in self.blocks if len(b)))

    # construction helpers
    @classmethod
    def dirac(cls, x, weight=1.0):
        x = np.atleast_1d(np.asarray(x, dtype=float))
        w = np.asarray(weight, dtype=float)
        return cls(len(x), x[None, :], w[None, ...], vector=w.ndim == 1)

    @classmethod
    def atomic(cls, xs, ws):
        xs = np.asarray(xs, dtype=float)
        if xs.ndim == 1:
            xs = xs[:, None]
        ws = np.asarray(ws, dtype=float)
        return cls(xs.shape[1], xs, ws, vector=ws.ndim == 2)

    @classmethod
    def uniform_box(cls, lo, hi, mass=1.0):
        lo = np.atleast_1d(np.asarray(lo, dtype=float))
        hi = np.atleast_1d(np.asarray(hi, dtype=float))
        vol = np.prod(hi - lo)
        if not vol > 0:
            raise ValueError("uniform measure needs a box of positive volume")
        block = PieceBlock("box", np.array([mass / vol]), lo[None], hi[None])
        return cls(len(lo), blocks=(block,))

    @classmethod
    def zero(cls, dim, vector=False):
        return cls(dim, vector=vector)

    # algebra
    def __add__(self, other):
        if self.dim != other.dim or self.vector != other.vector:
            raise TypeError("incompatible measures")
        return GenericMeasure(
            self.dim,
            np.concatenate([self.atoms_x, other.atoms_x]),
            np.concatenate([self.atoms_w, other.atoms_w]),
            self.blocks + other.blocks,
            self.vector,
        )

    def scaled(self, c):
        return GenericMeasure(self.dim, self.atoms_x, c * self.atoms_w,
                              tuple(b.scaled(c) for b in self.blocks), self.vector)

    def __mul__(self, c):
        return self.scaled(float(c))

    __rmul__ = __mul__

    # summaries
    def mass(self):
        if self.vector:
            raise TypeError("mass of a vector measure; use total_variation")
        total = float(np.sum(self.atoms_w))
        for b in self.blocks:
            total += float(np.sum(b.density * b.region_measure()))
        return total

    def total_variation(self, order=quad.DEFAULT_ORDER):
        """Atom weights plus integrals of the pointwise density norm."""
        if not self.vector:
            total = float(np.sum(np.abs(self.atoms_w)))
            for b in self.blocks:
                total += float(np.sum(np.abs(b.density) * b.region_measure()))
            return total
        total = float(np.sum(np.linalg.norm(self.atoms_w, axis=1)))
        for b in self.blocks:
            nodes, weights, transported = b.quadrature(order)
            if transported is None:
                total += float(np.sum(np.linalg.norm(b.density, axis=1) * b.region_measure()))
            else:
                total += float(np.sum(weights * np.linalg.norm(transported, axis=-1)))
        return total

    @property
    def is_nonnegative(self):
        if self.vector:
            return False
        return bool(np.all(self.atoms_w >= 0) and all(np.all(b.density >= 0) for b in self.blocks))

    def pair(self, f, order=quad.DEFAULT_ORDER):
        return pair(self, f, order)

    # serialization
    def to_json(self):
        atoms = [{"x": x.tolist(), "w": w.tolist() if self.vector else float(w)}
                 for x, w in zip(self.atoms_x, self.atoms_w)]
        pieces = []
        for b in self.blocks:
            for i in range(len(b)):
                dens = b.density[i].tolist() if b.vector else float(b.density[i])
                label = b.labels[i] if b.labels is not None else None
                if label is not None:
                    region = dict(label)
                elif b.kind == "box":
                    region = {"kind": "box", "lo": b.lo[i].tolist(), "hi": b.hi[i].tolist()}
                else:
                    region = {"kind": "triangle", "vertices": b.verts[i].tolist(),
                              "spherical": b.spherical}
                if b.pullback:
                    region["pullback"] = True
                pieces.append({"region": region, "density": dens})
        return {"dim": self.dim, "atoms": atoms, "pieces": pieces}

    @classmethod
    def from_json(cls, data, meshes=None):
        """Build a measure; mesh-referenced regions resolve through `meshes`.

        `meshes` maps the id used in the JSON to an object exposing
        ``region_geometry(kind, index)``.
        """
        meshes = meshes or {}
        atoms = data.get("atoms", [])
        pieces = data.get("pieces", [])
        dim = data.get("dim")
        if dim is None:
            if atoms:
                dim = len(atoms[0]["x"])
            elif pieces:
                dim = _region_dim(pieces[0]["region"], meshes)
            else:
                raise ValueError("cannot infer the dimension of an empty measure")
        vector = any(np.ndim(a["w"]) == 1 for a in atoms) or any(
            np.ndim(p["density"]) == 1 for p in pieces)
        xs = np.array([a["x"] for a in atoms], dtype=float).reshape(-1, dim)
        ws = np.array([a["w"] for a in atoms], dtype=float)
        blocks = [_piece_block(p, meshes) for p in pieces]
        return cls(dim, xs, ws, tuple(blocks), vector)


def _region_geometry(region, meshes):
    kind = region["kind"]
    if kind == "box":
        return "box", np.asarray(region["lo"], float), np.asarray(region["hi"], float), False
    if kind == "triangle" and "vertices" in region:
        return "triangle", np.asarray(region["vertices"], float), None, bool(region.get("spherical"))
    mesh_id = region.get("mesh")
    if mesh_id not in meshes:
        raise KeyError(f"region refers to unknown mesh {mesh_id!r}")
    return meshes[mesh_id].region_geometry(kind, int(region["index"]))


def _region_dim(region, meshes):
    kind, a, _, _ = _region_geometry(region, meshes)
    return a.shape[-1]


def _piece_block(piece, meshes):
    region = piece["region"]
    kind, a, b, spherical = _region_geometry(region, meshes)
    density = np.asarray(piece["density"], dtype=float)[None, ...]
    label = None
    if "mesh" in region:
        label = ({"kind": region["kind"], "mesh": region["mesh"], "index": int(region["index"])},)
    if kind == "box":
        return PieceBlock("box", density, a[None], b[None], labels=label)
    return PieceBlock("triangle", density, verts=a[None], spherical=spherical,
                      pullback=bool(region.get("pullback")), labels=label)


# ---------------------------------------------------------------- pairing


@dataclass(frozen=True)
class Pairing:
    value: float
    error_bound: float

    def __float__(self):
        return self.value


def pair(mu, f, order=quad.DEFAULT_ORDER):
    """<mu, f> with atoms exact and pieces by Gauss quadrature.

    The error bound of a piece is |density| |region| sup|D^2 f| diam^2
    (or 2 sup|Df| diam for C1 data), valid since every rule used is exact
    at least on affine functions.
    """
    if mu.vector != f.vector:
        raise TypeError("vector/scalar mismatch between measure and test function")
    value = 0.0
    if len(mu.atoms_x):
        fx = f.value(mu.atoms_x)
        value += float(np.sum(mu.atoms_w * fx))
    bound = 0.0
    for b in mu.blocks:
        nodes, weights, transported = b.quadrature(order)
        fx = f.value(nodes.reshape(-1, nodes.shape[-1])).reshape(nodes.shape[:2] + (-1,))
        if not mu.vector:
            value += float(np.sum(b.density * np.sum(weights * fx[..., 0], axis=1)))
            dnorm = np.abs(b.density)
        elif transported is not None:
            value += float(np.sum(weights * np.einsum("nqd,nqd->nq", transported, fx)))
            dnorm = np.max(np.linalg.norm(transported, axis=-1), axis=1)
        else:
            value += float(np.sum(np.einsum("nd,nqd->nq", b.density, fx) * weights))
            dnorm = np.linalg.norm(b.density, axis=1)
        bound += _piece_error_bound(b, f, dnorm)
    return Pairing(value, bound)


def pair_pieces(mu, f, order=quad.DEFAULT_ORDER):
    """Per-piece contributions to <mu, f>, concatenated over blocks (atoms ignored)."""
    if mu.vector != f.vector:
        raise TypeError("vector/scalar mismatch between measure and test function")
    out = []
    for b in mu.blocks:
        nodes, weights, transported = b.quadrature(order)
        fx = f.value(nodes.reshape(-1, nodes.shape[-1])).reshape(nodes.shape[:2] + (-1,))
        if not mu.vector:
            out.append(b.density * np.sum(weights * fx[..., 0], axis=1))
        elif transported is not None:
            out.append(np.sum(weights * np.einsum("nqd,nqd->nq", transported, fx), axis=1))
        else:
            out.append(np.sum(np.einsum("nd,nqd->nq", b.density, fx) * weights, axis=1))
    return np.concatenate(out) if out else np.zeros(0)


def _piece_error_bound(block, f, dnorm):
    region = block.region_measure()
    diam = block.diameters()
    b1, b2 = f.bounds[1], f.bounds[2]
    if b2 is not None:
        per = region * b2 * diam**2
    elif b1 is not None:
        per = region * 2 * b1 * diam
    else:
        return float("inf")
    return float(np.sum(dnorm * per))


# ---------------------------------------------------------------- oracles


@dataclass(frozen=True)
class W2Result:
    value: float
    plan: Optional[list] = None


def sphere_distance(x, y):
    x = np.asarray(x, float)
    y = np.asarray(y, float)
    return np.arctan2(np.linalg.norm(np.cross(x, y), axis=-1), np.sum(x * y, axis=-1))


def _check_on_sphere(x):
    r = np.linalg.norm(np.asarray(x, float), axis=-1)
    if np.any(np.abs(r - 1) > SPHERE_TOL):
        raise ValueError("point is not on the unit sphere")


def w2_dirac(x, y, metric="flat"):
    """Squared distance between two points, the W2^2 of two unit Diracs."""
    x = np.atleast_1d(np.asarray(x, float))
    y = np.atleast_1d(np.asarray(y, float))
    if metric == "flat":
        return float(np.sum((x - y) ** 2))
    if metric == "sphere":
        _check_on_sphere(x)
        _check_on_sphere(y)
        return float(sphere_distance(x, y) ** 2)
    raise ValueError(f"unknown metric {metric!r}")


def _check_masses(ma, mb):
    if abs(ma - mb) > MASS_TOL * max(1.0, abs(ma), abs(mb)):
        raise MassMismatchError(ma, mb)


def _quantile_segments(mu):
    """Piecewise-linear quantile function of a nonnegative 1-D measure.

    Returns arrays (s0, s1, x0, x1): on [s0, s1] the quantile runs
    linearly from x0 to x1; atoms are flat segments.
    """
    if mu.dim != 1 or mu.vector:
        raise ValueError("quantile oracle needs a scalar measure on a line")
    if not mu.is_nonnegative:
        raise ValueError("quantile oracle needs a nonnegative measure")
    ax = list(mu.atoms_x[:, 0])
    aw = list(mu.atoms_w)
    lo, hi, dens = [], [], []
    for b in mu.blocks:
        if b.kind != "box":
            raise ValueError("quantile oracle handles interval pieces only")
        for l, h, c in zip(b.lo[:, 0], b.hi[:, 0], b.density):
            if h > l:
                lo.append(l)
                hi.append(h)
                dens.append(c)
            else:
                ax.append(l)
                aw.append(c)
    ax, aw = np.asarray(ax, float), np.asarray(aw, float)
    lo, hi, dens = np.asarray(lo), np.asarray(hi), np.asarray(dens)
    xs = np.unique(np.concatenate([ax, lo, hi]))
    # density on (xs[i], xs[i+1])
    if len(lo):
        mids = 0.5 * (xs[:-1] + xs[1:])
        cover = (lo[None, :] <= mids[:, None]) & (mids[:, None] < hi[None, :])
        cdens = cover @ dens
    else:
        cdens = np.zeros(max(len(xs) - 1, 0))
    amass = np.zeros(len(xs))
    np.add.at(amass, np.searchsorted(xs, ax), aw)
    s0, s1, x0, x1 = [], [], [], []
    s = 0.0
    for i, x in enumerate(xs):
        if amass[i] > 0:
            s0.append(s); s1.append(s + amass[i]); x0.append(x); x1.append(x)
            s += amass[i]
        if i < len(cdens) and cdens[i] > 0:
            m = cdens[i] * (xs[i + 1] - x)
            s0.append(s); s1.append(s + m); x0.append(x); x1.append(xs[i + 1])
            s += m
    return np.array(s0), np.array(s1), np.array(x0), np.array(x1)


def _quantile_at(seg, s, mid):
    """Quantile on the segment containing `mid`, extended linearly to `s`."""
    s0, s1, x0, x1 = seg
    j = np.clip(np.searchsorted(s1, mid, side="left"), 0, len(s1) - 1)
    slope = np.where(s1[j] > s0[j], (x1[j] - x0[j]) / np.where(s1[j] > s0[j], s1[j] - s0[j], 1.0), 0.0)
    return x0[j] + slope * (s - s0[j])


def w2_1d_quantile(mu, nu, grid=64):
    """Squared W2 between 1-D measures by integrating quantile differences.

    Integration nodes are the union of both quantile breakpoints and a
    uniform grid of `grid` cells. On each sub-interval both quantiles are
    affine, so Simpson's rule is exact there.
    """
    ma, mb = mu.mass(), nu.mass()
    _check_masses(ma, mb)
    if ma == 0:
        return 0.0
    qa, qb = _quantile_segments(mu), _quantile_segments(nu)
    nodes = np.unique(np.concatenate([
        qa[0], qa[1], qb[0], qb[1], np.linspace(0.0, ma, max(int(grid), 1) + 1)]))
    nodes = nodes[(nodes >= 0) & (nodes <= ma)]
    a, b = nodes[:-1], nodes[1:]
    keep = b > a
    a, b = a[keep], b[keep]
    m = 0.5 * (a + b)
    diff = lambda s: _quantile_at(qa, s, m) - _quantile_at(qb, s, m)
    vals = (b - a) / 6 * (diff(a) ** 2 + 4 * diff(m) ** 2 + diff(b) ** 2)
    return float(np.sum(vals))


def w2_lp_bruteforce(mu, nu, metric="flat"):
    """Exact discrete transport LP between two atomic measures."""
    for m in (mu, nu):
        if m.blocks or m.vector:
            raise ValueError("LP oracle needs finite atomic scalar measures")
        if len(m.atoms_w) > LP_MAX_ATOMS:
            raise ValueError(f"LP oracle capped at {LP_MAX_ATOMS} atoms, got {len(m.atoms_w)}")
    _check_masses(mu.mass(), nu.mass())
    x, a = mu.atoms_x, mu.atoms_w
    y, b = nu.atoms_x, nu.atoms_w
    n, k = len(a), len(b)
    if n == 0 or k == 0:
        return W2Result(0.0, [])
    if metric == "flat":
        cost = np.sum((x[:, None, :] - y[None, :, :]) ** 2, axis=2)
    elif metric == "sphere":
        _check_on_sphere(x)
        _check_on_sphere(y)
        cost = sphere_distance(x[:, None, :], y[None, :, :]) ** 2
    else:
        raise ValueError(f"unknown metric {metric!r}")
    rows = np.zeros((n + k, n * k))
    for i in range(n):
        rows[i, i * k:(i + 1) * k] = 1.0
    for j in range(k):
        rows[n + j, j::k] = 1.0
    res = linprog(cost.ravel(), A_eq=rows, b_eq=np.concatenate([a, b]),
                  bounds=(0, None), method="highs")
    if res.status != 0:
        raise RuntimeError(f"transport LP failed: {res.message}")
    plan_mat = res.x.reshape(n, k)
    plan = [(i, j, float(plan_mat[i, j])) for i in range(n) for j in range(k)
            if plan_mat[i, j] > 1e-15]
    value = max(float(np.sum(cost * plan_mat)), 0.0)
    return W2Result(value, plan)
