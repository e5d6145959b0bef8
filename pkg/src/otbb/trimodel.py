"""Triangulated surfaces: the unit sphere and flat planar meshes.

Densities live on vertices, momenta are tangent vectors on triangles.
With |T_v| one third of the area of the triangles around v and
s_K = (P_a + P_b + P_c)/3 the vertex mean on K = (a, b, c):

    Div M_v   = -(1/|T_v|) sum_{K around v} |K| grad(phi_v)|_K . M_K
    A(P, M)   = sum_K |M_K|^2 |K| / (2 s_K)
    A*(P, B)  = sum_K s_K |B_K|^2 |K| / 2
    <M, B>_Y  = sum_K M_K . B_K |K|

On the sphere Psi sends a point x radially onto the mesh,
Psi(x) = h_K x / (n_K . x), and its inverse normalizes. Flat meshes lie
in the plane z = 0 and use the identity.
"""

import json
from dataclasses import dataclass, field
from functools import cached_property

import numpy as np
import scipy.sparse as sp
from scipy.sparse.csgraph import connected_components
from scipy.spatial import cKDTree

from . import quadrature as quad
from .fvmodel import ControllabilityPath, KineticLayout, controllability_from_fields, kinetic_terms, step_factors
from .means import SymmetricMean
from .measures import SPHERE_TOL, GenericMeasure, PieceBlock, spherical_triangle_area
from .timedisc import SpaceTimePath

SURFACES = ("sphere", "flat")
LOCATE_TOL = 1e-10
MAX_SUBDIV = 7


def _orient(vertices, triangles, surface):
    v = vertices[triangles]
    n = np.cross(v[:, 1] - v[:, 0], v[:, 2] - v[:, 0])
    ref = v.mean(axis=1) if surface == "sphere" else np.array([0.0, 0.0, 1.0])
    flip = np.einsum("nd,nd->n", n, np.broadcast_to(ref, n.shape)) < 0
    tris = triangles.copy()
    tris[flip] = tris[flip][:, [0, 2, 1]]
    return tris


@dataclass(frozen=True, eq=False)
class TriMesh:
    """Triangulation with outward (sphere) or +z (flat) orientation.

    Derived fields: `areas`, `normals`, `offsets` (plane distances
    h_K = n_K . p), `hat_grads` (nT, 3, 3) with the gradient of each local
    hat function, `tangents` (nT, 2, 3) orthonormal per triangle and
    `vertex_areas`.
    """

    vertices: np.ndarray
    triangles: np.ndarray
    surface: str = "sphere"
    mesh_id: str = "tri"
    areas: np.ndarray = field(init=False, repr=False)
    normals: np.ndarray = field(init=False, repr=False)
    offsets: np.ndarray = field(init=False, repr=False)
    hat_grads: np.ndarray = field(init=False, repr=False)
    tangents: np.ndarray = field(init=False, repr=False)
    vertex_areas: np.ndarray = field(init=False, repr=False)

    def __post_init__(self):
        if self.surface not in SURFACES:
            raise ValueError(f"unknown surface {self.surface!r}; expected one of {SURFACES}")
        verts = np.asarray(self.vertices, dtype=float)
        if verts.ndim != 2 or verts.shape[1] not in (2, 3):
            raise ValueError("vertices must have shape (n, 3)")
        if verts.shape[1] == 2:
            verts = np.column_stack([verts, np.zeros(len(verts))])
        tris = np.asarray(self.triangles, dtype=np.int64).reshape(-1, 3)
        if len(tris) == 0:
            raise ValueError("a triangulation needs at least one triangle")
        if tris.min() < 0 or tris.max() >= len(verts):
            raise ValueError("triangle refers to a missing vertex")
        if self.surface == "sphere" and np.max(np.abs(np.linalg.norm(verts, axis=1) - 1)) > 1e-9:
            raise ValueError("sphere mesh vertices must lie on the unit sphere")
        if self.surface == "flat" and np.max(np.abs(verts[:, 2])) > 1e-12:
            raise ValueError("flat mesh vertices must lie in the plane z = 0")
        tris = _orient(verts, tris, self.surface)
        v = verts[tris]
        cr = np.cross(v[:, 1] - v[:, 0], v[:, 2] - v[:, 0])
        dbl = np.linalg.norm(cr, axis=1)
        if np.any(dbl <= 0):
            raise ValueError("degenerate triangle")
        n = cr / dbl[:, None]
        # grad phi_i = n x (opposite edge) / (2 |K|) for counterclockwise corners
        grads = np.stack([np.cross(n, v[:, (i + 2) % 3] - v[:, (i + 1) % 3]) / dbl[:, None]
                          for i in range(3)], axis=1)
        t1 = v[:, 1] - v[:, 0]
        t1 /= np.linalg.norm(t1, axis=1, keepdims=True)
        t2 = np.cross(n, t1)
        areas = 0.5 * dbl
        vareas = np.zeros(len(verts))
        np.add.at(vareas, tris.ravel(), np.repeat(areas / 3, 3))
        if np.any(vareas <= 0):
            raise ValueError("mesh has isolated vertices")
        for name, val in (("vertices", verts), ("triangles", tris), ("areas", areas), ("normals", n),
                          ("offsets", np.einsum("nd,nd->n", n, v[:, 0])), ("hat_grads", grads),
                          ("tangents", np.stack([t1, t2], axis=1)), ("vertex_areas", vareas)):
            object.__setattr__(self, name, val)

    @property
    def n_vertices(self):
        return len(self.vertices)

    @property
    def n_triangles(self):
        return len(self.triangles)

    @property
    def spherical(self):
        return self.surface == "sphere"

    @property
    def corners(self):
        return self.vertices[self.triangles]

    @property
    def sigma(self):
        """Largest triangle diameter."""
        return float(np.max(_edge_lengths(self.corners)))

    def edges(self):
        t = self.triangles
        e = np.concatenate([t[:, [0, 1]], t[:, [1, 2]], t[:, [2, 0]]])
        return np.unique(np.sort(e, axis=1), axis=0)

    def adjacency(self):
        e = self.edges()
        n = self.n_vertices
        return sp.csr_matrix((np.ones(len(e)), (e[:, 0], e[:, 1])), shape=(n, n))

    def n_components(self):
        return int(connected_components(self.adjacency(), directed=False)[0])

    def region_geometry(self, kind, index):
        if kind != "triangle":
            raise ValueError(f"triangle mesh has no {kind!r} regions")
        return "triangle", self.corners[index], None, self.spherical

    def surface_points(self, p):
        """Psi^{-1}: points of the mesh to the surface."""
        p = np.asarray(p, dtype=float)
        if self.spherical:
            return p / np.linalg.norm(p, axis=-1, keepdims=True)
        return p

    def to_mesh_points(self, x, tri):
        """Psi: surface points onto the plane of the given triangles."""
        x = np.asarray(x, dtype=float)
        if not self.spherical:
            return x
        n = self.normals[tri]
        return (self.offsets[tri] / np.einsum("...d,...d->...", n, x))[..., None] * x

    @cached_property
    def locator(self):
        return _Locator(self)

    def to_json(self):
        return {"surface": self.surface, "mesh_id": self.mesh_id,
                "vertices": self.vertices.tolist(), "triangles": self.triangles.tolist()}

    @classmethod
    def from_json(cls, data):
        return cls(np.array(data["vertices"], float), np.array(data["triangles"], int),
                   data.get("surface", "sphere"), data.get("mesh_id", "tri"))


def _edge_lengths(v):
    return np.stack([np.linalg.norm(v[:, i] - v[:, (i + 1) % 3], axis=1) for i in range(3)], axis=1)


class _Locator:
    """Finds the triangle whose Psi-preimage contains each surface point.

    Sphere: x is inside the cone over K when the coefficients of x in the
    basis of K's corners are all nonnegative; normalized, they are the
    barycentric coordinates of Psi(x). Flat: planar barycentric coordinates.
    """

    def __init__(self, mesh):
        self.mesh = mesh
        c = mesh.corners
        if mesh.spherical:
            self.inv = np.linalg.inv(np.transpose(c, (0, 2, 1)))
            cent = c.mean(axis=1)
            cent /= np.linalg.norm(cent, axis=1, keepdims=True)
        else:
            e = np.stack([c[:, 1, :2] - c[:, 0, :2], c[:, 2, :2] - c[:, 0, :2]], axis=2)
            self.inv = np.linalg.inv(e)
            self.origin = c[:, 0, :2]
            cent = c.mean(axis=1)
        self.tree = cKDTree(cent)
        self.k = min(12, mesh.n_triangles)

    def coords(self, x, tri):
        """Barycentric coordinates of Psi(x) in the given triangles."""
        if self.mesh.spherical:
            lam = np.einsum("...ij,...j->...i", self.inv[tri], x)
            return lam / np.sum(lam, axis=-1, keepdims=True)
        l12 = np.einsum("...ij,...j->...i", self.inv[tri], x[..., :2] - self.origin[tri])
        return np.concatenate([1 - l12.sum(axis=-1, keepdims=True), l12], axis=-1)

    def __call__(self, x):
        """(triangle index, barycentric coordinates) per point; raises off the mesh."""
        x = np.atleast_2d(np.asarray(x, dtype=float))
        _, cand = self.tree.query(x, k=self.k)
        cand = cand.reshape(len(x), -1)
        bary = self.coords(x[:, None, :], cand)
        if self.mesh.spherical:
            # the cone test also needs the point on the near side
            front = np.einsum("nd,nkd->nk", x, self.mesh.normals[cand]) > 0
            score = np.where(front, bary.min(axis=-1), -np.inf)
        else:
            score = bary.min(axis=-1)
        best = np.argmax(score, axis=1)
        rows = np.arange(len(x))
        tri = cand[rows, best]
        ok = score[rows, best] >= -LOCATE_TOL
        if not np.all(ok):
            for i in np.flatnonzero(~ok):
                tri[i] = self._search_all(x[i])
        b = self.coords(x, tri)
        b = np.where(b < 1e-14, 0.0, b)
        return tri, b / b.sum(axis=1, keepdims=True)

    def _search_all(self, x):
        allt = np.arange(self.mesh.n_triangles)
        bary = self.coords(np.broadcast_to(x, (len(allt), 3)), allt)
        score = bary.min(axis=1)
        if self.mesh.spherical:
            score = np.where(self.mesh.normals @ x > 0, score, -np.inf)
        t = int(np.argmax(score))
        if score[t] < -LOCATE_TOL:
            raise ValueError(f"point {x.tolist()} is not on the triangulated surface")
        return t


# ---------------------------------------------------------------- builders

_PHI = (1 + 5**0.5) / 2
_ICO_VERTS = np.array([
    [-1, _PHI, 0], [1, _PHI, 0], [-1, -_PHI, 0], [1, -_PHI, 0],
    [0, -1, _PHI], [0, 1, _PHI], [0, -1, -_PHI], [0, 1, -_PHI],
    [_PHI, 0, -1], [_PHI, 0, 1], [-_PHI, 0, -1], [-_PHI, 0, 1],
])
_ICO_FACES = np.array([
    [0, 11, 5], [0, 5, 1], [0, 1, 7], [0, 7, 10], [0, 10, 11],
    [1, 5, 9], [5, 11, 4], [11, 10, 2], [10, 7, 6], [7, 1, 8],
    [3, 9, 4], [3, 4, 2], [3, 2, 6], [3, 6, 8], [3, 8, 9],
    [4, 9, 5], [2, 4, 11], [6, 2, 10], [8, 6, 7], [9, 8, 1],
])


def build_icosphere(subdiv, mesh_id="tri"):
    """Icosahedron split `subdiv` times, vertices pushed to the unit sphere."""
    subdiv = int(subdiv)
    if not 0 <= subdiv <= MAX_SUBDIV:
        raise ValueError(f"subdivision level must be in [0, {MAX_SUBDIV}]")
    verts = _ICO_VERTS / np.linalg.norm(_ICO_VERTS, axis=1, keepdims=True)
    faces = _ICO_FACES.copy()
    for _ in range(subdiv):
        edges = np.concatenate([faces[:, [0, 1]], faces[:, [1, 2]], faces[:, [2, 0]]])
        key = np.sort(edges, axis=1)
        uniq, inv = np.unique(key, axis=0, return_inverse=True)
        mids = verts[uniq[:, 0]] + verts[uniq[:, 1]]
        mids /= np.linalg.norm(mids, axis=1, keepdims=True)
        m = len(verts) + inv.reshape(3, -1).T
        a, b, c = faces.T
        ab, bc, ca = m.T
        faces = np.concatenate([np.stack(t, axis=1) for t in
                                ((a, ab, ca), (b, bc, ab), (c, ca, bc), (ab, bc, ca))])
        verts = np.concatenate([verts, mids])
    return TriMesh(verts, faces, "sphere", mesh_id)


def build_flat_mesh(lo=(0.0, 0.0), hi=(1.0, 1.0), resolution=8, pattern="right", mesh_id="tri"):
    """Planar triangulation of a rectangle.

    pattern 'right' splits each grid square along one diagonal; pattern
    'equilateral' fills the rectangle with rows of equilateral triangles
    of side (hi_x - lo_x)/resolution, clipped to whole rows.
    """
    lo = np.asarray(lo, dtype=float)
    hi = np.asarray(hi, dtype=float)
    n = int(resolution)
    if n < 1 or np.any(hi <= lo):
        raise ValueError("need a positive resolution and lo < hi")
    if pattern == "right":
        xs = np.linspace(lo[0], hi[0], n + 1)
        ys = np.linspace(lo[1], hi[1], n + 1)
        X, Y = np.meshgrid(xs, ys, indexing="ij")
        verts = np.column_stack([X.ravel(), Y.ravel()])
        idx = np.arange((n + 1) ** 2).reshape(n + 1, n + 1)
        a, b, c, d = idx[:-1, :-1].ravel(), idx[1:, :-1].ravel(), idx[1:, 1:].ravel(), idx[:-1, 1:].ravel()
        faces = np.concatenate([np.stack([a, b, c], 1), np.stack([a, c, d], 1)])
        return TriMesh(verts, faces, "flat", mesh_id)
    if pattern == "equilateral":
        h = (hi[0] - lo[0]) / n
        rows = max(1, int(np.floor((hi[1] - lo[1]) / (h * np.sqrt(3) / 2) + 1e-9)))
        pts, index = [], {}
        for j in range(rows + 1):
            shift = 0.5 * h * (j % 2)
            count = n + 1 if j % 2 == 0 else n
            for i in range(count):
                index[(i, j)] = len(pts)
                pts.append((lo[0] + shift + i * h, lo[1] + j * h * np.sqrt(3) / 2))
        faces = []
        for j in range(rows):
            even = j % 2 == 0
            for i in range(n + 1):
                # the row below has n+1 points when even, n when odd
                if even:
                    tri_up = [(i, j), (i + 1, j), (i, j + 1)]
                    tri_dn = [(i + 1, j), (i + 1, j + 1), (i, j + 1)]
                else:
                    tri_up = [(i, j), (i + 1, j + 1), (i, j + 1)]
                    tri_dn = [(i, j), (i + 1, j), (i + 1, j + 1)]
                for t in (tri_up, tri_dn):
                    if all(k in index for k in t):
                        faces.append([index[k] for k in t])
        return TriMesh(np.array(pts), np.array(faces), "flat", mesh_id)
    raise ValueError(f"unknown pattern {pattern!r}")


def load_off(path, surface=None, mesh_id="tri"):
    """ASCII OFF reader; the surface kind is detected when not given."""
    with open(path) as fh:
        tokens = []
        for line in fh:
            line = line.split("#", 1)[0].strip()
            if line:
                tokens.append(line)
    if not tokens or not tokens[0].startswith("OFF"):
        raise ValueError(f"{path}: not an OFF file")
    head = tokens[0][3:].split() or tokens.pop(1).split()
    nv, nf = int(head[0]), int(head[1])
    body = tokens[1:]
    if len(body) < nv + nf:
        raise ValueError(f"{path}: truncated OFF file")
    verts = np.array([[float(x) for x in body[i].split()[:3]] for i in range(nv)])
    faces = []
    for line in body[nv:nv + nf]:
        parts = [int(x) for x in line.split()]
        if parts[0] != 3:
            raise ValueError(f"{path}: only triangular faces are supported")
        faces.append(parts[1:4])
    if surface is None:
        surface = "sphere" if np.allclose(np.linalg.norm(verts, axis=1), 1.0, atol=1e-9) else "flat"
    return TriMesh(verts, np.array(faces), surface, mesh_id)


def write_off(mesh, path):
    with open(path, "w", newline="\n") as fh:
        fh.write("OFF\n")
        fh.write(f"{mesh.n_vertices} {mesh.n_triangles} 0\n")
        for v in mesh.vertices:
            fh.write(" ".join(repr(float(c)) for c in v) + "\n")
        for t in mesh.triangles:
            fh.write(f"3 {t[0]} {t[1]} {t[2]}\n")


def load_mesh(path, mesh_id="tri"):
    """OFF or JSON triangulation by file extension."""
    if str(path).lower().endswith(".off"):
        return load_off(path, mesh_id=mesh_id)
    with open(path) as fh:
        return TriMesh.from_json(json.load(fh))


# ---------------------------------------------------------------- geometry checks


def regularity_witness(mesh):
    """Smallest inradius / diameter ratio over the triangles."""
    e = _edge_lengths(mesh.corners)
    inradius = 2 * mesh.areas / e.sum(axis=1)
    return float(np.min(inradius / e.max(axis=1)))


def vertex_area_defect(mesh):
    return float(abs(mesh.vertex_areas.sum() - mesh.areas.sum()))


def partition_defect(mesh):
    """Largest |sum of hat gradients| over triangles."""
    return float(np.max(np.abs(mesh.hat_grads.sum(axis=1))))


def tangency_defect(mesh):
    return float(np.max(np.abs(np.einsum("nid,nd->ni", mesh.hat_grads, mesh.normals))))


# ---------------------------------------------------------------- operators


def _check_density(mesh, P):
    P = np.asarray(P, dtype=float)
    if P.shape != (mesh.n_vertices,):
        raise ValueError(f"density has shape {P.shape}, mesh has {mesh.n_vertices} vertices")
    return P


def _check_momentum(mesh, M, tol=1e-12):
    M = np.asarray(M, dtype=float)
    if M.shape != (mesh.n_triangles, 3):
        raise ValueError(f"momentum has shape {M.shape}, expected ({mesh.n_triangles}, 3)")
    normal = np.abs(np.einsum("nd,nd->n", M, mesh.normals))
    if np.any(normal > tol * np.maximum(1.0, np.linalg.norm(M, axis=1))):
        raise ValueError("momentum has a component normal to its triangle")
    return M


def triangle_means(mesh, P):
    return np.asarray(P, dtype=float)[mesh.triangles].sum(axis=1) / 3


def tri_divergence(mesh, M):
    M = _check_momentum(mesh, M)
    flux = np.einsum("nid,nd->ni", mesh.hat_grads, M) * mesh.areas[:, None]
    out = np.zeros(mesh.n_vertices)
    np.add.at(out, mesh.triangles.ravel(), flux.ravel())
    return -out / mesh.vertex_areas


def divergence_matrix(mesh):
    """Sparse (vertices x 2 triangles) Div acting on tangent coordinates."""
    coef = np.einsum("nid,njd->nij", mesh.hat_grads, mesh.tangents) * mesh.areas[:, None, None]
    rows = np.repeat(mesh.triangles[:, :, None], 2, axis=2)
    cols = 2 * np.arange(mesh.n_triangles)[:, None, None] + np.arange(2)[None, None, :]
    cols = np.broadcast_to(cols, rows.shape)
    vals = -coef / mesh.vertex_areas[rows]
    return sp.csr_matrix((vals.ravel(), (rows.ravel(), cols.ravel())),
                         shape=(mesh.n_vertices, 2 * mesh.n_triangles))


def tri_action(mesh, P, M):
    """Discrete action; +inf for negative densities or momentum on void."""
    P = _check_density(mesh, P)
    M = _check_momentum(mesh, M)
    if np.any(P < 0):
        return np.inf
    s = triangle_means(mesh, P)
    return float(np.sum(kinetic_terms(mesh.areas, s, np.sum(M**2, axis=1))))


def tri_action_conjugate(mesh, P, B):
    P = _check_density(mesh, P)
    B = np.asarray(B, dtype=float)
    if np.any(P < 0):
        raise ValueError("conjugate action needs a nonnegative density")
    s = triangle_means(mesh, P)
    return float(np.sum(0.5 * s * np.sum(B**2, axis=1) * mesh.areas))


def tri_y_product(mesh, M, B):
    return float(np.sum(np.einsum("nd,nd->n", np.asarray(M, float), np.asarray(B, float)) * mesh.areas))


def tangent_part(mesh, V):
    """Removes the normal component of per-triangle vectors."""
    V = np.asarray(V, dtype=float)
    return V - np.einsum("nd,nd->n", V, mesh.normals)[:, None] * mesh.normals


# ---------------------------------------------------------------- sampling


def _as_surface_points(mesh, x):
    x = np.atleast_2d(np.asarray(x, dtype=float))
    if x.shape[1] == 2 and not mesh.spherical:
        x = np.column_stack([x, np.zeros(len(x))])
    if x.shape[1] != 3:
        raise ValueError("surface points need three coordinates")
    if mesh.spherical:
        off = np.abs(np.linalg.norm(x, axis=1) - 1)
        if np.any(off > SPHERE_TOL * 1e3):
            raise ValueError("atom is not on the unit sphere")
    elif np.any(np.abs(x[:, 2]) > SPHERE_TOL):
        raise ValueError("atom is not in the plane of the flat mesh")
    return x


def dirac_sample(mesh, x):
    """S_X(delta_x): barycentric weights of Psi(x) over vertex areas."""
    tri, bary = mesh.locator(_as_surface_points(mesh, x))
    P = np.zeros(mesh.n_vertices)
    np.add.at(P, mesh.triangles[tri].ravel(), bary.ravel())
    return P / mesh.vertex_areas


def _weighted_hats(mesh, points, masses):
    tri, bary = mesh.locator(points)
    out = np.zeros(mesh.n_vertices)
    np.add.at(out, mesh.triangles[tri].ravel(), (bary * masses[:, None]).ravel())
    return out


def _triangle_quadrature(mesh, order):
    """Surface nodes (nT, q, 3), weights w.r.t. surface measure, and barycentrics."""
    flat, w, bary = quad.triangle_nodes(mesh.corners, order)
    if mesh.spherical:
        w = w * quad.radial_jacobian(flat, mesh.offsets)
        return flat / np.linalg.norm(flat, axis=-1, keepdims=True), w, bary
    return flat, w, bary


def tri_sample_density(mesh, rho, order=quad.DEFAULT_ORDER):
    """(S_X rho)_v = <rho, phi_v o Psi> / |T_v| for a measure or a density function."""
    if callable(rho) and not isinstance(rho, GenericMeasure):
        nodes, w, bary = _triangle_quadrature(mesh, order)
        vals = np.asarray(rho(nodes.reshape(-1, 3))).reshape(w.shape) * w
        out = np.zeros(mesh.n_vertices)
        np.add.at(out, mesh.triangles.ravel(), (vals @ bary).ravel())
        return out / mesh.vertex_areas
    if rho.vector:
        raise TypeError("density sampling needs a scalar measure")
    mass = np.zeros(mesh.n_vertices)
    if len(rho.atoms_w):
        x = _as_surface_points(mesh, rho.atoms_x)
        mass += _weighted_hats(mesh, x, rho.atoms_w)
    for b in rho.blocks:
        nodes, w, _ = b.quadrature(order)
        pts = nodes.reshape(-1, nodes.shape[-1])
        if pts.shape[1] == 2:
            pts = np.column_stack([pts, np.zeros(len(pts))])
        m = (b.density[:, None] * w).ravel()
        mass += _weighted_hats(mesh, pts, m)
    return mass / mesh.vertex_areas


def radial_differential(mesh, x, tri, V):
    """DPsi(x) V for Psi(x) = h x / (n . x) on the plane of `tri`."""
    n = mesh.normals[tri]
    h = mesh.offsets[tri][..., None]
    nx = np.einsum("...d,...d->...", n, x)[..., None]
    nv = np.einsum("...d,...d->...", n, V)[..., None]
    return h * V / nx - h * x * nv / nx**2


def tri_sample_momentum(mesh, m, order=quad.DEFAULT_ORDER):
    """(S_Y m)_K = (1/|K|) integral over Psi^{-1}(K) of DPsi m."""
    fn = m.value if hasattr(m, "value") else m
    if getattr(m, "vector", True) is False:
        raise TypeError("momentum sampling needs a vector field")
    nodes, w, _ = _triangle_quadrature(mesh, order)
    vals = np.asarray(fn(nodes.reshape(-1, 3)), dtype=float).reshape(nodes.shape)
    if mesh.spherical:
        tri = np.broadcast_to(np.arange(mesh.n_triangles)[:, None], w.shape)
        vals = radial_differential(mesh, nodes, tri, vals)
    M = np.einsum("nq,nqd->nd", w, vals) / mesh.areas[:, None]
    return tangent_part(mesh, M)


def tri_reconstruct(mesh, which, values):
    """Measures R^CE(P), R^A(P) or R_Y(M), pulled back to the surface."""
    values = np.asarray(values, dtype=float)
    labels = tuple({"kind": "triangle", "mesh": mesh.mesh_id, "index": i} for i in range(mesh.n_triangles))
    if which == "CE":
        P = _check_density(mesh, values)
        return GenericMeasure(3, mesh.surface_points(mesh.vertices), P * mesh.vertex_areas)
    if which == "A":
        s = triangle_means(mesh, _check_density(mesh, values))
        block = PieceBlock("triangle", s, verts=mesh.corners, spherical=mesh.spherical, labels=labels)
        return GenericMeasure(3, blocks=(block,))
    if which == "Y":
        M = _check_momentum(mesh, values)
        block = PieceBlock("triangle", M.copy(), verts=mesh.corners, spherical=mesh.spherical,
                           pullback=mesh.spherical, labels=labels)
        return GenericMeasure(3, blocks=(block,), vector=True)
    raise ValueError(f"unknown reconstruction {which!r}")


def uniform_measure(mesh, mass=1.0):
    """Uniform measure on the surface (sphere or the flat mesh's region)."""
    if mesh.spherical:
        area = spherical_triangle_area(mesh.corners)
    else:
        area = mesh.areas
    dens = np.full(mesh.n_triangles, mass / area.sum())
    block = PieceBlock("triangle", dens, verts=mesh.corners, spherical=mesh.spherical)
    return GenericMeasure(3, blocks=(block,))


# ---------------------------------------------------------------- controllability

_G3, _W3 = np.polynomial.legendre.leggauss(3)
_G3 = 0.5 * (_G3 + 1)
_W3 = 0.5 * _W3


class Geodesic:
    """Constant-speed geodesic on the unit sphere or a straight segment."""

    def __init__(self, x, y, spherical):
        self.x = np.asarray(x, dtype=float)
        self.y = np.asarray(y, dtype=float)
        self.spherical = spherical
        if spherical:
            cross = np.linalg.norm(np.cross(self.x, self.y))
            self.length = float(np.arctan2(cross, self.x @ self.y))
            u = self.y - (self.x @ self.y) * self.x
            if np.linalg.norm(u) < 1e-12:
                # antipodal pair: the great circle through a fixed reference axis
                ref = np.array([0.0, 0.0, 1.0]) if abs(self.x[2]) < 0.9 else np.array([1.0, 0.0, 0.0])
                u = ref - (ref @ self.x) * self.x
            self.u = u / np.linalg.norm(u)
        else:
            self.length = float(np.linalg.norm(self.y - self.x))

    def __call__(self, t):
        t = np.asarray(t, dtype=float)[..., None]
        if self.spherical:
            a = self.length * t
            return np.cos(a) * self.x + np.sin(a) * self.u
        return self.x + t * (self.y - self.x)

    def edge_crossings(self, mesh):
        """Curve parameters in (0, 1) where the image crosses a mesh edge."""
        e = mesh.edges()
        a, b = mesh.vertices[e[:, 0]], mesh.vertices[e[:, 1]]
        if self.spherical:
            w = np.cross(a, b)
            A, B = w @ self.x, w @ self.u
            base = np.arctan2(-A, B)
            phis = np.concatenate([base + k * np.pi for k in (-1, 0, 1, 2)])
            wk = np.tile(w, (4, 1))
            ak, bk = np.tile(a, (4, 1)), np.tile(b, (4, 1))
            ok = (phis > 0) & (phis < self.length) & np.tile(np.hypot(A, B) > 1e-14, 4)
            g = np.cos(phis)[:, None] * self.x + np.sin(phis)[:, None] * self.u
            scale = np.linalg.norm(wk, axis=1)
            tol = 1e-12 * scale
            inside = ((np.einsum("nd,nd->n", np.cross(ak, g), wk) >= -tol)
                      & (np.einsum("nd,nd->n", np.cross(g, bk), wk) >= -tol)
                      & (np.einsum("nd,nd->n", g, ak + bk) > 0))
            return np.sort(phis[ok & inside] / self.length)
        d = (self.y - self.x)[:2]
        ev = (b - a)[:, :2]
        rhs = (a[:, :2] - self.x[:2])
        det = -d[0] * ev[:, 1] + d[1] * ev[:, 0]
        good = np.abs(det) > 1e-14 * np.linalg.norm(d) * np.linalg.norm(ev, axis=1)
        safe = np.where(good, det, 1.0)
        t = (-rhs[:, 0] * ev[:, 1] + rhs[:, 1] * ev[:, 0]) / safe
        s = (d[0] * rhs[:, 1] - d[1] * rhs[:, 0]) / safe
        keep = good & (t > 0) & (t < 1) & (s >= -1e-12) & (s <= 1 + 1e-12)
        return np.sort(t[keep])


def curve_fields(mesh, geo):
    """P-hat, M-hat_1, M-hat_2 and the triangles crossed, for a geodesic.

    The curve is split where it crosses edges. On each piece inside K the
    image c(t) lies in K's plane and, with 3-point Gauss in t,

        M1_K += -[(1 - t) c]_{t0}^{t1} - int c dt      (over |K|)
        M2_K +=  [t c]_{t0}^{t1} - int c dt            (over |K|)
        P_v  +=  int phi_v(c) dt                        (over |T_v|)

    Since phi_v is affine on K the same rule makes the two discrete
    continuity identities hold to round-off.
    """
    cuts = geo.edge_crossings(mesh)
    ts = np.concatenate([[0.0], cuts, [1.0]])
    ts = ts[np.concatenate([[True], np.diff(ts) > 1e-13])]
    ts[-1] = 1.0
    t0, t1 = ts[:-1], ts[1:]
    tri, _ = mesh.locator(geo(0.5 * (t0 + t1)))
    h = (t1 - t0)[:, None]
    tq = t0[:, None] + h * _G3[None, :]
    wq = h * _W3[None, :]
    triq = np.broadcast_to(tri[:, None], tq.shape)
    cq = mesh.to_mesh_points(geo(tq), triq)
    c0 = mesh.to_mesh_points(geo(t0), tri)
    c1 = mesh.to_mesh_points(geo(t1), tri)
    integral = np.einsum("sq,sqd->sd", wq, cq)
    m1 = -((1 - t1)[:, None] * c1 - (1 - t0)[:, None] * c0 + integral)
    m2 = t1[:, None] * c1 - t0[:, None] * c0 - integral
    M1 = np.zeros((mesh.n_triangles, 3))
    M2 = np.zeros((mesh.n_triangles, 3))
    np.add.at(M1, tri, m1)
    np.add.at(M2, tri, m2)
    M1 = tangent_part(mesh, M1 / mesh.areas[:, None])
    M2 = tangent_part(mesh, M2 / mesh.areas[:, None])
    bary = mesh.locator.coords(geo(tq), triq)
    P = np.zeros(mesh.n_vertices)
    np.add.at(P, mesh.triangles[triq].ravel(), (bary * wq[..., None]).ravel())
    return P / mesh.vertex_areas, M1, M2, [int(k) for k in dict.fromkeys(tri.tolist())]


def tri_controllability_path(mesh, x, y, N):
    """Explicit path from S(delta_x) to S(delta_y) along the geodesic."""
    x = _as_surface_points(mesh, x)[0]
    y = _as_surface_points(mesh, y)[0]
    start = dirac_sample(mesh, x)
    end = dirac_sample(mesh, y)
    act = lambda P, M: tri_action(mesh, P, M)
    geo = Geodesic(x, y, mesh.spherical)
    if geo.length <= 1e-15:
        path = SpaceTimePath.constant(start, N, (mesh.n_triangles, 3))
        return ControllabilityPath(path, 0.0, [], (0.0, 0.0), step_factors(N))
    Phat, M1, M2, crossed = curve_fields(mesh, geo)
    path, cost = controllability_from_fields(N, start, end, Phat, M1, M2, act)
    return ControllabilityPath(path, cost, crossed, (act(Phat, M1), act(Phat, M2)), step_factors(N))


# ---------------------------------------------------------------- distortion


@dataclass
class DistortionReport:
    """Area coefficients alpha_v, beta_K, metric coefficients theta_K and
    the largest deviation between triangle and surface normals."""

    normal_deviation: float
    alpha: np.ndarray
    beta: np.ndarray
    theta: np.ndarray

    def suprema(self):
        return {"normal_deviation": float(self.normal_deviation),
                "alpha": float(np.max(np.abs(self.alpha))),
                "beta": float(np.max(np.abs(self.beta))),
                "theta": float(np.max(self.theta))}


def _tangent_frames(x):
    ref = np.where(np.abs(x[..., :1]) < 0.9, np.array([1.0, 0.0, 0.0]), np.array([0.0, 1.0, 0.0]))
    e1 = ref - np.einsum("...d,...d->...", ref, x)[..., None] * x
    e1 /= np.linalg.norm(e1, axis=-1, keepdims=True)
    return e1, np.cross(x, e1)


def tri_distortion(mesh, order=quad.DEFAULT_ORDER):
    if not mesh.spherical:
        z = np.zeros
        return DistortionReport(0.0, z(mesh.n_vertices), z(mesh.n_triangles), z(mesh.n_triangles))
    nodes, w, bary = _triangle_quadrature(mesh, order)
    hat_mass = np.zeros(mesh.n_vertices)
    np.add.at(hat_mass, mesh.triangles.ravel(), (w @ bary).ravel())
    alpha = hat_mass / mesh.vertex_areas - 1
    beta = spherical_triangle_area(mesh.corners) / mesh.areas - 1
    # metric distortion sampled at quadrature nodes and corners
    corners = mesh.surface_points(mesh.corners)
    pts = np.concatenate([nodes, corners], axis=1)
    tri = np.broadcast_to(np.arange(mesh.n_triangles)[:, None], pts.shape[:2])
    e1, e2 = _tangent_frames(pts)
    J = np.stack([radial_differential(mesh, pts, tri, e1), radial_differential(mesh, pts, tri, e2)], axis=-1)
    sv = np.linalg.svd(J, compute_uv=False)
    theta = np.max(np.abs(sv - 1), axis=(1, 2))
    dev = np.linalg.norm(corners - mesh.normals[:, None, :], axis=-1)
    return DistortionReport(float(np.max(dev)), alpha, beta, theta)


def geometry_report(mesh):
    rep = {
        "surface": mesh.surface,
        "vertices": mesh.n_vertices,
        "triangles": mesh.n_triangles,
        "sigma": mesh.sigma,
        "regularity_witness": regularity_witness(mesh),
        "vertex_area_defect": vertex_area_defect(mesh),
        "partition_defect": partition_defect(mesh),
        "tangency_defect": tangency_defect(mesh),
        "components": mesh.n_components(),
    }
    rep.update({f"distortion_{k}": v for k, v in tri_distortion(mesh).suprema().items()})
    return rep


# ---------------------------------------------------------------- model handle


class TriModel:
    """Triangulation model handle consumed by timedisc, solver and verify.

    The solver sees each momentum through its two coordinates in the
    triangle's tangent frame.
    """

    kind = "tri"

    def __init__(self, mesh):
        self.mesh = mesh
        self.mean = SymmetricMean("arithmetic")
        self._div = divergence_matrix(mesh)

    def __repr__(self):
        return f"TriModel({self.mesh.surface}, vertices={self.mesh.n_vertices})"

    @property
    def metric(self):
        return self.mesh.surface

    @property
    def dim(self):
        return 3

    @property
    def sigma(self):
        return self.mesh.sigma

    @property
    def n_density(self):
        return self.mesh.n_vertices

    @property
    def momentum_shape(self):
        return (self.mesh.n_triangles, 3)

    @property
    def density_weights(self):
        return self.mesh.vertex_areas

    def div_matrix(self):
        return self._div

    def momentum_to_dofs(self, M):
        M = np.asarray(M, dtype=float)
        return np.einsum("nkd,nd->nk", self.mesh.tangents, M).reshape(-1)

    def dofs_to_momentum(self, m):
        m = np.asarray(m, dtype=float).reshape(-1, 2)
        return np.einsum("nk,nkd->nd", m, self.mesh.tangents)

    def divergence(self, M):
        return tri_divergence(self.mesh, tangent_part(self.mesh, M))

    def action(self, P, M):
        return tri_action(self.mesh, P, tangent_part(self.mesh, M))

    def action_conjugate(self, P, B):
        return tri_action_conjugate(self.mesh, P, B)

    def y_product(self, M, B):
        return tri_y_product(self.mesh, M, B)

    def drop_void_momentum(self, Q, M, tol):
        M = np.asarray(M, dtype=float)
        void = (triangle_means(self.mesh, Q) <= 0) & (np.linalg.norm(M, axis=1) <= tol)
        return np.where(void[:, None], 0.0, M)

    def y_weights(self):
        return np.repeat(self.mesh.areas, 2)

    def conjugate_dofs(self, Q, B):
        return tri_action_conjugate(self.mesh, np.maximum(Q, 0.0), np.asarray(B).reshape(-1, 2))

    def y_product_dofs(self, M, B):
        return float(np.sum(np.asarray(M) * np.asarray(B) * self.y_weights()))

    def conjugate_gradient(self, Q, B):
        """Partial derivatives of A*(Q, B) in Q."""
        c = np.sum(np.asarray(B).reshape(-1, 2) ** 2, axis=1) * self.mesh.areas / 6
        out = np.zeros(self.mesh.n_vertices)
        np.add.at(out, self.mesh.triangles.ravel(), np.repeat(c, 3))
        return out

    def kinetic_layout(self):
        m = self.mesh
        rows = np.repeat(np.arange(m.n_triangles), 3)
        L = sp.csr_matrix((np.full(3 * m.n_triangles, 1 / 3), (rows, m.triangles.ravel())),
                          shape=(m.n_triangles, m.n_vertices))
        return KineticLayout(m.n_triangles, 2, m.areas, self.mean, mean_matrix=L)

    def sample_density(self, rho):
        return tri_sample_density(self.mesh, rho)

    def sample_momentum(self, m):
        return tri_sample_momentum(self.mesh, m)

    def reconstruct(self, which, values):
        return tri_reconstruct(self.mesh, which, values)

    def potential_nodes(self):
        return self.mesh.surface_points(self.mesh.vertices)

    def n_components(self):
        return self.mesh.n_components()

    def controllability_path(self, x, y, N):
        return tri_controllability_path(self.mesh, x, y, N)

    def geometry_report(self):
        return geometry_report(self.mesh)
