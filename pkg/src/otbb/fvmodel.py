"""Finite-volume model on admissible meshes.

Densities live on cells, momenta on interior faces (one value per face,
oriented by the face normal from its first to its second cell). With
face measure |f| and center distance d_f, and theta a symmetric mean:

    Div M_K   = sum_f +-|f|/|K| M_f
    A(P, M)   = sum_f M_f^2 |f| d_f / (2 theta(P_K, P_L))
    A*(P, B)  = sum_f theta(P_K, P_L) B_f^2 |f| d_f / 2
    <M, B>_Y  = sum_f M_f B_f |f| d_f

In 1-D the face measure is 1.
"""

import json
from dataclasses import dataclass, field
from typing import Optional

import numpy as np
import scipy.sparse as sp
from scipy.sparse.csgraph import breadth_first_order, connected_components

from . import quadrature as quad
from .means import SymmetricMean, as_mean
from .measures import GenericMeasure, PieceBlock, TestFunction
from .timedisc import SpaceTimePath

ADMISSIBILITY_TOL = 1e-10


@dataclass(frozen=True, eq=False)
class FVMesh:
    dim: int
    centers: np.ndarray
    volumes: np.ndarray
    face_cells: np.ndarray
    face_area: np.ndarray
    face_dist: np.ndarray
    face_normal: np.ndarray
    cell_lo: Optional[np.ndarray] = None
    cell_hi: Optional[np.ndarray] = None
    boundary_cells: np.ndarray = field(default_factory=lambda: np.zeros(0, dtype=int))
    boundary_area: np.ndarray = field(default_factory=lambda: np.zeros(0))
    boundary_normal: Optional[np.ndarray] = None
    axes: Optional[tuple] = None
    domain_volume: Optional[float] = None
    mesh_id: str = "fv"

    @property
    def n_cells(self):
        return len(self.volumes)

    @property
    def n_faces(self):
        return len(self.face_area)

    @property
    def is_grid(self):
        return self.axes is not None

    @property
    def shape(self):
        return tuple(len(a) - 1 for a in self.axes)

    @property
    def sigma(self):
        """Maximal cell diameter."""
        if self.cell_lo is not None:
            return float(np.max(np.linalg.norm(self.cell_hi - self.cell_lo, axis=1)))
        return float(2 * np.max(self.face_dist))

    def face_boxes(self):
        """Face regions as degenerate boxes (needs box cells)."""
        if self.cell_lo is None:
            raise ValueError("face geometry requires box cells")
        K, L = self.face_cells[:, 0], self.face_cells[:, 1]
        lo = np.maximum(self.cell_lo[K], self.cell_lo[L])
        hi = np.minimum(self.cell_hi[K], self.cell_hi[L])
        return lo, hi

    def region_geometry(self, kind, index):
        if self.cell_lo is None:
            raise ValueError("mesh regions need box cells")
        if kind == "cell":
            return "box", self.cell_lo[index], self.cell_hi[index], False
        if kind == "face":
            lo, hi = self.face_boxes()
            return "box", lo[index], hi[index], False
        raise ValueError(f"FV mesh has no {kind!r} regions")

    def adjacency(self):
        n = self.n_cells
        K, L = self.face_cells[:, 0], self.face_cells[:, 1]
        data = np.ones(len(K))
        a = sp.coo_matrix((data, (K, L)), shape=(n, n))
        return (a + a.T).tocsr()

    def n_components(self):
        return connected_components(self.adjacency(), directed=False)[0]

    # serialization
    def to_json(self):
        cells = []
        for i in range(self.n_cells):
            entry = {"center": self.centers[i].tolist(), "volume": float(self.volumes[i])}
            if self.cell_lo is not None:
                entry["vertices"] = _box_corners(self.cell_lo[i], self.cell_hi[i]).tolist()
            cells.append(entry)
        faces = [{"cells": [int(a), int(b)], "area": float(ar), "dist": float(d), "normal": n.tolist()}
                 for (a, b), ar, d, n in zip(self.face_cells, self.face_area, self.face_dist, self.face_normal)]
        for c, ar, n in zip(self.boundary_cells, self.boundary_area,
                            self.boundary_normal if self.boundary_normal is not None else []):
            faces.append({"cells": [int(c)], "area": float(ar), "normal": n.tolist()})
        return {"dim": self.dim, "cells": cells, "faces": faces}

    @classmethod
    def from_json(cls, data, mesh_id="fv"):
        dim = int(data["dim"])
        centers = np.array([c["center"] for c in data["cells"]], dtype=float).reshape(-1, dim)
        volumes = np.array([c["volume"] for c in data["cells"]], dtype=float)
        lo = hi = None
        if all("vertices" in c for c in data["cells"]):
            verts = [np.asarray(c["vertices"], dtype=float).reshape(-1, dim) for c in data["cells"]]
            lo = np.array([v.min(axis=0) for v in verts])
            hi = np.array([v.max(axis=0) for v in verts])
            if not np.allclose(np.prod(hi - lo, axis=1), volumes, rtol=1e-12, atol=0):
                lo = hi = None
        interior = [f for f in data["faces"] if len(f["cells"]) == 2]
        boundary = [f for f in data["faces"] if len(f["cells"]) == 1]
        fc = np.array([f["cells"] for f in interior], dtype=int).reshape(-1, 2)
        area = np.array([f["area"] for f in interior], dtype=float)
        normal = np.array([f["normal"] for f in interior], dtype=float).reshape(-1, dim)
        if all("dist" in f for f in interior):
            dist = np.array([f["dist"] for f in interior], dtype=float)
        else:
            dist = np.linalg.norm(centers[fc[:, 1]] - centers[fc[:, 0]], axis=1)
        mesh = cls(dim, centers, volumes, fc, area, dist, normal, lo, hi,
                   np.array([f["cells"][0] for f in boundary], dtype=int),
                   np.array([f.get("area", 1.0) for f in boundary], dtype=float),
                   np.array([f.get("normal", [0.0] * dim) for f in boundary], dtype=float).reshape(-1, dim),
                   mesh_id=mesh_id)
        if admissibility_defect(mesh) > ADMISSIBILITY_TOL:
            raise ValueError("mesh is not admissible: center offsets are not face normals")
        return mesh


def load_mesh(path, mesh_id="fv"):
    with open(path) as fh:
        return FVMesh.from_json(json.load(fh), mesh_id)


def _box_corners(lo, hi):
    d = len(lo)
    corners = np.array(np.meshgrid(*[[0, 1]] * d, indexing="ij")).reshape(d, -1).T
    return lo + corners * (hi - lo)


def build_grid_mesh(domain, resolution=None, axes=None, mesh_id="fv"):
    """Rectangular grid on an axis-aligned box.

    Parameters
    ----------
    domain : sequence of (lo, hi) per axis, or (lo, hi) for 1-D.
    resolution : cell counts per axis (uniform spacing).
    axes : optional explicit breakpoints per axis, overriding `resolution`.
    """
    dom = np.asarray(domain, dtype=float)
    if dom.ndim == 1:
        dom = dom[None, :]
    d = dom.shape[0]
    if d not in (1, 2, 3):
        raise ValueError("grid meshes exist in 1, 2 or 3 dimensions")
    if np.any(dom[:, 1] - dom[:, 0] <= 0):
        raise ValueError("domain has zero volume")
    if axes is None:
        res = np.broadcast_to(np.atleast_1d(resolution), (d,)).astype(int)
        if np.any(res < 1):
            raise ValueError("resolution must be at least 1 per axis")
        axes = [np.linspace(dom[a, 0], dom[a, 1], res[a] + 1) for a in range(d)]
    else:
        axes = [np.asarray(b, dtype=float) for b in axes]
        if len(axes) != d or any(np.any(np.diff(b) <= 0) for b in axes):
            raise ValueError("breakpoints must increase on every axis")
    shape = tuple(len(b) - 1 for b in axes)
    idx = np.array(np.unravel_index(np.arange(int(np.prod(shape))), shape)).T
    lo = np.stack([axes[a][idx[:, a]] for a in range(d)], axis=1)
    hi = np.stack([axes[a][idx[:, a] + 1] for a in range(d)], axis=1)
    centers = 0.5 * (lo + hi)
    volumes = np.prod(hi - lo, axis=1)
    fcells, farea, fdist, fnormal = [], [], [], []
    bcells, barea, bnormal = [], [], []
    for a in range(d):
        e = np.zeros(d)
        e[a] = 1.0
        widths = hi - lo
        other = np.prod(np.delete(widths, a, axis=1), axis=1) if d > 1 else np.ones(len(lo))
        inner = idx[:, a] < shape[a] - 1
        K = np.nonzero(inner)[0]
        nb = idx[K].copy()
        nb[:, a] += 1
        L = np.ravel_multi_index(nb.T, shape)
        fcells.append(np.stack([K, L], axis=1))
        farea.append(other[K])
        fdist.append(centers[L, a] - centers[K, a])
        fnormal.append(np.tile(e, (len(K), 1)))
        for side, sign in ((0, -1.0), (shape[a] - 1, 1.0)):
            B = np.nonzero(idx[:, a] == side)[0]
            bcells.append(B)
            barea.append(other[B])
            bnormal.append(np.tile(sign * e, (len(B), 1)))
    order = lambda parts: np.concatenate(parts)
    fc = order(fcells)
    # faces sorted by (first cell, second cell) for a stable layout
    perm = np.lexsort((fc[:, 1], fc[:, 0]))
    return FVMesh(
        d, centers, volumes, fc[perm], order(farea)[perm], order(fdist)[perm],
        order(fnormal)[perm], lo, hi,
        order(bcells), order(barea), order(bnormal),
        axes=tuple(axes), domain_volume=float(np.prod(dom[:, 1] - dom[:, 0])),
        mesh_id=mesh_id,
    )


# ---------------------------------------------------------------- geometry checks


def admissibility_defect(mesh):
    """max_f |(x_L - x_K)/d_f - n_f|."""
    if mesh.n_faces == 0:
        return 0.0
    K, L = mesh.face_cells[:, 0], mesh.face_cells[:, 1]
    off = (mesh.centers[L] - mesh.centers[K]) / mesh.face_dist[:, None]
    return float(np.max(np.linalg.norm(off - mesh.face_normal, axis=1)))


def isotropy_matrices(mesh):
    """Per cell: sum over its faces of |f| d_f n n^T / (2|K|)."""
    d = mesh.dim
    mats = np.zeros((mesh.n_cells, d, d))
    outer = np.einsum("fi,fj->fij", mesh.face_normal, mesh.face_normal)
    contrib = (mesh.face_area * mesh.face_dist)[:, None, None] * outer
    for col in (0, 1):
        np.add.at(mats, mesh.face_cells[:, col], contrib)
    return mats / (2 * mesh.volumes[:, None, None])


def isotropy_deficit(mesh):
    """max over cells of (largest eigenvalue of the isotropy matrix - 1)."""
    eig = np.linalg.eigvalsh(isotropy_matrices(mesh))
    return float(np.max(eig[:, -1]) - 1.0)


def regularity_witness(mesh):
    """Largest c with B(x_K, c sigma) inside K and |f| >= c sigma^(d-1)."""
    if mesh.cell_lo is None:
        raise ValueError("regularity witness needs box cells")
    sig = mesh.sigma
    inr = np.min(np.minimum(mesh.centers - mesh.cell_lo, mesh.cell_hi - mesh.centers), axis=1)
    c = float(np.min(inr) / sig)
    if mesh.n_faces:
        c = min(c, float(np.min(mesh.face_area) / sig ** (mesh.dim - 1)))
    return c


def partition_defect(mesh):
    if mesh.domain_volume is None:
        return 0.0
    return abs(float(np.sum(mesh.volumes)) - mesh.domain_volume)


def geometry_report(mesh):
    return {
        "dim": mesh.dim,
        "cells": mesh.n_cells,
        "faces": mesh.n_faces,
        "sigma": mesh.sigma,
        "admissibility_defect": admissibility_defect(mesh),
        "partition_defect": partition_defect(mesh),
        "isotropy_deficit": isotropy_deficit(mesh),
        "regularity_witness": regularity_witness(mesh) if mesh.cell_lo is not None else None,
    }


# ---------------------------------------------------------------- operators


def divergence_matrix(mesh):
    """Sparse (cells x faces) matrix of Div."""
    K, L = mesh.face_cells[:, 0], mesh.face_cells[:, 1]
    f = np.arange(mesh.n_faces)
    vals = np.concatenate([mesh.face_area / mesh.volumes[K], -mesh.face_area / mesh.volumes[L]])
    return sp.csr_matrix((vals, (np.concatenate([K, L]), np.concatenate([f, f]))),
                         shape=(mesh.n_cells, mesh.n_faces))


def _check_momentum(mesh, M):
    M = np.asarray(M, dtype=float)
    if M.shape != (mesh.n_faces,):
        raise ValueError(f"momentum has shape {M.shape}, mesh has {mesh.n_faces} faces")
    return M


def _check_density(mesh, P):
    P = np.asarray(P, dtype=float)
    if P.shape != (mesh.n_cells,):
        raise ValueError(f"density has shape {P.shape}, mesh has {mesh.n_cells} cells")
    return P


def fv_divergence(mesh, M):
    M = _check_momentum(mesh, M)
    out = np.zeros(mesh.n_cells)
    K, L = mesh.face_cells[:, 0], mesh.face_cells[:, 1]
    flux = mesh.face_area * M
    np.add.at(out, K, flux)
    np.add.at(out, L, -flux)
    return out / mesh.volumes


def kinetic_terms(weight, s, m_sq):
    """weight * |m|^2 / (2 s) with the void conventions, elementwise."""
    with np.errstate(divide="ignore", invalid="ignore"):
        val = np.where(s > 0, weight * m_sq / (2 * np.where(s > 0, s, 1.0)), 0.0)
    val = np.where((s <= 0) & (m_sq > 0), np.inf, val)
    return np.where(s < 0, np.inf, val)


def face_means(mesh, mean, P):
    return as_mean(mean)(P[mesh.face_cells[:, 0]], P[mesh.face_cells[:, 1]])


def fv_action(mesh, mean, P, M):
    """Discrete action; +inf for negative densities or momentum on void."""
    P = _check_density(mesh, P)
    M = _check_momentum(mesh, M)
    if np.any(P < 0):
        return np.inf
    theta = face_means(mesh, mean, P)
    terms = kinetic_terms(mesh.face_area * mesh.face_dist, theta, M**2)
    return float(np.sum(terms))


def fv_action_conjugate(mesh, mean, P, B):
    P = _check_density(mesh, P)
    B = _check_momentum(mesh, B)
    if np.any(P < 0):
        raise ValueError("conjugate action needs a nonnegative density")
    theta = face_means(mesh, mean, P)
    return float(np.sum(0.5 * theta * B**2 * mesh.face_area * mesh.face_dist))


def fv_y_product(mesh, M, B):
    """<M, B>_Y = sum over ordered pairs of M B d |f| / 2."""
    return float(np.sum(_check_momentum(mesh, M) * _check_momentum(mesh, B)
                        * mesh.face_area * mesh.face_dist))


# ---------------------------------------------------------------- sampling


def locate_cells(mesh, points, tol=1e-12):
    """Cell index per point; points on shared faces go to the lowest index."""
    pts = np.atleast_2d(np.asarray(points, dtype=float))
    if mesh.is_grid:
        idx = []
        for a, b in enumerate(mesh.axes):
            x = pts[:, a]
            if np.any((x < b[0] - tol) | (x > b[-1] + tol)):
                raise ValueError("atom outside the domain")
            i = np.searchsorted(b, x, side="left") - 1
            idx.append(np.clip(i, 0, len(b) - 2))
        return np.ravel_multi_index(tuple(idx), mesh.shape)
    if mesh.cell_lo is None:
        raise ValueError("point location needs box cells")
    inside = np.all((pts[:, None, :] >= mesh.cell_lo[None] - tol)
                    & (pts[:, None, :] <= mesh.cell_hi[None] + tol), axis=2)
    if not np.all(inside.any(axis=1)):
        raise ValueError("atom outside the domain")
    return np.argmax(inside, axis=1)


def _box_overlap(lo, hi, clo, chi):
    """Overlap of boxes (n, d) with cells (m, d), shape (n, m).

    On axes where a box is degenerate the point is claimed by the cell
    below it, so face pieces follow the same tie-break as atoms.
    """
    ext = np.minimum(hi[:, None, :], chi[None]) - np.maximum(lo[:, None, :], clo[None])
    ext = np.clip(ext, 0.0, None)
    flat = (hi - lo) <= 0
    if np.any(flat):
        p = lo[:, None, :]
        bottom = clo[None] == clo.min(axis=0)[None, None, :]
        claim = ((clo[None] < p) & (p <= chi[None])) | ((p == clo[None]) & bottom)
        ext = np.where(flat[:, None, :], claim.astype(float), ext)
    return np.prod(ext, axis=2)


def fv_sample_density(mesh, rho, order=quad.DEFAULT_ORDER):
    """P_K = rho(K)/|K| for a measure, or the cell average of a density function."""
    if callable(rho) and not isinstance(rho, GenericMeasure):
        if mesh.cell_lo is None:
            raise ValueError("averaging a density function needs box cells")
        nodes, w = quad.box_nodes(mesh.cell_lo, mesh.cell_hi, order)
        vals = np.asarray(rho(nodes.reshape(-1, mesh.dim))).reshape(nodes.shape[:2])
        return np.sum(vals * w, axis=1) / mesh.volumes
    if rho.vector:
        raise TypeError("density sampling needs a scalar measure")
    if rho.dim != mesh.dim:
        raise ValueError(f"measure lives in dimension {rho.dim}, mesh in {mesh.dim}")
    mass = np.zeros(mesh.n_cells)
    if len(rho.atoms_w):
        np.add.at(mass, locate_cells(mesh, rho.atoms_x), rho.atoms_w)
    for b in rho.blocks:
        if b.kind != "box" or mesh.cell_lo is None:
            raise ValueError("FV sampling handles box pieces on box cells only")
        mass += b.density @ _box_overlap(b.lo, b.hi, mesh.cell_lo, mesh.cell_hi)
    return mass / mesh.volumes


def fv_sample_momentum(mesh, m, order=quad.DEFAULT_ORDER):
    """Face averages of m . n_f."""
    if not m.vector:
        raise TypeError("momentum sampling needs a vector field")
    if mesh.n_faces == 0:
        return np.zeros(0)
    lo, hi = mesh.face_boxes()
    nodes, w = quad.box_nodes(lo, hi, order)
    vals = m.value(nodes.reshape(-1, mesh.dim)).reshape(nodes.shape)
    flux = np.einsum("fqd,fd->fq", vals, mesh.face_normal)
    return np.sum(flux * w, axis=1) / np.sum(w, axis=1)


def fv_reconstruct(mesh, which, values):
    """Measures R^CE(P), R^A(P) or R_Y(M)."""
    values = np.asarray(values, dtype=float)
    if which == "CE":
        P = _check_density(mesh, values)
        return GenericMeasure(mesh.dim, mesh.centers, P * mesh.volumes)
    if which == "A":
        P = _check_density(mesh, values)
        labels = tuple({"kind": "cell", "mesh": mesh.mesh_id, "index": i} for i in range(mesh.n_cells))
        block = PieceBlock("box", P.copy(), mesh.cell_lo, mesh.cell_hi, labels=labels)
        return GenericMeasure(mesh.dim, blocks=(block,))
    if which == "Y":
        M = _check_momentum(mesh, values)
        lo, hi = mesh.face_boxes()
        labels = tuple({"kind": "face", "mesh": mesh.mesh_id, "index": i} for i in range(mesh.n_faces))
        dens = (M * mesh.face_dist)[:, None] * mesh.face_normal
        block = PieceBlock("box", dens, lo, hi, labels=labels)
        return GenericMeasure(mesh.dim, blocks=(block,), vector=True)
    raise ValueError(f"unknown reconstruction {which!r}")


# ---------------------------------------------------------------- controllability


def time_profile(t):
    """4t^2 on [0, 1/2] and 4(1-t)^2 on [1/2, 1]."""
    t = np.asarray(t, dtype=float)
    return np.where(t <= 0.5, 4 * t**2, 4 * (1 - t) ** 2)


def profile_schedule(N):
    """Profile values chi_0..chi_N and the half each node belongs to.

    For odd N the middle node is duplicated: the even schedule of N-1
    steps is used and one step holds chi = 1 with zero momentum.
    """
    if N % 2 == 0:
        t = np.arange(N + 1) / N
        chi = time_profile(t)
        half = np.where(np.arange(N + 1) <= N // 2, 0, 1)
        return chi, half
    chi_e, half_e = profile_schedule(N - 1)
    m = (N - 1) // 2
    chi = np.concatenate([chi_e[: m + 1], chi_e[m:]])
    half = np.concatenate([half_e[: m + 1], np.ones(N - m, dtype=int)])
    return chi, half


def step_factors(N):
    """(chi_k - chi_{k-1})^2 / (tau (chi_k + chi_{k-1})) per step."""
    chi, _ = profile_schedule(N)
    tau = 1.0 / N
    d = np.diff(chi)
    s = chi[1:] + chi[:-1]
    return np.where(s > 0, d**2 / (tau * np.where(s > 0, s, 1.0)), 0.0)


def grid_chain(mesh, start, end):
    """Axis-ordered monotone walk of cell indices from start to end."""
    if start == end:
        return [int(start)]
    if mesh.is_grid:
        a = list(np.unravel_index(start, mesh.shape))
        b = np.unravel_index(end, mesh.shape)
        chain = [int(start)]
        for ax in range(mesh.dim):
            step = 1 if b[ax] > a[ax] else -1
            while a[ax] != b[ax]:
                a[ax] += step
                chain.append(int(np.ravel_multi_index(tuple(a), mesh.shape)))
        return chain
    order, pred = breadth_first_order(mesh.adjacency(), start, directed=False)
    if end not in set(order.tolist()):
        raise ValueError("mesh is disconnected between the two points")
    chain = [int(end)]
    while chain[-1] != start:
        chain.append(int(pred[chain[-1]]))
    return chain[::-1]


@dataclass
class ControllabilityPath:
    path: SpaceTimePath
    cost: float
    chain: list
    hat_actions: tuple
    factors: np.ndarray


def _face_lookup(mesh):
    return {(int(a), int(b)): i for i, (a, b) in enumerate(mesh.face_cells)}


def chain_fields(mesh, chain):
    """P-hat and the two momenta M-hat_1, M-hat_2 along a cell chain.

    Div(M-hat_1) = P-hat - S(delta_x) and Div(M-hat_2) = P-hat - S(delta_y).
    """
    Q = len(chain)
    Phat = np.zeros(mesh.n_cells)
    Phat[chain] = 1.0 / (Q * mesh.volumes[chain])
    M1 = np.zeros(mesh.n_faces)
    M2 = np.zeros(mesh.n_faces)
    lookup = _face_lookup(mesh)
    for i in range(2, Q + 1):
        a, b = chain[i - 2], chain[i - 1]
        if (a, b) in lookup:
            f, sign = lookup[(a, b)], 1.0
        elif (b, a) in lookup:
            f, sign = lookup[(b, a)], -1.0
        else:
            raise ValueError("chain steps between non-adjacent cells")
        area = mesh.face_area[f]
        # values of the K_{i-1} -> K_i flux
        M1[f] = -sign * (Q + 1 - i) / (Q * area)
        M2[f] = sign * (i - 1) / (Q * area)
    return Phat, M1, M2


def controllability_from_fields(N, start, end, Phat, M1, M2, action):
    """Time-modulated path between two sampled Diracs through P-hat."""
    chi, half = profile_schedule(N)
    tau = 1.0 / N
    P = np.where(half[:, None] == 0,
                 (1 - chi)[:, None] * start[None] + chi[:, None] * Phat[None],
                 (1 - chi)[:, None] * end[None] + chi[:, None] * Phat[None])
    dchi = np.diff(chi) / tau
    # step k uses the first-half momentum when it ends at or before the middle node
    first = half[1:] == 0
    ex = (slice(None),) + (None,) * np.ndim(M1)
    M = np.where(first[ex], -dchi[ex] * M1[None], -dchi[ex] * M2[None])
    path = SpaceTimePath(P, M)
    Q = path.averaged()
    cost = tau * sum(action(Q[k], M[k]) for k in range(N))
    return path, float(cost)


def fv_controllability_path(mesh, mean, x, y, N):
    """Explicit path from S(delta_x) to S(delta_y) through a cell chain."""
    kx = int(locate_cells(mesh, np.atleast_1d(np.asarray(x, float))[None])[0])
    ky = int(locate_cells(mesh, np.atleast_1d(np.asarray(y, float))[None])[0])
    if mesh.n_components() > 1:
        comp = connected_components(mesh.adjacency(), directed=False)[1]
        if comp[kx] != comp[ky]:
            raise ValueError("mesh is disconnected between the two points")
    chain = grid_chain(mesh, kx, ky)
    start = np.zeros(mesh.n_cells)
    start[kx] = 1.0 / mesh.volumes[kx]
    end = np.zeros(mesh.n_cells)
    end[ky] = 1.0 / mesh.volumes[ky]
    Phat, M1, M2 = chain_fields(mesh, chain)
    act = lambda P, M: fv_action(mesh, mean, P, M)
    path, cost = controllability_from_fields(N, start, end, Phat, M1, M2, act)
    hats = (act(Phat, M1), act(Phat, M2))
    return ControllabilityPath(path, cost, chain, hats, step_factors(N))


# ---------------------------------------------------------------- model handle


@dataclass(frozen=True)
class KineticLayout:
    """How the solver sees the kinetic cost of one time step.

    Element e has weight w_e and cost w_e |m_e|^2 / (2 s_e). With a linear
    mean s = mean_matrix @ Q; otherwise s = theta(Q[pairs[:,0]], Q[pairs[:,1]]).
    """

    n: int
    dim: int
    weights: np.ndarray
    mean: SymmetricMean
    mean_matrix: Optional[sp.csr_matrix] = None
    pairs: Optional[np.ndarray] = None


class FVModel:
    """Finite-volume model handle consumed by timedisc, solver and verify."""

    kind = "fv"
    metric = "flat"

    def __init__(self, mesh, mean="arithmetic"):
        self.mesh = mesh
        self.mean = as_mean(mean)
        self._div = divergence_matrix(mesh)

    def __repr__(self):
        return f"FVModel(cells={self.mesh.n_cells}, mean={self.mean.kind!r})"

    @property
    def dim(self):
        return self.mesh.dim

    @property
    def sigma(self):
        return self.mesh.sigma

    @property
    def n_density(self):
        return self.mesh.n_cells

    @property
    def momentum_shape(self):
        return (self.mesh.n_faces,)

    @property
    def density_weights(self):
        return self.mesh.volumes

    def div_matrix(self):
        return self._div

    def momentum_to_dofs(self, M):
        return np.asarray(M, dtype=float).reshape(-1)

    def dofs_to_momentum(self, m):
        return np.asarray(m, dtype=float).reshape(self.momentum_shape)

    def divergence(self, M):
        return self._div @ np.asarray(M, dtype=float)

    def action(self, P, M):
        return fv_action(self.mesh, self.mean, P, M)

    def action_conjugate(self, P, B):
        return fv_action_conjugate(self.mesh, self.mean, P, B)

    def y_product(self, M, B):
        return fv_y_product(self.mesh, M, B)

    def drop_void_momentum(self, Q, M, tol):
        void = (face_means(self.mesh, self.mean, Q) <= 0) & (np.abs(M) <= tol)
        return np.where(void, 0.0, M)

    def y_weights(self):
        return self.mesh.face_area * self.mesh.face_dist

    def conjugate_dofs(self, Q, B):
        return fv_action_conjugate(self.mesh, self.mean, np.maximum(Q, 0.0), B)

    def y_product_dofs(self, M, B):
        return fv_y_product(self.mesh, M, B)

    def conjugate_gradient(self, Q, B):
        """Partial derivatives of A*(Q, B) in Q."""
        m = self.mesh
        K, L = m.face_cells[:, 0], m.face_cells[:, 1]
        Qp = np.maximum(Q, 1e-300)
        _, ta, tb, *_ = self.mean.derivatives(Qp[K], Qp[L])
        c = 0.5 * B**2 * m.face_area * m.face_dist
        out = np.zeros(m.n_cells)
        np.add.at(out, K, ta * c)
        np.add.at(out, L, tb * c)
        return out

    def kinetic_layout(self):
        m = self.mesh
        w = m.face_area * m.face_dist
        if self.mean.is_linear:
            f = np.arange(m.n_faces)
            L = sp.csr_matrix((np.full(2 * m.n_faces, 0.5),
                               (np.concatenate([f, f]), m.face_cells.T.ravel())),
                              shape=(m.n_faces, m.n_cells))
            return KineticLayout(m.n_faces, 1, w, self.mean, mean_matrix=L)
        return KineticLayout(m.n_faces, 1, w, self.mean, pairs=m.face_cells.copy())

    def sample_density(self, rho):
        return fv_sample_density(self.mesh, rho)

    def sample_momentum(self, m):
        return fv_sample_momentum(self.mesh, m)

    def reconstruct(self, which, values):
        return fv_reconstruct(self.mesh, which, values)

    def potential_nodes(self):
        return self.mesh.centers

    def n_components(self):
        return self.mesh.n_components()

    def controllability_path(self, x, y, N):
        return fv_controllability_path(self.mesh, self.mean, x, y, N)

    def geometry_report(self):
        return geometry_report(self.mesh)
