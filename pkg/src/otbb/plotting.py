"""PNG figures for CLI reports (matplotlib, Agg backend)."""

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402

from .fvmodel import FVModel  # noqa: E402

_META = {"Software": None}


def _save(fig, path):
    fig.tight_layout()
    fig.savefig(path, dpi=110, metadata=_META)
    plt.close(fig)
    return path


def plot_convergence(table, path):
    """Relative error against sigma, one marker series per N."""
    fig, ax = plt.subplots(figsize=(5.5, 4))
    for N in sorted({r.N for r in table.rows}):
        rows = sorted((r for r in table.rows if r.N == N), key=lambda r: r.sigma)
        ax.loglog([r.sigma for r in rows], [max(r.rel_error, 1e-16) for r in rows], "o-", label=f"N={N}")
    ax.set_xlabel("sigma")
    ax.set_ylabel("relative error")
    ax.set_title(f"{table.name}: ground truth {table.ground_truth:.6g}")
    ax.grid(True, which="both", alpha=0.3)
    ax.legend()
    return _save(fig, path)


def plot_sweeps(sweeps, path):
    """Log-log error curves of assumption sweeps."""
    fig, ax = plt.subplots(figsize=(6, 4.5))
    zero = []
    for s in sweeps:
        pts = [(l.sigma, l.error) for l in s.levels if l.error > 0]
        status = "pass" if s.passed else "FAIL"
        if not pts:
            zero.append(f"{s.assumption} ({status})")
            continue
        slope = "" if not np.isfinite(s.slope) else f", slope {s.slope:.2f}"
        ax.loglog(*zip(*pts), "o-", label=f"{s.assumption} {s.family} ({status}{slope})")
    if zero:
        ax.set_title("zero at every level: " + ", ".join(zero), fontsize=8)
    ax.set_xlabel("sigma")
    ax.set_ylabel("measured error")
    ax.grid(True, which="both", alpha=0.3)
    ax.legend(fontsize=7)
    return _save(fig, path)


def plot_controllability(report, path):
    d = np.asarray(report.distances)
    fig, ax = plt.subplots(figsize=(5, 4))
    ax.plot(d, report.costs, "o", label="construction cost")
    grid = np.linspace(0, d.max() * 1.05, 100)
    ax.plot(grid, report.kappa * grid**2, "-", label=f"kappa d^2, kappa={report.kappa:.3g}")
    ax.set_xlabel("distance")
    ax.set_ylabel("cost")
    ax.set_title(f"{report.family}  R^2={report.r_squared:.4f}")
    ax.legend()
    return _save(fig, path)


def _nodes(model):
    if isinstance(model, FVModel):
        return model.mesh.centers
    return model.potential_nodes()


def plot_densities(model, P, path, times=None, title=""):
    """Snapshots of nodal densities: curves in 1-D, colored nodes otherwise."""
    P = np.atleast_2d(np.asarray(P, float))
    times = np.linspace(0, 1, len(P)) if times is None else np.asarray(times)
    x = _nodes(model)
    if x.shape[1] == 1:
        fig, ax = plt.subplots(figsize=(6, 4))
        order = np.argsort(x[:, 0])
        for k in _snapshot_indices(len(P)):
            ax.plot(x[order, 0], P[k, order], label=f"t={times[k]:.2f}")
        ax.set_xlabel("x")
        ax.set_ylabel("density")
        ax.legend(fontsize=7)
        ax.set_title(title)
        return _save(fig, path)
    picks = _snapshot_indices(len(P), 4)
    fig, axes = plt.subplots(1, len(picks), figsize=(3.2 * len(picks), 3.2), squeeze=False)
    sphere = x.shape[1] == 3 and np.ptp(x[:, 2]) > 0
    if sphere:
        # longitude/latitude chart
        x = np.column_stack([np.arctan2(x[:, 1], x[:, 0]), np.arcsin(np.clip(x[:, 2], -1, 1))])
    for ax, k in zip(axes[0], picks):
        # each snapshot on its own scale, so concentrated mass stays visible
        peak = float(np.max(P[k])) if np.max(P[k]) > 0 else 1.0
        w = np.clip(P[k] / peak, 0, 1)
        order = np.argsort(w)
        ax.scatter(x[order, 0], x[order, 1], c=w[order], s=4 + 40 * w[order], vmin=0, vmax=1,
                   cmap="viridis")
        if sphere:
            ax.set_xlabel("longitude")
            ax.set_ylabel("latitude")
        else:
            ax.set_aspect("equal")
        ax.set_title(f"t={times[k]:.2f}  max {peak:.3g}", fontsize=9)
    fig.suptitle(title)
    return _save(fig, path)


def _snapshot_indices(n, count=5):
    return sorted(set(np.linspace(0, n - 1, min(count, n)).round().astype(int).tolist()))


def plot_mesh(model, path):
    """Cell centers and faces of a grid, or the triangles of a triangulation."""
    fig = plt.figure(figsize=(5, 5))
    if isinstance(model, FVModel):
        mesh = model.mesh
        ax = fig.add_subplot(111)
        if mesh.dim == 1:
            ax.plot(mesh.centers[:, 0], np.zeros(mesh.n_cells), "|", markersize=12)
            ax.set_yticks([])
        else:
            lo, hi = mesh.cell_lo, mesh.cell_hi
            for a, b in zip(lo, hi):
                ax.add_patch(plt.Rectangle(a[:2], *(b[:2] - a[:2]), fill=False, lw=0.5))
            ax.plot(mesh.centers[:, 0], mesh.centers[:, 1], ".", markersize=2)
            ax.set_aspect("equal")
            ax.autoscale()
        ax.set_title(f"{mesh.n_cells} cells")
    else:
        mesh = model.mesh
        if mesh.spherical:
            ax = fig.add_subplot(111, projection="3d")
            v = mesh.vertices
            ax.plot_trisurf(v[:, 0], v[:, 1], v[:, 2], triangles=mesh.triangles, linewidth=0.2,
                            edgecolor="k", color="lightsteelblue", alpha=0.9)
            ax.set_box_aspect((1, 1, 1))
        else:
            ax = fig.add_subplot(111)
            ax.triplot(mesh.vertices[:, 0], mesh.vertices[:, 1], mesh.triangles, lw=0.5)
            ax.set_aspect("equal")
        ax.set_title(f"{mesh.n_triangles} triangles")
    return _save(fig, path)
