"""Figures and plot-data files for solves and convergence studies.

Figures are written with the non-interactive Agg backend.
"""

from __future__ import annotations

from pathlib import Path

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402

_QUANTITIES = (("err_state_l2q", "state L2(Q)"), ("err_state_energy", "state L2(H^s)"),
               ("err_control_l2q", "control L2(Q)"))


def _curves(result):
    """``{(s, quantity): (hs, errors)}`` over successful levels."""
    out = {}
    for s in sorted({r.s for r in result.records}):
        recs = [r for r in result.by_s(s) if r.status == "ok"]
        vary_h = len({r.h for r in recs}) > 1
        for q, _ in _QUANTITIES:
            pts = [((r.h if vary_h else r.tau), getattr(r, q)) for r in recs
                   if np.isfinite(getattr(r, q)) and getattr(r, q) > 0]
            if pts:
                out[(s, q)] = tuple(np.array(v) for v in zip(*pts))
    return out


def write_plot_data(result, directory):
    """One "x y" file per curve, named ``<quantity>_s<s>.dat``."""
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    paths = []
    for (s, q), (x, y) in _curves(result).items():
        p = directory / f"{q}_s{s:g}.dat"
        with p.open("w") as fh:
            for a, b in zip(x, y):
                fh.write(f"{float(a)!r} {float(b)!r}\n")
        paths.append(p)
    return paths


def plot_convergence(result, path, rates=None):
    """Log-log error curves per ``s`` with dashed reference slopes.

    ``rates`` maps ``s`` to a predicted slope; defaults to ``γ`` from
    :func:`fraccontrol.analysis.predicted_rates`.
    """
    from .analysis import predicted_rates

    curves = _curves(result)
    svals = sorted({s for s, _ in curves})
    fig, axes = plt.subplots(1, max(1, len(svals)), figsize=(4.5 * max(1, len(svals)), 4), squeeze=False)
    for ax, s in zip(axes[0], svals):
        for q, label in _QUANTITIES:
            if (s, q) in curves:
                x, y = curves[(s, q)]
                ax.loglog(x, y, "o-", label=label)
        ref = (rates or {}).get(s, predicted_rates(s, result.config.gamma_eps)[0])
        xs = [curves[k][0] for k in curves if k[0] == s]
        ys = [curves[k][1] for k in curves if k[0] == s]
        if xs:
            x0 = xs[0]
            y0 = max(y[0] for y in ys)
            ax.loglog(x0, y0 * (x0 / x0[0]) ** ref, "k--", lw=0.8, label=f"slope {ref:.2f}")
        ax.set_xlabel("h" if len({r.h for r in result.by_s(s)}) > 1 else "tau")
        ax.set_ylabel("error")
        ax.set_title(f"s = {s:g}")
        ax.grid(True, which="both", alpha=0.3)
        ax.legend(fontsize=8)
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)
    return Path(path)


def plot_space_time(values, mesh, grid, path, title="", kind="nodal"):
    """1D: ``x``-``t`` colour map; 2D: snapshots at the first, middle and
    last step."""
    values = np.asarray(values)
    fig = None
    if mesh.dim == 1:
        fig, ax = plt.subplots(figsize=(5, 4))
        if kind == "nodal":
            x = mesh.vertices[:, 0]
            order = np.argsort(x)
            full = np.zeros((values.shape[0], mesh.n_vertices))
            full[:, mesh.interior] = values
            data, xs = full[:, order], x[order]
        else:
            c = mesh.centroids()[:, 0]
            order = np.argsort(c)
            data, xs = values[:, order], c[order]
        t = grid.nodes[grid.K_steps + 1 - values.shape[0]:]
        im = ax.pcolormesh(xs, t, data, shading="nearest", cmap="viridis")
        fig.colorbar(im, ax=ax)
        ax.set_xlabel("x")
        ax.set_ylabel("t")
        ax.set_title(title)
    else:
        steps = sorted({0, values.shape[0] // 2, values.shape[0] - 1})
        fig, axes = plt.subplots(1, len(steps), figsize=(4 * len(steps), 3.6), squeeze=False)
        lo, hi = float(values.min()), float(values.max())
        for ax, k in zip(axes[0], steps):
            if kind == "nodal":
                full = np.zeros(mesh.n_vertices)
                full[mesh.interior] = values[k]
                im = ax.tripcolor(mesh.vertices[:, 0], mesh.vertices[:, 1], mesh.cells, full,
                                  shading="gouraud", vmin=lo, vmax=hi)
            else:
                im = ax.tripcolor(mesh.vertices[:, 0], mesh.vertices[:, 1], mesh.cells,
                                  facecolors=values[k], vmin=lo, vmax=hi)
            ax.set_aspect("equal")
            ax.set_title(f"{title} row {k}")
        fig.colorbar(im, ax=list(axes[0]))
    fig.savefig(path, dpi=120)
    plt.close(fig)
    return Path(path)


def plot_history(report, path):
    """Objective and optimality residual per optimizer iteration."""
    it = [r[0] for r in report.log]
    fig, ax = plt.subplots(figsize=(5, 3.5))
    res = [max(r[2], 1e-300) for r in report.log]
    ax.semilogy(it, res, "o-", label="residual")
    J = np.array([r[1] for r in report.log])
    gap = J - J.min()
    if np.any(gap > 0):
        ax.semilogy(it, np.where(gap > 0, gap, np.nan), "s-", label="J - min J")
    ax.set_xlabel("iteration")
    ax.grid(True, alpha=0.3)
    ax.legend()
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)
    return Path(path)


def rate_table(result):
    """Text table of pairwise EOCs per ``s``."""
    lines = []
    for s in sorted({r.s for r in result.records}):
        for q, label in _QUANTITIES:
            rates = result.rates(s, q)
            if rates:
                txt = ", ".join(r if isinstance(r, str) else f"{r:.3f}" for r in rates)
                lines.append(f"s={s:g} {label:>14}: {txt}")
    return "\n".join(lines)
