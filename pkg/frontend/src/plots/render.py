"""Figure builders for identification traces and solver benchmarks."""

import math

import matplotlib

matplotlib.use("Agg")

import matplotlib.pyplot as plt
import numpy as np

from .io import SchemaError

# Diverged residual curves are clipped here so one exploding run does
# not flatten every other curve in the panel.
RELRES_CLIP = 1e6


def _finite(x, y):
    pairs = [(a, b) for a, b in zip(x, y) if not math.isnan(b)]
    if not pairs:
        return [], []
    xs, ys = zip(*pairs)
    return list(xs), list(ys)


def _suffix(col, prefix):
    """param_E -> E, param -> '' (scalar trace)."""
    return col[len(prefix) + 1:] if col != prefix else ""


def render_loss_param(table, out_path, log_loss=True):
    """Two-panel trace figure: gradients on top, loss and parameter below."""
    it = table.column("iter")
    fig, (ax_g, ax_l) = plt.subplots(2, 1, figsize=(7, 6), sharex=True)

    for col in table.group("grad_ana"):
        label = _suffix(col, "grad_ana")
        ax_g.plot(it, table.column(col), "-",
                  label=f"analytic {label}".strip())
    for col in table.group("grad_fd"):
        label = _suffix(col, "grad_fd")
        xs, ys = _finite(it, table.column(col))
        ax_g.plot(xs, ys, "o", mfc="none", ms=5,
                  label=f"finite difference {label}".strip())
    ax_g.set_ylabel("gradient")
    ax_g.legend(fontsize=8)
    ax_g.grid(alpha=0.3)

    ax_l.plot(it, table.column("loss"), "-", color="tab:red", label="loss")
    if log_loss:
        ax_l.set_yscale("log")
    ax_l.set_xlabel("iteration")
    ax_l.set_ylabel("loss")
    ax_l.grid(alpha=0.3)

    ax_p = ax_l.twinx()
    for col in table.group("param"):
        label = _suffix(col, "param")
        ax_p.plot(it, table.column(col), "--", color="tab:blue",
                  label=f"parameter {label}".strip())
    ax_p.set_ylabel("parameter")
    lines = ax_l.get_lines() + ax_p.get_lines()
    ax_l.legend(lines, [ln.get_label() for ln in lines], fontsize=8)

    fig.tight_layout()
    fig.savefig(out_path, dpi=150)
    plt.close(fig)


def render_grad_compare(table, out_path):
    """Overlay of analytic and finite-difference gradients over iterations."""
    it = table.column("iter")
    fig, ax = plt.subplots(figsize=(7, 4))
    for col in table.group("grad_ana"):
        label = _suffix(col, "grad_ana")
        ax.plot(it, table.column(col), "-",
                label=f"analytic {label}".strip())
    for col in table.group("grad_fd"):
        label = _suffix(col, "grad_fd")
        xs, ys = _finite(it, table.column(col))
        ax.plot(xs, ys, "o", mfc="none", ms=6,
                label=f"finite difference {label}".strip())
    ax.set_xlabel("iteration")
    ax.set_ylabel("gradient")
    ax.grid(alpha=0.3)
    ax.legend(fontsize=8)
    fig.tight_layout()
    fig.savefig(out_path, dpi=150)
    plt.close(fig)


def _bench_runs(table, prefix=""):
    """Split a bench table into per-(solver, precond) residual histories."""
    solvers = table.strings("solver")
    preconds = table.strings("precond")
    iters = table.column("iter")
    relres = table.column("relres")
    wall = table.column("wall_ms")
    diverged = [s.strip().lower() == "true"
                for s in table.strings("diverged")]
    runs = {}
    for i in range(len(solvers)):
        key = (solvers[i], preconds[i])
        runs.setdefault(key, {"iter": [], "relres": [], "wall": wall[i],
                              "diverged": False})
        runs[key]["iter"].append(iters[i])
        runs[key]["relres"].append(relres[i])
        runs[key]["diverged"] |= diverged[i]
    out = []
    for (solver, precond), run in runs.items():
        label = f"{prefix}{solver}" if precond == "none" \
            else f"{prefix}{solver}+{precond}"
        out.append((label, run))
    return out


def render_solver_convergence(tables, out_path):
    """Paired panels: residual vs iteration and residual vs wall time.

    Diverged runs are cut at the clip level and marked with a cross so
    they read as truncated rather than converged.
    """
    fig, (ax_it, ax_t) = plt.subplots(1, 2, figsize=(11, 4.2))
    multi = len(tables) > 1
    for table in tables:
        prefix = f"{_stem(table.path)}: " if multi else ""
        for label, run in _bench_runs(table, prefix):
            it = np.asarray(run["iter"], dtype=float)
            rr = np.asarray(run["relres"], dtype=float)
            # walk the history and stop at the first clipped sample
            cut = len(rr)
            for k, v in enumerate(rr):
                if not math.isfinite(v) or v > RELRES_CLIP:
                    cut = k + 1
                    break
            rr = np.minimum(rr[:cut], RELRES_CLIP)
            it = it[:cut]
            n = max(len(it), 1)
            t = run["wall"] * (np.arange(1, len(it) + 1) / n)
            if run["diverged"]:
                label = f"{label} (diverged)"
            for ax, x in ((ax_it, it), (ax_t, t)):
                line, = ax.plot(x, np.maximum(rr, 1e-300), "-", label=label)
                if run["diverged"]:
                    ax.plot(x[-1:], rr[-1:], "x", ms=9,
                            color=line.get_color())
    for ax, xlabel in ((ax_it, "iteration"), (ax_t, "wall time [ms]")):
        ax.set_yscale("log")
        ax.set_xlabel(xlabel)
        ax.set_ylabel("relative residual")
        ax.grid(alpha=0.3)
        ax.legend(fontsize=7)
    fig.tight_layout()
    fig.savefig(out_path, dpi=150)
    plt.close(fig)


def _stem(path):
    name = str(path).rsplit("/", 1)[-1]
    return name.rsplit(".", 1)[0]


def render(kind, tables, out_path, log_loss=True):
    """Dispatch a render request for one plot kind."""
    if kind in ("loss_param", "grad_compare") and len(tables) != 1:
        raise SchemaError(f"kind {kind} takes exactly one input CSV, "
                          f"got {len(tables)}")
    if kind == "loss_param":
        render_loss_param(tables[0], out_path, log_loss=log_loss)
    elif kind == "grad_compare":
        render_grad_compare(tables[0], out_path)
    elif kind == "solver_convergence":
        render_solver_convergence(tables, out_path)
    else:
        raise SchemaError(f"unknown plot kind '{kind}'")
