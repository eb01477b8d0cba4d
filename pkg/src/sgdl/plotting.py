"""Report figures written next to a run's CSV outputs."""
from __future__ import annotations

from pathlib import Path

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402

STYLE = {
    "figure.figsize": (5.0, 3.4),
    "figure.dpi": 120,
    "font.size": 9,
    "axes.labelsize": 9,
    "legend.fontsize": 8,
    "axes.spines.top": False,
    "axes.spines.right": False,
}

CLEAN_COLOR = "#1f77b4"
NOISY_COLOR = "#d62728"


def _num(rows, key):
    return np.array([float(r[key]) if r.get(key) not in (None, "") else np.nan for r in rows])


def _save(fig, path):
    path = Path(path)
    fig.tight_layout()
    fig.savefig(path)
    plt.close(fig)
    return path


def plot_memory_rates(mem_rows, t_m, path, title=None):
    with plt.rc_context(STYLE):
        fig, ax = plt.subplots()
        ep = _num(mem_rows, "epoch")
        ax.plot(ep, _num(mem_rows, "mem_rate_clean"), color=CLEAN_COLOR, label="clean")
        ax.plot(ep, _num(mem_rows, "mem_rate_noisy"), color=NOISY_COLOR, label="noisy")
        if t_m is not None:
            ax.axvline(t_m, ls=":", color="k", lw=1, label="memorization point")
        ax.set_xlabel("epoch")
        ax.set_ylabel("memory rate")
        ax.set_ylim(0, 1)
        if title:
            ax.set_title(title)
        ax.legend(frameon=False)
        return _save(fig, path)


def plot_mp_mr(mem_rows, t_m, path):
    with plt.rc_context(STYLE):
        fig, ax = plt.subplots()
        ep = _num(mem_rows, "epoch")
        ax.plot(ep, _num(mem_rows, "MP"), label="MP")
        ax.plot(ep, _num(mem_rows, "MR"), label="MR")
        if t_m is not None:
            ax.axvline(t_m, ls=":", color="k", lw=1)
        ax.set_xlabel("epoch")
        ax.set_ylim(0, 1.02)
        ax.legend(frameon=False)
        return _save(fig, path)


def plot_validation(history, path):
    with plt.rc_context(STYLE):
        fig, ax = plt.subplots()
        ep = _num(history, "epoch")
        for key in ("recall@20", "ndcg@20"):
            if history and key in history[0]:
                ax.plot(ep, _num(history, key), label=key)
        ax.set_xlabel("epoch")
        ax.set_ylabel("validation")
        ax.legend(frameon=False)
        return _save(fig, path)


def plot_weight_distribution(weight_rows, path, psi=None):
    """Histogram of learned weights by noise flag; with ``psi``, also the loss -> weight curve."""
    loss = np.array([r[0] for r in weight_rows])
    w = np.array([r[1] for r in weight_rows])
    flag = np.array([bool(r[2]) for r in weight_rows])
    ncols = 2 if psi is not None else 1
    with plt.rc_context(STYLE):
        fig, axes = plt.subplots(1, ncols, figsize=(4.2 * ncols, 3.2), squeeze=False)
        ax = axes[0, 0]
        bins = np.linspace(w.min(), w.max() + 1e-12, 30) if len(w) else 10
        ax.hist(w[~flag], bins=bins, alpha=0.6, color=CLEAN_COLOR, label="clean")
        if flag.any():
            ax.hist(w[flag], bins=bins, alpha=0.6, color=NOISY_COLOR, label="noisy")
        ax.set_xlabel("weight")
        ax.set_ylabel("count")
        ax.legend(frameon=False)
        if psi is not None:
            ax = axes[0, 1]
            grid = np.linspace(0, max(loss.max() if len(loss) else 1.0, 1e-3), 200)
            ax.plot(grid, psi.weights(grid), color="k")
            ax.set_xlabel("loss")
            ax.set_ylabel("weight")
        return _save(fig, path)


def render_run_figures(out_dir, history, mem_history, t_m, weight_rows=None, psi=None):
    out_dir = Path(out_dir)
    paths = [plot_validation(history, out_dir / "validation.png")]
    if mem_history and mem_history[0].get("mem_rate_clean") is not None:
        paths.append(plot_memory_rates(mem_history, t_m, out_dir / "memory_rate.png"))
        paths.append(plot_mp_mr(mem_history, t_m, out_dir / "mp_mr.png"))
    if weight_rows:
        paths.append(plot_weight_distribution(weight_rows, out_dir / "weights.png", psi))
    return paths
