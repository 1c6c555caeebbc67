"""File-based figure rendering for run artifacts.

Every renderer takes already-computed data plus an output path, writes one
PNG, and returns the path.  Rendering is a side channel: the CSV/JSON
artifacts stay authoritative and identical whether or not figures are drawn.
"""

from __future__ import annotations

import matplotlib

matplotlib.use("Agg")

import matplotlib.pyplot as plt
import numpy as np

_DPI = 130


def _finish(fig, path) -> str:
    fig.tight_layout()
    fig.savefig(path, dpi=_DPI)
    plt.close(fig)
    return str(path)


def plot_trace(trace, path) -> str:
    """Uncertainty trace: per-decision eps_delta and acceptance vs step."""
    steps = np.array([r[0] for r in trace])
    deltas = np.array([r[1] for r in trace])
    probs = np.array([r[2] for r in trace])
    uniq = np.unique(steps)
    mean_delta = np.array([deltas[steps == s].mean() for s in uniq])
    mean_prob = np.array([probs[steps == s].mean() for s in uniq])

    fig, (ax1, ax2) = plt.subplots(2, 1, figsize=(7, 6), sharex=True)
    ax1.plot(steps, deltas, ".", ms=2, alpha=0.25, color="tab:gray")
    ax1.plot(uniq, mean_delta, "-", color="tab:blue", label="per-step mean")
    ax1.set_ylabel("eps delta")
    ax1.legend(loc="upper left")
    ax2.plot(uniq, mean_prob, "-", color="tab:red")
    ax2.set_ylim(0.0, 1.05)
    ax2.set_xlabel("engine step")
    ax2.set_ylabel("mean acceptance")
    return _finish(fig, path)


def plot_profile(lam: np.ndarray, path) -> str:
    """Relaxation profile lambda_t over engine steps."""
    fig, ax = plt.subplots(figsize=(7, 3.5))
    ax.step(np.arange(1, lam.size + 1), lam, where="mid", color="tab:green")
    ax.set_ylim(0.0, 1.05)
    ax.set_xlabel("engine step")
    ax.set_ylabel("lambda")
    return _finish(fig, path)


def plot_loss_curve(rows, path) -> str:
    """Training curve: total and components per epoch, log scale."""
    rows = list(rows)
    epochs = [r[0] for r in rows]
    fig, ax = plt.subplots(figsize=(7, 4))
    labels = ["noise", "feature", "smooth", "total"]
    styles = ["-", "--", ":", "-"]
    colors = ["tab:blue", "tab:orange", "tab:purple", "black"]
    for idx, (lab, ls, col) in enumerate(zip(labels, styles, colors), start=1):
        vals = np.array([r[idx] for r in rows])
        if np.any(vals > 0.0):
            ax.semilogy(epochs, np.maximum(vals, 1e-12), ls, color=col, label=lab)
    ax.set_xlabel("epoch")
    ax.set_ylabel("loss")
    ax.legend()
    return _finish(fig, path)


def plot_samples(samples: np.ndarray, path) -> str:
    """Final-state cloud: histogram in 1D, scatter of two coordinates above."""
    samples = np.atleast_2d(np.asarray(samples, dtype=np.float64))
    fig, ax = plt.subplots(figsize=(5.5, 5))
    if samples.shape[1] == 1:
        ax.hist(samples[:, 0], bins=80, color="tab:blue", alpha=0.8)
        ax.set_xlabel("x")
    else:
        ax.plot(samples[:, 0], samples[:, 1], ".", ms=3, alpha=0.4, color="tab:blue")
        ax.set_xlabel("x[0]")
        ax.set_ylabel("x[1]")
        ax.set_aspect("equal", adjustable="datalim")
    return _finish(fig, path)


def plot_sweep(rows, axis_label: str, path) -> str:
    """Sweep table: efficiency, modeled speedup and acceptance vs axis value."""
    rows = list(rows)
    xs = [r[0] for r in rows]
    fig, ax = plt.subplots(figsize=(7, 4))
    ax.plot(xs, [r[1] for r in rows], "o-", color="tab:blue", label="efficiency")
    ax.plot(xs, [r[2] for r in rows], "s--", color="tab:orange", label="modeled speedup")
    ax.set_xlabel(axis_label)
    ax.set_ylabel("steps per invocation")
    ax2 = ax.twinx()
    ax2.plot(xs, [r[3] for r in rows], "^:", color="tab:red", label="acceptance")
    ax2.set_ylim(0.0, 1.05)
    ax2.set_ylabel("mean acceptance")
    h1, l1 = ax.get_legend_handles_labels()
    h2, l2 = ax2.get_legend_handles_labels()
    ax.legend(h1 + h2, l1 + l2, loc="best")
    return _finish(fig, path)
