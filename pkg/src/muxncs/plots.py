"""Figure rendering for the command-line reports.

Only the CLI imports this module; the library core stays free of plotting
dependencies.  Every function writes one PNG next to the CSV it depicts.
"""

from __future__ import annotations

import matplotlib

matplotlib.use("Agg")

import matplotlib.pyplot as plt
import numpy as np


def _save(fig, path):
    fig.tight_layout()
    fig.savefig(path, dpi=150)
    plt.close(fig)
    return path


def plot_sweep(rows, path):
    """Certified exploration rate vs delivery probability."""
    certified = [(r.delta, r.epsilon_bar) for r in rows if r.epsilon_bar is not None]
    missing = [r.delta for r in rows if r.epsilon_bar is None]
    fig, ax = plt.subplots(figsize=(6, 4))
    if certified:
        xs, ys = zip(*certified)
        ax.plot(xs, ys, "o-", color="tab:blue", label="certified $\\bar\\varepsilon$")
    for i, d in enumerate(missing):
        ax.axvline(d, color="tab:red", ls=":", lw=1,
                   label="no feasible $\\varepsilon$" if i == 0 else None)
    ax.set_xlabel("delivery probability $\\delta$")
    ax.set_ylabel("certified exploration rate $\\bar\\varepsilon$")
    ax.grid(alpha=0.3)
    ax.legend()
    return _save(fig, path)


def plot_decay(mean_zeta_sq, estimate, path):
    """Mean squared augmented state vs time with the fitted envelope."""
    y = np.asarray(mean_zeta_sq, dtype=float)
    ks = np.arange(y.size)
    finite = np.isfinite(y) & (y > 0)
    fig, ax = plt.subplots(figsize=(6, 4))
    ax.semilogy(ks[finite], y[finite], lw=1.2, label="$E[\\zeta_k^T\\zeta_k]$")
    if estimate is not None and np.isfinite(estimate.xi):
        y0 = y[finite][0] if finite.any() else 1.0
        ax.semilogy(ks, y0 * estimate.xi ** ks, "--", color="tab:orange",
                    label=f"fit $\\xi$={estimate.xi:.4f} ($R^2$={estimate.r_squared:.3f})")
    ax.set_xlabel("step $k$")
    ax.set_ylabel("mean squared state")
    ax.grid(alpha=0.3, which="both")
    ax.legend()
    return _save(fig, path)


def plot_reward_curve(curve, path, window: int = 100):
    """Per-episode total reward and its trailing moving average."""
    curve = np.asarray(curve, dtype=float)
    fig, ax = plt.subplots(figsize=(6, 4))
    ax.plot(curve, lw=0.8, alpha=0.5, label="episode total reward")
    if curve.size:
        moving = np.array([curve[max(0, e - window + 1):e + 1].mean()
                           for e in range(curve.size)])
        ax.plot(moving, lw=2, color="tab:red", label=f"moving avg ({window})")
    ax.set_xlabel("episode")
    ax.set_ylabel("total reward")
    ax.grid(alpha=0.3)
    ax.legend()
    return _save(fig, path)


def plot_compare(names, means, stderrs, path):
    """Average per-step reward per policy with standard-error bars."""
    fig, ax = plt.subplots(figsize=(6, 4))
    xs = np.arange(len(names))
    ax.bar(xs, means, yerr=stderrs, capsize=4, color="tab:blue", alpha=0.8)
    ax.set_xticks(xs)
    ax.set_xticklabels(names, rotation=15, ha="right")
    ax.set_ylabel("average per-step reward")
    ax.grid(alpha=0.3, axis="y")
    return _save(fig, path)
