"""Matplotlib figures for the CLI's report outputs (rendered off-screen)."""

from __future__ import annotations

from pathlib import Path

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402

# fixed metadata keeps repeated renders byte-identical
_PNG_META = {"Software": None}


def _save(fig, path):
    path = Path(path)
    fig.tight_layout()
    fig.savefig(path, dpi=100, metadata=_PNG_META)
    plt.close(fig)
    return path


def plot_epoch_log(logs, path, title="training"):
    epochs = [log.epoch for log in logs]
    fig, axes = plt.subplots(1, 3, figsize=(11, 3.2))
    axes[0].plot(epochs, [log.L_M for log in logs], label="L_M")
    axes[0].plot(epochs, [log.L_I for log in logs], label="L_I")
    axes[0].set_title("losses")
    axes[0].legend()
    axes[1].plot(epochs, [log.sigma for log in logs], color="tab:red")
    axes[1].set_title("uncertainty sigma")
    axes[2].plot(epochs, [log.train_acc for log in logs], label="train")
    val = [log.val_acc for log in logs]
    if not np.all(np.isnan(val)):
        axes[2].plot(epochs, val, label="val")
    axes[2].set_title("accuracy")
    axes[2].legend()
    for ax in axes:
        ax.set_xlabel("epoch")
    fig.suptitle(title)
    return _save(fig, path)


def plot_mi_bench(rows, path):
    """rows: (epoch, estimator, estimate_nats, analytic_mi, rho)."""
    fig, ax = plt.subplots(figsize=(6, 4))
    keys = sorted({(r[1], r[4]) for r in rows})
    for name, rho in keys:
        sel = [r for r in rows if r[1] == name and r[4] == rho]
        ax.plot([r[0] for r in sel], [r[2] for r in sel], label=f"{name} rho={rho:g}")
    for rho in sorted({r[4] for r in rows}):
        truth = next(r[3] for r in rows if r[4] == rho)
        ax.axhline(truth, color="grey", lw=0.8, ls="--")
    ax.set_xlabel("epoch")
    ax.set_ylabel("estimate (nats)")
    ax.legend(fontsize=7)
    return _save(fig, path)


def plot_moment_clouds(clouds, rows, path):
    """Sample clouds per configuration and the per-order moment norms."""
    n = len(clouds)
    fig, axes = plt.subplots(1, n + 1, figsize=(3.2 * (n + 1), 3.2))
    for ax, (name, pts) in zip(axes, clouds.items()):
        ax.scatter(pts[:, 0], pts[:, 1], s=3)
        ax.set_title(name)
        ax.set_aspect("equal")
    configs = sorted({r[0] for r in rows})
    orders = sorted({r[1] for r in rows})
    width = 0.8 / max(len(configs), 1)
    for i, c in enumerate(configs):
        vals = [next(r[2] for r in rows if r[0] == c and r[1] == o) for o in orders]
        axes[-1].bar(np.array(orders) + i * width, vals, width=width, label=str(c))
    axes[-1].set_xlabel("order")
    axes[-1].set_title("moment norm")
    axes[-1].legend(fontsize=7)
    return _save(fig, path)


def plot_report(summary, path, row="macro"):
    """Bar chart of mean +/- std of each metric for one report row."""
    metrics = list(summary[row])
    means = [summary[row][m][0] for m in metrics]
    stds = [np.sqrt(summary[row][m][1]) for m in metrics]
    fig, ax = plt.subplots(figsize=(7, 3.5))
    ax.bar(metrics, means, yerr=stds, capsize=3)
    ax.set_ylim(0, 1.05)
    ax.set_title(f"{row} metrics across runs")
    return _save(fig, path)


def plot_noise_sweep(ratios, sigma, acc, path):
    fig, ax = plt.subplots(1, 2, figsize=(8, 3.2))
    ax[0].plot(ratios, sigma, marker="o", color="tab:red")
    ax[0].set_xlabel("noise ratio")
    ax[0].set_ylabel("mean training sigma")
    ax[1].plot(ratios, acc, marker="o")
    ax[1].set_xlabel("noise ratio")
    ax[1].set_ylabel("test accuracy")
    return _save(fig, path)


def plot_alpha_sweep(alphas, acc, path):
    fig, ax = plt.subplots(figsize=(4.5, 3.2))
    ax.plot(alphas, acc, marker="o")
    ax.set_xlabel("alpha")
    ax.set_ylabel("test accuracy")
    return _save(fig, path)
