"""Figures written next to the CSV/JSON outputs: loss curves, threshold sweeps, entropy histograms."""

from __future__ import annotations

from pathlib import Path

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402

GOLDEN = (np.sqrt(5.0) - 1.0) / 2.0
STYLE = {
    "font.size": 9,
    "axes.labelsize": 9,
    "legend.fontsize": 8,
    "xtick.labelsize": 8,
    "ytick.labelsize": 8,
    "lines.linewidth": 1.2,
    "axes.spines.top": False,
    "axes.spines.right": False,
    "savefig.dpi": 150,
}


def _figure(width=4.5, ncols=1):
    fig, ax = plt.subplots(1, ncols, figsize=(width * ncols, width * GOLDEN))
    return fig, ax


def _save(fig, path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fig.tight_layout()
    # no timestamp/version in metadata so reruns produce the same bytes
    fig.savefig(path, metadata={"Software": None})
    plt.close(fig)
    return path


def plot_training_loss(records: list[dict], path) -> Path:
    """Total and per-head loss against epoch."""
    with plt.rc_context(STYLE):
        fig, ax = _figure()
        ep = [r["epoch"] for r in records]
        for key, label in (("loss_total", "joint"), ("loss_visual", "visual head"),
                           ("loss_semantic", "semantic head")):
            ax.plot(ep, [r[key] for r in records], label=label)
        ax.set_xlabel("epoch")
        ax.set_ylabel("mean loss")
        if records and min(min(r["loss_visual"], r["loss_semantic"]) for r in records) > 0:
            ax.set_yscale("log")
        ax.legend(frameon=False)
        return _save(fig, path)


def plot_threshold_sweep(columns, table: np.ndarray, best: dict, path) -> Path:
    """Validation objective vs threshold, one line per (lambda, t) cell; the pick is marked."""
    table = np.asarray(table)
    with plt.rc_context(STYLE):
        fig, ax = _figure(width=5.0)
        cells = sorted({(float(r[0]), int(r[1])) for r in table})
        for lam, t in cells:
            rows = table[(table[:, 0] == lam) & (table[:, 1] == t)]
            ax.plot(rows[:, 2], rows[:, -1], label=f"lambda={lam:g}, t={t}")
        ax.axvline(best["threshold"], color="k", ls="--", lw=0.8)
        ax.plot([best["threshold"]], [best["h"]], "ko", ms=4)
        ax.set_xlabel("entropy threshold")
        ax.set_ylabel(f"validation {columns[-1]}")
        ax.set_ylim(-0.02, 1.02)
        if len(cells) <= 12:
            ax.legend(frameon=False, fontsize=7)
        return _save(fig, path)


def plot_entropy_histogram(entropy_seen, entropy_other, threshold: float, path,
                           other_name: str = "unseen") -> Path:
    """Entropy distributions of seen-class vs other test instances with the gate position."""
    a = np.asarray(entropy_seen, dtype=np.float64)
    b = np.asarray(entropy_other, dtype=np.float64)
    with plt.rc_context(STYLE):
        fig, ax = _figure()
        both = np.concatenate([a, b])
        hi = float(both.max()) if both.size else 1.0
        bins = np.linspace(0.0, max(hi, 1e-12), 41)
        if a.size:
            ax.hist(a, bins=bins, alpha=0.6, label="seen classes")
        if b.size:
            ax.hist(b, bins=bins, alpha=0.6, label=f"{other_name} classes")
        if np.isfinite(threshold):
            ax.axvline(threshold, color="k", ls="--", lw=0.8, label="threshold")
        ax.set_xlabel("entropy (nats)")
        ax.set_ylabel("instances")
        ax.legend(frameon=False)
        return _save(fig, path)
