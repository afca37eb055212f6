"""Figures for run reports, written next to the CSVs they are drawn from."""

from __future__ import annotations

from pathlib import Path

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402

# no Software/date chunks, so reruns write identical bytes
_PNG_META = {"Software": None}

STYLE = {
    "figure.figsize": (6.0, 3.6),
    "figure.dpi": 100,
    "axes.spines.top": False,
    "axes.spines.right": False,
    "axes.grid": True,
    "grid.alpha": 0.3,
    "font.size": 9,
    "legend.fontsize": 8,
    "legend.frameon": False,
}


def _save(fig, path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fig.savefig(path, metadata=_PNG_META)
    plt.close(fig)
    return path


def plot_distances(distances, path, title: str = "") -> Path:
    """Before/after latent distance per epoch (the separation trajectory)."""
    with plt.rc_context(STYLE):
        fig, ax = plt.subplots()
        epochs = [d.epoch for d in distances]
        ax.plot(epochs, [d.before for d in distances], color="0.55", lw=1.2, label="before PEL layer")
        ax.plot(epochs, [d.after for d in distances], color="C3", lw=1.4, label="after PEL layer")
        ax.set_xlabel("epoch")
        ax.set_ylabel("latent feature distance")
        if title:
            ax.set_title(title)
        ax.legend(loc="best")
        fig.tight_layout()
        return _save(fig, path)


def plot_losses(rows, path, title: str = "") -> Path:
    """Spectrogram loss and OT coefficient over steps, from metrics.csv rows."""
    steps = [int(r["step"]) for r in rows]
    with plt.rc_context(STYLE):
        fig, ax = plt.subplots()
        ax.plot(steps, [float(r["l_mae"]) for r in rows], color="C0", lw=0.8, label="L_mae")
        ax.set_yscale("log")
        ax.set_xlabel("step")
        ax.set_ylabel("L_mae")
        twin = ax.twinx()
        twin.plot(steps, [float(r["lambda"]) for r in rows], color="C1", lw=1.0, ls="--", label="lambda")
        twin.set_ylabel("lambda")
        twin.set_ylim(-0.05, 1.05)
        twin.grid(False)
        if title:
            ax.set_title(title)
        fig.tight_layout()
        return _save(fig, path)


def plot_mcd_bars(rows, path, label=lambda r: r["method"]) -> Path:
    """Horizontal bars of MCD mean with std whiskers, one per report row."""
    names = [label(r) for r in rows]
    with plt.rc_context(STYLE):
        height = max(2.0, 0.35 * len(rows) + 1.0)
        fig, ax = plt.subplots(figsize=(6.0, height))
        ys = range(len(rows))
        ax.barh(list(ys), [r["mcd_mean"] for r in rows], xerr=[r["mcd_std"] for r in rows],
                color="C0", alpha=0.8, error_kw={"lw": 0.8, "capsize": 2})
        ax.set_yticks(list(ys), names)
        ax.invert_yaxis()
        ax.set_xlabel("MCD (dB)")
        fig.tight_layout()
        return _save(fig, path)
