"""Matplotlib figures written next to the CSV/JSON reports."""

from __future__ import annotations

import math
from typing import Mapping, Sequence

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402

STYLE = {
    "figure.figsize": (6.0, 4.0),
    "axes.grid": True,
    "grid.alpha": 0.3,
    "axes.spines.top": False,
    "axes.spines.right": False,
    "font.size": 10,
    "legend.fontsize": 8,
    "savefig.dpi": 120,
    "savefig.bbox": "tight",
}


def _save(fig, path) -> None:
    fig.savefig(path)
    plt.close(fig)


def plot_training_log(log, path) -> None:
    with plt.rc_context(STYLE):
        fig, ax = plt.subplots()
        epochs = [r.epoch for r in log.rows]
        ax.plot(epochs, [r.loss for r in log.rows], label="objective")
        ax.plot(epochs, [r.mse for r in log.rows], label="MSE", alpha=0.7)
        if log.best_epoch >= 0:
            ax.axvline(log.best_epoch, color="k", ls=":", lw=1, label="selected")
        ax.set_yscale("log")
        ax.set_xlabel("epoch")
        ax.set_ylabel("training loss")
        lr_ax = ax.twinx()
        lr_ax.step(epochs, [r.lr for r in log.rows], where="post", color="tab:red", lw=1)
        lr_ax.set_ylabel("learning rate", color="tab:red")
        lr_ax.grid(False)
        ax.legend(loc="upper right")
        _save(fig, path)


def plot_eval_scatter(run, path, title: str = "") -> None:
    """Predicted vs subjective scores with the fitted logistic."""
    from .metrics import logistic4

    with plt.rc_context(STYLE):
        fig, ax = plt.subplots()
        x = np.asarray(run.predicted)
        y = np.asarray(run.subjective)
        ax.scatter(x, y, s=18)
        if not run.fit_fallback and all(math.isfinite(b) for b in run.beta):
            grid = np.linspace(x.min(), x.max(), 200)
            ax.plot(grid, logistic4(grid, run.beta), color="tab:orange", label="logistic fit")
            ax.legend(loc="lower right")
        ax.set_xlabel("predicted score")
        ax.set_ylabel("subjective score (higher = better)")
        ax.set_title(title or f"PLCC {run.plcc:.4f}  SROCC {run.srocc:.4f}")
        _save(fig, path)


def plot_sweep(rows: Sequence, curves: Mapping[int, list], path) -> None:
    """Test SROCC per epoch for each segment length (median over repeats)."""
    with plt.rc_context(STYLE):
        fig, (ax, bx) = plt.subplots(1, 2, figsize=(10, 4))
        for D, runs in sorted(curves.items()):
            if not runs or not runs[0]:
                continue
            n = min(len(r) for r in runs)
            med = np.nanmedian(np.array([r[:n] for r in runs]), axis=0)
            ax.plot(np.arange(n), med, label=f"{D} frames")
        ax.set_xlabel("epoch")
        ax.set_ylabel("test SROCC")
        ax.legend()
        ds = [r.frames for r in rows]
        bx.plot(ds, [r.plcc for r in rows], "o-", label="PLCC")
        bx.plot(ds, [r.srocc for r in rows], "s-", label="SROCC")
        bx.set_xscale("log", base=2)
        bx.set_xticks(ds, [str(d) for d in ds])
        bx.set_xlabel("segment length (frames)")
        bx.legend()
        _save(fig, path)


def plot_maps(maps: Mapping[str, np.ndarray], frames: Sequence[int], path) -> None:
    """Grid of response maps: one row per frame, one column per map kind."""
    kinds = list(maps)
    with plt.rc_context(STYLE):
        fig, axes = plt.subplots(len(frames), len(kinds), squeeze=False,
                                 figsize=(2.2 * len(kinds), 2.2 * len(frames)))
        for i, t in enumerate(frames):
            for j, k in enumerate(kinds):
                a = axes[i][j]
                a.imshow(maps[k][t], cmap="gray")
                a.set_xticks([])
                a.set_yticks([])
                if i == 0:
                    a.set_title(k.replace("_", " "))
                if j == 0:
                    a.set_ylabel(f"frame {t}")
        _save(fig, path)
