"""Figures written next to the CSV outputs."""

from __future__ import annotations

import math

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402

STYLE = {
    "figure.figsize": (6.4, 4.0),
    "axes.grid": True,
    "grid.alpha": 0.3,
    "font.size": 10,
    "legend.fontsize": 8,
    "savefig.dpi": 120,
}


def _finite(values):
    return [v if v is not None and math.isfinite(v) else float("nan") for v in values]


def plot_training(record, path):
    with plt.rc_context(STYLE):
        fig, (ax_loss, ax_val) = plt.subplots(1, 2, figsize=(10, 4))
        steps = [r["step"] for r in record.steps]
        ax_loss.plot(steps, _finite([r["loss"] for r in record.steps]), lw=0.8)
        ax_loss.set_xlabel("step")
        ax_loss.set_ylabel("train CTC loss")
        ax_loss.set_yscale("log")

        epochs = [0] + [e["epoch"] for e in record.epochs]
        ax_val.plot(epochs, _finite([record.initial_val_loss] + [e["val_loss"] for e in record.epochs]),
                    marker="o", ms=3, label="val loss")
        ax_val.set_xlabel("epoch")
        ax_val.set_ylabel("val CTC loss")
        ax_val.set_yscale("log")
        ax_ter = ax_val.twinx()
        ax_ter.plot(epochs, _finite([record.initial_val_ter] + [e["val_ter"] for e in record.epochs]),
                    color="C1", marker="s", ms=3, label="val TER")
        ax_ter.set_ylabel("token error rate")
        ax_ter.grid(False)
        fig.suptitle(record.run_id + (" (diverged)" if record.diverged else ""))
        fig.tight_layout()
        fig.savefig(path)
        plt.close(fig)


def plot_stability(curves: dict, path):
    """Validation loss per epoch for every converged run, one colour per cell."""
    with plt.rc_context(STYLE):
        fig, ax = plt.subplots()
        for i, ((arch, lr), runs) in enumerate(sorted(curves.items())):
            label = f"{arch} lr={lr:g}"
            for run in runs:
                if run is None:
                    continue
                ax.plot(range(len(run)), _finite(run), color=f"C{i}", alpha=0.6, lw=1, label=label)
                label = None
        ax.set_xlabel("epoch")
        ax.set_ylabel("validation CTC loss")
        ax.set_yscale("log")
        handles, labels = ax.get_legend_handles_labels()
        if handles:
            ax.legend()
        fig.tight_layout()
        fig.savefig(path)
        plt.close(fig)


def plot_profile(report, path):
    with plt.rc_context(STYLE):
        fig, ax = plt.subplots()
        names = [m["name"] for m in report.modules]
        ax.barh(names, [m["macs"] / 1e9 for m in report.modules])
        ax.invert_yaxis()
        ax.set_xlabel("GMACs")
        ax.set_title(f"{report.assumptions['layer_kind']}  {report.assumptions['seconds']:g}s input")
        fig.tight_layout()
        fig.savefig(path)
        plt.close(fig)
