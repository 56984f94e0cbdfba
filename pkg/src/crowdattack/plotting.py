"""File-emitting figures for evaluation reports. Uses the non-interactive Agg backend."""

from __future__ import annotations

from pathlib import Path

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402

from .metrics import REGIMES, MetricsReport, TransferMatrix  # noqa: E402
from .surrogate import ModelOutput  # noqa: E402

STYLE = {
    "font.size": 9,
    "axes.titlesize": 9,
    "axes.labelsize": 9,
    "xtick.labelsize": 8,
    "ytick.labelsize": 8,
    "legend.fontsize": 8,
    "axes.spines.top": False,
    "axes.spines.right": False,
    "savefig.dpi": 120,
    "savefig.bbox": "tight",
}


def _save(fig, path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fig.savefig(path)
    plt.close(fig)
    return path


def _draw_output(ax, image: np.ndarray, output: ModelOutput, threshold: float, title: str):
    ax.imshow(image)
    if output.density is not None:
        d = output.density.detach().cpu().numpy()
        h, w = image.shape[:2]
        ax.imshow(d, cmap="jet", alpha=0.45, extent=(0, w, h, 0), interpolation="bilinear")
    else:
        p = output.points
        keep = (p.scores > threshold).cpu().numpy()
        loc = p.locations.cpu().numpy()[keep]
        ax.scatter(loc[:, 0], loc[:, 1], s=6, c="red", marker="o", linewidths=0)
    ax.set_title(title)
    ax.set_axis_off()


def overlay_figure(clean: np.ndarray, adversarial: np.ndarray, out_clean: ModelOutput, out_adv: ModelOutput,
                   count_clean: float, count_adv: float, count_gt: int, path, threshold: float = 0.5) -> Path:
    """Clean vs adversarial side by side with predicted density or points overlaid."""
    with plt.rc_context(STYLE):
        fig, axes = plt.subplots(1, 3, figsize=(9, 3.2))
        _draw_output(axes[0], clean, out_clean, threshold, f"clean  ({count_clean:.1f}, GT {count_gt})")
        _draw_output(axes[1], adversarial, out_adv, threshold, f"adversarial  ({count_adv:.1f})")
        diff = adversarial.astype(np.float64) - clean.astype(np.float64)
        lim = max(1e-9, float(np.abs(diff).max()))
        im = axes[2].imshow(diff.mean(axis=2), cmap="RdBu_r", vmin=-lim, vmax=lim)
        axes[2].set_title("perturbation (mean over RGB)")
        axes[2].set_axis_off()
        fig.colorbar(im, ax=axes[2], fraction=0.046, pad=0.04)
        return _save(fig, path)


def regime_bars(report: MetricsReport, path) -> Path:
    """MAE and miss rate per density regime."""
    names = [r for r in REGIMES if report.regimes.get(r, {}).get("n")]
    with plt.rc_context(STYLE):
        fig, (a1, a2) = plt.subplots(1, 2, figsize=(6.4, 2.6))
        x = np.arange(len(names))
        a1.bar(x, [report.regimes[n]["mae"] for n in names], color="#4c72b0")
        a1.set_xticks(x, [f"{n}\n(n={report.regimes[n]['n']})" for n in names])
        a1.set_ylabel("MAE")
        a2.bar(x, [report.regimes[n]["mr"] for n in names], color="#dd8452")
        a2.set_xticks(x, names)
        a2.set_ylabel("MR (%)")
        fig.tight_layout()
        return _save(fig, path)


def transfer_heatmap(matrix: TransferMatrix, path) -> Path:
    tr = np.array([[matrix.tr[(s, t)] if matrix.tr[(s, t)] is not None else np.nan
                    for t in matrix.targets] for s in matrix.sources], dtype=float)
    with plt.rc_context(STYLE):
        fig, ax = plt.subplots(figsize=(1.6 + 1.1 * len(matrix.targets), 1.2 + 0.8 * len(matrix.sources)))
        im = ax.imshow(tr, cmap="viridis")
        ax.set_xticks(range(len(matrix.targets)), matrix.targets, rotation=20)
        ax.set_yticks(range(len(matrix.sources)), matrix.sources)
        ax.set_xlabel("target")
        ax.set_ylabel("source")
        for i, s in enumerate(matrix.sources):
            for j, t in enumerate(matrix.targets):
                label = f"{matrix.mae[(s, t)]:.1f}\n{tr[i, j]:.2f}" if np.isfinite(tr[i, j]) else "-"
                ax.text(j, i, label, ha="center", va="center", color="w", fontsize=8)
        fig.colorbar(im, ax=ax, label="TR")
        return _save(fig, path)


def training_curves(records: list[dict], path) -> Path:
    steps = [r["step"] for r in records]
    with plt.rc_context(STYLE):
        fig, (a1, a2) = plt.subplots(1, 2, figsize=(7, 2.6))
        a1.plot(steps, [r["model"] for r in records], label="model")
        a1.plot(steps, [r["pert"] for r in records], label="pert")
        a1.set_xlabel("step")
        a1.set_ylabel("loss")
        a1.legend(frameon=False)
        a2.plot(steps, [r["batch_mae"] for r in records], color="#c44e52")
        a2.set_xlabel("step")
        a2.set_ylabel("|count drop|")
        fig.tight_layout()
        return _save(fig, path)
