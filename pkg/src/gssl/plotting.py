"""Figure rendering for the report paths (gate trajectories, class sizes, Grad-CAM)."""

from __future__ import annotations

import csv

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402
import torch  # noqa: E402
import torch.nn.functional as F  # noqa: E402

OVERLAY_ALPHA = 0.5

RC = {
    "font.size": 11,
    "axes.labelsize": 12,
    "axes.titlesize": 12,
    "legend.fontsize": 10,
    "lines.linewidth": 1.6,
    "axes.spines.top": False,
    "axes.spines.right": False,
    "savefig.dpi": 150,
    "savefig.bbox": "tight",
}


def read_gate_series(metrics_csv) -> tuple[str, np.ndarray, dict[str, np.ndarray]]:
    """Return ``(x_name, x, {task: values})`` from a metrics CSV."""
    with open(metrics_csv, newline="") as fh:
        reader = csv.DictReader(fh)
        cols = reader.fieldnames or []
        rows = list(reader)
    gate_cols = [c for c in cols if c.startswith("gate_")]
    x_name = "epoch" if "epoch" in cols else "iteration" if "iteration" in cols else None
    if not gate_cols or x_name is None:
        raise ValueError(f"{metrics_csv} lacks an epoch/iteration column or gate_* columns")
    x = np.array([float(r[x_name]) for r in rows])
    series = {c[len("gate_"):]: np.array([float(r[c]) for r in rows]) for c in gate_cols}
    return x_name, x, series


def plot_gates(metrics_csv, out_path) -> dict[str, np.ndarray]:
    """One line per task of the mean gate value over training."""
    x_name, x, series = read_gate_series(metrics_csv)
    with plt.rc_context(RC):
        fig, ax = plt.subplots(figsize=(6.4, 3.6))
        for i, (task, y) in enumerate(series.items()):
            ax.plot(x, y, label=f"gate_{i} ({task})")
        ax.set_xlabel(x_name)
        ax.set_ylabel("mean gate value")
        ax.set_ylim(0, 1)
        ax.legend(loc="best", frameon=False)
        fig.savefig(out_path)
        plt.close(fig)
    return series


def plot_class_distribution(counts, out_path, title: str | None = None):
    with plt.rc_context(RC):
        fig, ax = plt.subplots(figsize=(6.4, 3.4))
        ax.bar(np.arange(len(counts)), counts, color="#4c72b0")
        ax.set_xlabel("class index")
        ax.set_ylabel("number of images")
        if title:
            ax.set_title(title)
        fig.savefig(out_path)
        plt.close(fig)


def overlay(image: torch.Tensor, heatmap: np.ndarray, alpha: float = OVERLAY_ALPHA) -> np.ndarray:
    """Upsample ``heatmap`` to the image size and alpha-blend a jet colouring over it."""
    img = image.detach().permute(1, 2, 0).cpu().numpy()
    h, w = img.shape[:2]
    up = F.interpolate(torch.as_tensor(heatmap, dtype=torch.float32)[None, None], size=(h, w),
                       mode="bilinear", align_corners=False)[0, 0].clamp(0, 1).numpy()
    colour = matplotlib.colormaps["jet"](up)[..., :3]
    return (1 - alpha) * img + alpha * colour


def save_gradcam_figure(image: torch.Tensor, heatmap: np.ndarray, out_path, title: str | None = None):
    with plt.rc_context(RC):
        fig, axes = plt.subplots(1, 2, figsize=(5, 2.6))
        axes[0].imshow(image.permute(1, 2, 0).cpu().numpy())
        axes[1].imshow(overlay(image, heatmap))
        for ax in axes:
            ax.axis("off")
        if title:
            fig.suptitle(title)
        fig.savefig(out_path)
        plt.close(fig)
