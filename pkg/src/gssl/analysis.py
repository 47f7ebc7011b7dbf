"""Grad-CAM heatmaps and embedding export."""

from __future__ import annotations

import csv
from dataclasses import dataclass
from pathlib import Path

import numpy as np
import torch
from torch.utils.data import DataLoader

from .datasets import DatasetSplit, ImageDataset


@dataclass
class Heatmap:
    values: np.ndarray  # (H', W') in [0, 1]
    target_class: int
    image_id: int | None = None


def gradcam(model, image: torch.Tensor, target_class: int, image_id: int | None = None) -> Heatmap:
    """Grad-CAM over the backbone's last convolutional activations.

    Channel weights are the spatial means of d(logit[target]) / d(activation);
    the map is the rectified weighted channel sum divided by its maximum
    (an all-zero map stays all-zero).
    """
    x = image.unsqueeze(0) if image.dim() == 3 else image
    if x.shape[0] != 1:
        raise ValueError("gradcam takes a single image")
    was_training = getattr(model, "training", False)
    model.eval()
    try:
        with torch.enable_grad():
            features, act = model.backbone(x)
            if act is None or act.dim() != 4:
                raise ValueError("model does not expose convolutional activations")
            score = model.classifier(features)[0, target_class]
            (grad,) = torch.autograd.grad(score, act)
    finally:
        model.train(was_training)
    weights = grad.mean(dim=(2, 3))[0]
    cam = torch.relu((weights[:, None, None] * act[0].detach()).sum(0))
    top = cam.max()
    if top > 0:
        cam = cam / top
    return Heatmap(cam.double().numpy(), int(target_class), image_id)


@torch.no_grad()
def embed(model, split: DatasetSplit, count: int | None = None, batch_size: int = 256) -> np.ndarray:
    """Pooled backbone features (the classifier input) for the first ``count`` samples."""
    n = len(split) if count is None else count
    if n > len(split):
        raise ValueError(f"requested {n} embeddings from a split of {len(split)}")
    model.eval()
    feats = []
    for images, _ in DataLoader(ImageDataset(split.take(np.arange(n))), batch_size=batch_size):
        feats.append(model.backbone(images)[0])
    if not feats:
        return np.zeros((0, model.feature_dim), np.float32)
    return torch.cat(feats).numpy()


def export_embeddings(model, split: DatasetSplit, count: int, path, batch_size: int = 256) -> int:
    """Write ``id,label,f1..fd`` rows in split order; returns the row count."""
    feats = embed(model, split, count, batch_size)
    d = model.feature_dim
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["id", "label"] + [f"f{j + 1}" for j in range(d)])
        for i in range(count):
            w.writerow([int(split.indices[i]), int(split.labels[i])] + [repr(v) for v in feats[i].tolist()])
    return count


def read_embeddings(path):
    """Return ``(ids, labels, features)`` from an export."""
    with open(path, newline="") as fh:
        rows = list(csv.reader(fh))
    body = rows[1:]
    ids = np.array([int(r[0]) for r in body], dtype=np.int64)
    labels = np.array([int(r[1]) for r in body], dtype=np.int64)
    feats = np.array([[float(v) for v in r[2:]] for r in body], dtype=np.float64).reshape(len(body), len(rows[0]) - 2)
    return ids, labels, feats
