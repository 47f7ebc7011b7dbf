"""Backbone + classifier + per-task heads + softmax gate, and the gated loss.

The training objective is::

    total = L_cls + ssl_ratio * mean_i( sum_n gate[i, n] * ssl_loss[i, n] )

where ``gate = softmax(features @ W + b)`` is computed per sample from the
pooled backbone features and ``ssl_loss[i, n]`` is the per-sample
cross-entropy of the ``n``-th pretext head.
"""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path
from typing import Callable, Sequence

import torch
import torch.nn as nn
import torch.nn.functional as F

from .backbones import BackboneSpec, build_backbone
from .pretext import PretextTask, canonical_order, parse_tasks


@dataclass
class ModelOutput:
    features: torch.Tensor
    logits: torch.Tensor
    ssl_logits: list[torch.Tensor]
    gates: torch.Tensor
    activations: torch.Tensor


@dataclass
class LossBreakdown:
    classifier_loss: torch.Tensor
    ssl_losses: torch.Tensor  # (t,) batch mean per task
    gated_ssl: torch.Tensor
    total: torch.Tensor
    ssl_ratio: float
    gates: torch.Tensor  # (B, t)


class NormedLinear(nn.Module):
    """Cosine classifier used with the LDAM margin loss."""

    def __init__(self, in_features, out_features):
        super().__init__()
        self.weight = nn.Parameter(torch.empty(in_features, out_features))
        self.weight.data.uniform_(-1, 1).renorm_(2, 1, 1e-5).mul_(1e5)

    def forward(self, x):
        return F.normalize(x, dim=1) @ F.normalize(self.weight, dim=0)


def gate_forward(features: torch.Tensor, weight: torch.Tensor, bias: torch.Tensor) -> torch.Tensor:
    """Per-sample softmax gate, ``weight`` is ``(d, t)`` and ``bias`` ``(t,)``."""
    if features.dim() != 2 or features.shape[1] != weight.shape[0]:
        raise ValueError(
            f"gate expects features of dimension {weight.shape[0]}, got shape {tuple(features.shape)}"
        )
    return torch.softmax(features @ weight + bias, dim=1)


def cross_entropy(logits: torch.Tensor, labels: torch.Tensor, reduction: str = "mean") -> torch.Tensor:
    """Negative log-likelihood of the softmax, with a label range check."""
    labels = torch.as_tensor(labels, device=logits.device)
    if labels.numel() and (labels.min() < 0 or labels.max() >= logits.shape[1]):
        raise ValueError(f"labels must lie in [0, {logits.shape[1]}), got range "
                         f"[{int(labels.min())}, {int(labels.max())}]")
    return F.cross_entropy(logits, labels, reduction=reduction)


def gated_ssl_loss(ssl_logits: Sequence[torch.Tensor], pseudo_labels: torch.Tensor, gates: torch.Tensor):
    """Return ``(gated_ssl, per_task_mean)`` for a batch.

    ``pseudo_labels`` is ``(B, t)``; column ``n`` belongs to ``ssl_logits[n]``.
    """
    if pseudo_labels.dim() != 2 or pseudo_labels.shape[1] != len(ssl_logits):
        raise ValueError(f"expected pseudo-labels of shape (B, {len(ssl_logits)}), got {tuple(pseudo_labels.shape)}")
    if gates.shape != pseudo_labels.shape:
        raise ValueError(f"gate shape {tuple(gates.shape)} does not match pseudo-labels {tuple(pseudo_labels.shape)}")
    per_sample = torch.stack(
        [cross_entropy(lg, pseudo_labels[:, n], reduction="none") for n, lg in enumerate(ssl_logits)],
        dim=1,
    )
    gated = (gates * per_sample).sum(dim=1).mean()
    return gated, per_sample.mean(dim=0)


class GatedSSLModel(nn.Module):
    def __init__(self, backbone: nn.Module, num_classes: int, tasks: Sequence[PretextTask],
                 gated: bool = True, classifier: str = "linear"):
        super().__init__()
        if num_classes < 2:
            raise ValueError("need at least two classes")
        self.tasks = canonical_order(list(tasks))
        self.num_classes = num_classes
        self.gated = gated
        self.classifier_type = classifier
        self.backbone = backbone
        d = backbone.feature_dim
        self.feature_dim = d
        if classifier == "normed":
            self.classifier = NormedLinear(d, num_classes)
        elif classifier == "linear":
            self.classifier = nn.Linear(d, num_classes)
        else:
            raise ValueError(f"unknown classifier type {classifier!r}")
        self.ssl_heads = nn.ModuleList(nn.Linear(d, task.num_classes) for task in self.tasks)
        if gated:
            self.gate = nn.Linear(d, len(self.tasks))
            nn.init.zeros_(self.gate.weight)
            nn.init.zeros_(self.gate.bias)
        else:
            self.gate = None
        self.backbone_spec: BackboneSpec | None = None

    @property
    def num_tasks(self) -> int:
        return len(self.tasks)

    def gate_values(self, features: torch.Tensor) -> torch.Tensor:
        if self.gate is None:
            return features.new_full((features.shape[0], self.num_tasks), 1.0 / self.num_tasks)
        return gate_forward(features, self.gate.weight.t(), self.gate.bias)

    def forward(self, x: torch.Tensor) -> ModelOutput:
        features, activations = self.backbone(x)
        return ModelOutput(
            features=features,
            logits=self.classifier(features),
            ssl_logits=[head(features) for head in self.ssl_heads],
            gates=self.gate_values(features),
            activations=activations,
        )

    def classify(self, x: torch.Tensor) -> torch.Tensor:
        features, _ = self.backbone(x)
        return self.classifier(features)


def build_model(backbone: nn.Module | BackboneSpec, num_classes: int, tasks, gated: bool = True,
                classifier: str = "linear", seed: int | None = None) -> GatedSSLModel:
    spec = None
    if isinstance(backbone, BackboneSpec):
        spec = backbone
        backbone = build_backbone(spec, seed=seed)
    if isinstance(tasks, str):
        tasks = parse_tasks(tasks)
    with torch.random.fork_rng(devices=[]):
        if seed is not None:
            torch.manual_seed(seed + 1)
        model = GatedSSLModel(backbone, num_classes, tasks, gated=gated, classifier=classifier)
    model.backbone_spec = spec
    return model


def loss_from_outputs(out: ModelOutput, class_labels: torch.Tensor, pseudo_labels: torch.Tensor,
                      ssl_ratio: float, criterion: Callable | None = None) -> LossBreakdown:
    if ssl_ratio < 0:
        raise ValueError("ssl_ratio must be non-negative")
    criterion = criterion or cross_entropy
    cls_loss = criterion(out.logits, class_labels)
    gated, per_task = gated_ssl_loss(out.ssl_logits, pseudo_labels, out.gates)
    total = cls_loss + ssl_ratio * gated
    return LossBreakdown(cls_loss, per_task, gated, total, ssl_ratio, out.gates)


def total_loss(model: GatedSSLModel, images: torch.Tensor, class_labels: torch.Tensor,
               pseudo_labels: torch.Tensor, ssl_ratio: float, criterion: Callable | None = None) -> LossBreakdown:
    """One forward pass on the transformed batch, then the gated composite loss."""
    return loss_from_outputs(model(images), class_labels, pseudo_labels, ssl_ratio, criterion)


# checkpoints -----------------------------------------------------------------

def _manifest_path(path: Path) -> Path:
    return path.with_name(path.name + ".manifest")


def save_checkpoint(model: GatedSSLModel, path, ssl_ratio: float, **extra):
    """Write ``path`` (state dict) and a plain-text ``path.manifest`` sidecar."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    torch.save(model.state_dict(), path)
    meta = {
        "tasks": ",".join(t.value for t in model.tasks),
        "t": model.num_tasks,
        "q": model.num_classes,
        "d": model.feature_dim,
        "ssl_ratio": ssl_ratio,
        "gated": str(model.gated).lower(),
        "classifier": model.classifier_type,
    }
    spec = model.backbone_spec
    if spec is not None:
        meta.update({
            "backbone.family": spec.family, "backbone.depth": spec.depth,
            "backbone.width": spec.width, "backbone.input_size": spec.input_size,
        })
    meta.update(extra)
    with open(_manifest_path(path), "w") as fh:
        for k, v in meta.items():
            fh.write(f"{k}={v}\n")


def read_checkpoint_manifest(path) -> dict[str, str]:
    meta = {}
    with open(_manifest_path(Path(path))) as fh:
        for line in fh:
            line = line.strip()
            if line:
                k, _, v = line.partition("=")
                meta[k] = v
    return meta


def load_checkpoint(path, map_location="cpu") -> tuple[GatedSSLModel, dict[str, str]]:
    """Rebuild a model from its manifest and load the weights."""
    meta = read_checkpoint_manifest(path)
    if "backbone.family" not in meta:
        raise ValueError(f"checkpoint {path} has no backbone description in its manifest")
    spec = BackboneSpec(
        family=meta["backbone.family"], depth=int(meta["backbone.depth"]),
        width=int(meta["backbone.width"]), input_size=int(meta["backbone.input_size"]),
    )
    model = build_model(spec, int(meta["q"]), meta["tasks"], gated=meta["gated"] == "true",
                        classifier=meta.get("classifier", "linear"))
    model.load_state_dict(torch.load(path, map_location=map_location))
    model.eval()
    return model, meta
