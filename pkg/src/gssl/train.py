"""Supervised training with the gated pretext objective."""

from __future__ import annotations

import csv
import logging
import math
import random
from dataclasses import dataclass
from pathlib import Path
from typing import Callable, Sequence

import numpy as np
import torch
import torch.nn.functional as F
from torch.utils.data import DataLoader

from .datasets import DatasetSplit, ImageDataset, PretextDataset
from .gatenet import GatedSSLModel, loss_from_outputs, save_checkpoint
from .pretext import canonical_order, parse_tasks

log = logging.getLogger(__name__)

SCHEDULES = ("step", "cosine", "constant")
OBJECTIVES = ("ce", "ldam_drw")


class TrainingError(RuntimeError):
    pass


@dataclass
class TrainConfig:
    epochs: int = 300
    batch_size: int = 128
    eval_batch_size: int = 256
    lr: float = 0.1
    momentum: float = 0.9
    weight_decay: float = 2e-4
    schedule: str = "step"
    milestones: tuple[int, ...] = (160, 180)
    gamma: float = 0.01
    ssl_ratio: float = 0.1
    gate_lr_scale: float = 1.0
    tasks: str = "lorot,flip,channel"
    gated: bool = True
    objective: str = "ce"
    transform_prob: float = 1.0
    base_augment: bool = True
    seed: int = 0
    deterministic: bool = True
    num_workers: int = 0

    def validate(self):
        if self.epochs < 0:
            raise ValueError("epochs must be >= 0")
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")
        if self.ssl_ratio < 0:
            raise ValueError("ssl_ratio must be >= 0")
        if self.gate_lr_scale < 0:
            raise ValueError("gate_lr_scale must be >= 0")
        if self.schedule not in SCHEDULES:
            raise ValueError(f"schedule must be one of {SCHEDULES}")
        if self.objective not in OBJECTIVES:
            raise ValueError(f"objective must be one of {OBJECTIVES}")
        if any(b <= a for a, b in zip(self.milestones, self.milestones[1:])):
            raise ValueError("milestones must be strictly increasing")
        if not 0 <= self.transform_prob <= 1:
            raise ValueError("transform_prob must lie in [0, 1]")
        parse_tasks(self.tasks)

    @property
    def task_list(self):
        return parse_tasks(self.tasks)


@dataclass
class LDAMConfig:
    max_margin: float = 0.5
    scale: float = 30.0
    drw_epoch: int = 160
    beta: float = 0.9999


@dataclass
class EpochMetrics:
    epoch: int
    lr: float
    loss_total: float
    loss_cls: float
    loss_ssl: list[float]
    gates: list[float]
    val_acc: float


# learning-rate schedules -----------------------------------------------------

def step_lr(base_lr: float, epoch: int, milestones: Sequence[int], gamma: float) -> float:
    """``base_lr * gamma ** (number of milestones <= epoch)``; epochs count from 0."""
    return base_lr * gamma ** sum(1 for m in milestones if epoch >= m)


def cosine_lr(base_lr: float, epoch: int, total: int) -> float:
    return base_lr * 0.5 * (1 + math.cos(math.pi * epoch / max(total, 1)))


def fixmatch_lr(base_lr: float, k: int, total: int) -> float:
    return base_lr * math.cos(7 * math.pi * k / (16 * total))


def lr_at(cfg: TrainConfig, epoch: int) -> float:
    if cfg.schedule == "step":
        return step_lr(cfg.lr, epoch, cfg.milestones, cfg.gamma)
    if cfg.schedule == "cosine":
        return cosine_lr(cfg.lr, epoch, cfg.epochs)
    return cfg.lr


def set_lr(optimizer, lr: float):
    for group in optimizer.param_groups:
        group["lr"] = lr * group.get("lr_scale", 1.0)


# LDAM-DRW ----------------------------------------------------------------------

def ldam_margins(class_counts: Sequence[int], max_margin: float = 0.5) -> torch.Tensor:
    """Margins proportional to ``n_j ** -1/4``, rescaled so the largest is ``max_margin``."""
    counts = np.asarray(class_counts, dtype=np.float64)
    if (counts <= 0).any():
        raise ValueError("class counts must be positive")
    m = 1.0 / np.sqrt(np.sqrt(counts))
    return torch.from_numpy(m * (max_margin / m.max()))


def drw_weights(class_counts: Sequence[int], beta: float = 0.9999) -> torch.Tensor:
    """Effective-number class weights ``(1 - beta) / (1 - beta ** n_j)``, summing to K."""
    counts = np.asarray(class_counts, dtype=np.float64)
    w = (1.0 - beta) / (1.0 - np.power(beta, counts))
    return torch.from_numpy(w / w.sum() * len(counts))


def ldam_drw_loss(logits: torch.Tensor, labels: torch.Tensor, class_counts: Sequence[int] | None,
                  cfg: LDAMConfig, epoch: int, margins: torch.Tensor | None = None) -> torch.Tensor:
    """Margin-shifted, scaled cross-entropy; class-reweighted from ``cfg.drw_epoch`` on."""
    if class_counts is None:
        raise ValueError("LDAM needs the training class counts")
    if len(class_counts) != logits.shape[1]:
        raise ValueError(f"{len(class_counts)} class counts for {logits.shape[1]} classes")
    if margins is None:
        margins = ldam_margins(class_counts, cfg.max_margin)
    margins = margins.to(logits)
    shifted = logits - F.one_hot(labels, logits.shape[1]).to(logits) * margins[labels].unsqueeze(1)
    weight = drw_weights(class_counts, cfg.beta).to(logits) if epoch >= cfg.drw_epoch else None
    return F.cross_entropy(cfg.scale * shifted, labels, weight=weight)


class LDAMDRWLoss:
    """Stateful criterion: call :meth:`set_epoch` before each epoch."""

    def __init__(self, class_counts: Sequence[int], cfg: LDAMConfig):
        self.class_counts = list(class_counts)
        self.cfg = cfg
        self.margins = ldam_margins(self.class_counts, cfg.max_margin)
        self.epoch = 0

    def set_epoch(self, epoch: int):
        self.epoch = epoch

    def __call__(self, logits, labels):
        return ldam_drw_loss(logits, labels, self.class_counts, self.cfg, self.epoch, self.margins)


# evaluation ----------------------------------------------------------------------

def seed_everything(seed: int, deterministic: bool = True):
    random.seed(seed)
    np.random.seed(seed)
    torch.manual_seed(seed)
    if deterministic:
        torch.use_deterministic_algorithms(True, warn_only=True)


@torch.no_grad()
def evaluate(model: GatedSSLModel, split: DatasetSplit, batch_size: int = 256) -> float:
    """Top-1 accuracy on clean images."""
    if len(split) == 0:
        return float("nan")
    was_training = model.training
    model.eval()
    correct = 0
    for images, labels in DataLoader(ImageDataset(split), batch_size=batch_size):
        correct += (model.classify(images).argmax(1) == labels).sum().item()
    model.train(was_training)
    return correct / len(split)


@torch.no_grad()
def log_gates(model: GatedSSLModel, batches) -> torch.Tensor:
    """Mean gate value per task over a stream of image batches."""
    was_training = model.training
    model.eval()
    total = torch.zeros(model.num_tasks, dtype=torch.float64)
    n = 0
    for batch in batches:
        images = batch[0] if isinstance(batch, (list, tuple)) else batch
        features, _ = model.backbone(images)
        total += model.gate_values(features).double().sum(0)
        n += images.shape[0]
    model.train(was_training)
    return total / max(n, 1)


@torch.no_grad()
def pretext_accuracy(model: GatedSSLModel, split: DatasetSplit, seed: int = 12345,
                     batch_size: int = 256) -> list[float]:
    """Head accuracy per task on held-out images with freshly sampled transforms."""
    ds = PretextDataset(split, model.tasks, seed=seed, base_augment=False)
    was_training = model.training
    model.eval()
    correct = torch.zeros(model.num_tasks)
    for images, _, pseudo in DataLoader(ds, batch_size=batch_size):
        out = model(images)
        for n, lg in enumerate(out.ssl_logits):
            correct[n] += (lg.argmax(1) == pseudo[:, n]).sum()
    model.train(was_training)
    return (correct / max(len(split), 1)).tolist()


# metrics CSV ---------------------------------------------------------------------

def metrics_header(tasks) -> list[str]:
    names = [t.value for t in tasks]
    return (["epoch", "lr", "loss_total", "loss_cls"] + [f"loss_ssl_{n}" for n in names]
            + [f"gate_{n}" for n in names] + ["val_acc"])


class MetricsWriter:
    def __init__(self, path, tasks):
        self.path = Path(path)
        self.path.parent.mkdir(parents=True, exist_ok=True)
        with open(self.path, "w", newline="") as fh:
            csv.writer(fh).writerow(metrics_header(tasks))

    def write(self, m: EpochMetrics):
        row = [m.epoch, repr(m.lr), repr(m.loss_total), repr(m.loss_cls)]
        row += [repr(x) for x in m.loss_ssl] + [repr(x) for x in m.gates] + [repr(m.val_acc)]
        with open(self.path, "a", newline="") as fh:
            csv.writer(fh).writerow(row)


def read_metrics(path) -> list[dict[str, str]]:
    with open(path, newline="") as fh:
        return list(csv.DictReader(fh))


# training loop -------------------------------------------------------------------

def make_optimizer(model: GatedSSLModel, cfg: TrainConfig, lr: float | None = None):
    """SGD; the gate gets its own group so its step size can be scaled."""
    lr = cfg.lr if lr is None else lr
    gate = list(model.gate.parameters()) if model.gate is not None else []
    gate_ids = {id(p) for p in gate}
    rest = [p for p in model.parameters() if id(p) not in gate_ids]
    groups = [{"params": rest, "lr_scale": 1.0}]
    if gate:
        groups.append({"params": gate, "lr_scale": cfg.gate_lr_scale})
    opt = torch.optim.SGD(groups, lr=lr, momentum=cfg.momentum, weight_decay=cfg.weight_decay)
    set_lr(opt, lr)
    return opt


def train_supervised(
    cfg: TrainConfig,
    train_split: DatasetSplit,
    val_split: DatasetSplit | None,
    model: GatedSSLModel,
    out_dir=None,
    criterion: Callable | None = None,
    perturb: Callable | None = None,
    ldam: LDAMConfig | None = None,
) -> tuple[GatedSSLModel, list[EpochMetrics]]:
    """Mini-batch SGD on the gated objective; returns the final model and per-epoch metrics.

    ``perturb(model, images, labels)`` may replace each transformed batch
    before the loss (used for adversarial training).
    """
    cfg.validate()
    if canonical_order(cfg.task_list) != model.tasks:
        raise ValueError("model tasks do not match the configured tasks")
    seed_everything(cfg.seed, cfg.deterministic)
    if criterion is None and cfg.objective == "ldam_drw":
        criterion = LDAMDRWLoss(train_split.class_counts(), ldam or LDAMConfig())
    dataset = PretextDataset(train_split, model.tasks, seed=cfg.seed, prob=cfg.transform_prob,
                             base_augment=cfg.base_augment)
    optimizer = make_optimizer(model, cfg)
    out_dir = Path(out_dir) if out_dir else None
    writer = MetricsWriter(out_dir / "metrics.csv", model.tasks) if out_dir else None
    history: list[EpochMetrics] = []
    best_acc = -1.0

    for epoch in range(cfg.epochs):
        lr = lr_at(cfg, epoch)
        set_lr(optimizer, lr)
        dataset.set_epoch(epoch)
        if hasattr(criterion, "set_epoch"):
            criterion.set_epoch(epoch)
        gen = torch.Generator().manual_seed(cfg.seed * 100003 + epoch)
        loader = DataLoader(dataset, batch_size=cfg.batch_size, shuffle=True, generator=gen,
                            num_workers=cfg.num_workers)
        model.train()
        sums = torch.zeros(2 + model.num_tasks, dtype=torch.float64)
        seen = 0
        for batch_idx, (images, labels, pseudo) in enumerate(loader):
            if perturb is not None:
                images = perturb(model, images, labels)
            parts = loss_from_outputs(model(images), labels, pseudo, cfg.ssl_ratio, criterion)
            if not torch.isfinite(parts.total):
                raise TrainingError(f"non-finite loss {parts.total.item()} at epoch {epoch + 1}, batch {batch_idx}")
            optimizer.zero_grad(set_to_none=True)
            parts.total.backward()
            optimizer.step()
            b = images.shape[0]
            sums += b * torch.cat([parts.total.detach().double().view(1),
                                   parts.classifier_loss.detach().double().view(1),
                                   parts.ssl_losses.detach().double()])
            seen += b
        means = (sums / max(seen, 1)).tolist()

        if val_split is not None and len(val_split):
            val_acc = evaluate(model, val_split, cfg.eval_batch_size)
            gates = log_gates(model, DataLoader(ImageDataset(val_split), batch_size=cfg.eval_batch_size))
        else:
            val_acc = float("nan")
            gates = torch.full((model.num_tasks,), 1.0 / model.num_tasks, dtype=torch.float64)
        m = EpochMetrics(epoch + 1, lr, means[0], means[1], means[2:], gates.tolist(), val_acc)
        history.append(m)
        log.info("epoch %d lr %.5g loss %.4f cls %.4f val_acc %.4f gates %s", m.epoch, lr,
                 m.loss_total, m.loss_cls, val_acc, np.round(m.gates, 4).tolist())
        if writer:
            writer.write(m)
            save_checkpoint(model, out_dir / "last.pt", cfg.ssl_ratio, epoch=m.epoch)
            if val_acc > best_acc:
                best_acc = val_acc
                save_checkpoint(model, out_dir / "best.pt", cfg.ssl_ratio, epoch=m.epoch)
    return model, history
