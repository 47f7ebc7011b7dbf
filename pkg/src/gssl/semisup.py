"""FixMatch with the gated pretext loss added to its objective.

    total = L_s + lambda_u * L_u + lambda_ssl * L_ssl

``L_ssl`` is the gated pretext loss over the labeled and unlabeled images
together (pretext transforms are applied to the weak views).
"""

from __future__ import annotations

import copy
import csv
import logging
from dataclasses import dataclass
from pathlib import Path

import numpy as np
import torch
import torch.nn.functional as F

from .datasets import DatasetSplit, random_crop_flip, sample_rng, to_tensor
from .gatenet import GatedSSLModel, cross_entropy, gated_ssl_loss, save_checkpoint
from .pretext import transform_sample
from .train import TrainConfig, TrainingError, evaluate, fixmatch_lr, make_optimizer, seed_everything, set_lr

log = logging.getLogger(__name__)


@dataclass
class FixMatchConfig:
    tau: float = 0.95
    lambda_u: float = 1.0
    mu: int = 7
    lambda_ssl: float = 0.3
    iterations: int = 2 ** 20
    eval_every: int = 1024
    num_labeled: int = 4000
    ema: bool = False
    ema_decay: float = 0.999

    def validate(self):
        if not 0 < self.tau <= 1:
            raise ValueError("tau must lie in (0, 1]")
        if self.mu < 1:
            raise ValueError("mu must be a positive integer")
        if self.lambda_u < 0 or self.lambda_ssl < 0:
            raise ValueError("loss ratios must be >= 0")
        if self.iterations < 0 or self.eval_every < 1:
            raise ValueError("iterations must be >= 0 and eval_every >= 1")


@dataclass
class FixMatchBreakdown:
    loss_s: torch.Tensor
    loss_u: torch.Tensor
    loss_ssl: torch.Tensor
    total: torch.Tensor
    ssl_losses: torch.Tensor
    gates: torch.Tensor
    mask: torch.Tensor


# augmentation ------------------------------------------------------------------

def strong_augment(image: torch.Tensor, rng: np.random.Generator) -> torch.Tensor:
    """Weak view plus colour jitter, random grayscale and a 16px cutout."""
    x = random_crop_flip(image, rng)
    b, c, s = rng.uniform(0.6, 1.4, size=3)
    x = x * b
    mean = x.mean()
    x = (x - mean) * c + mean
    gray = (0.299 * x[0] + 0.587 * x[1] + 0.114 * x[2]).unsqueeze(0)
    x = (x - gray) * s + gray
    if rng.random() < 0.2:
        x = gray.expand_as(x).clone()
    x = x.clamp(0, 1)
    _, h, w = x.shape
    cy, cx = int(rng.integers(h)), int(rng.integers(w))
    half = 8
    x[:, max(0, cy - half):cy + half, max(0, cx - half):cx + half] = 0.5
    return x


class _Stream:
    """Endless reshuffled index batches; randomness keyed on (seed, tag, iteration)."""

    def __init__(self, n: int, batch: int, seed: int, tag: int):
        if n == 0:
            raise ValueError("empty split")
        self.n, self.batch, self.seed, self.tag = n, batch, seed, tag
        self.perm = np.zeros(0, dtype=np.int64)
        self.round = 0

    def next(self) -> np.ndarray:
        while len(self.perm) < self.batch:
            rng = np.random.default_rng([self.seed, self.tag, self.round])
            self.perm = np.concatenate([self.perm, rng.permutation(self.n)])
            self.round += 1
        out, self.perm = self.perm[:self.batch], self.perm[self.batch:]
        return out


def labeled_batch(split: DatasetSplit, idx, tasks, seed: int, k: int):
    xw, xs, ys, ps = [], [], [], []
    for i in idx:
        rng = sample_rng(seed, k, int(i))
        weak = random_crop_flip(to_tensor(split.images[i]), rng)
        sample = transform_sample(weak, int(split.labels[i]), tasks, rng)
        xw.append(weak)
        xs.append(sample.image)
        ys.append(sample.class_label)
        ps.append(sample.label_values())
    return torch.stack(xw), torch.tensor(ys), torch.stack(xs), torch.tensor(ps)


def unlabeled_batch(split: DatasetSplit, idx, tasks, seed: int, k: int):
    uw, us, ussl, ps = [], [], [], []
    for i in idx:
        rng = sample_rng(seed + 1, k, int(i))
        img = to_tensor(split.images[i])
        weak = random_crop_flip(img, rng)
        sample = transform_sample(weak, 0, tasks, rng)
        uw.append(weak)
        us.append(strong_augment(img, rng))
        ussl.append(sample.image)
        ps.append(sample.label_values())
    return torch.stack(uw), torch.stack(us), torch.stack(ussl), torch.tensor(ps)


# loss ----------------------------------------------------------------------------

def masked_unlabeled_loss(weak_logits: torch.Tensor, strong_logits: torch.Tensor, tau: float):
    """Pseudo-label cross-entropy on confident samples; returns ``(loss, mask)``.

    Pseudo-labels come from the detached weak logits.  The loss is averaged
    over the whole unlabeled batch, so masked samples count as exact zeros.
    """
    probs = torch.softmax(weak_logits.detach(), dim=1)
    confidence, pseudo = probs.max(dim=1)
    mask = (confidence >= tau).to(strong_logits.dtype)
    per_sample = F.cross_entropy(strong_logits, pseudo, reduction="none")
    return (per_sample * mask).mean(), mask


def fixmatch_step(model: GatedSSLModel, labeled, unlabeled, cfg: FixMatchConfig) -> FixMatchBreakdown:
    """Loss for one iteration.

    ``labeled`` is ``(x_weak, y, x_pretext, pseudo)`` and ``unlabeled`` is
    ``(u_weak, u_strong, u_pretext, u_pseudo)``; everything goes through a
    single forward pass.
    """
    x_weak, y, x_ssl, p_l = labeled
    u_weak, u_strong, u_ssl, p_u = unlabeled
    b, ub = x_weak.shape[0], u_weak.shape[0]
    if ub != cfg.mu * b:
        raise ValueError(f"unlabeled batch ({ub}) must be mu={cfg.mu} times the labeled batch ({b})")
    out = model(torch.cat([x_weak, x_ssl, u_weak, u_strong, u_ssl]))
    bounds = np.cumsum([0, b, b, ub, ub, ub])
    part = lambda t, j: t[bounds[j]:bounds[j + 1]]

    loss_s = cross_entropy(part(out.logits, 0), y)
    loss_u, mask = masked_unlabeled_loss(part(out.logits, 2), part(out.logits, 3), cfg.tau)
    ssl_rows = lambda t: torch.cat([part(t, 1), part(t, 4)])
    loss_ssl, per_task = gated_ssl_loss([ssl_rows(lg) for lg in out.ssl_logits],
                                        torch.cat([p_l, p_u]), ssl_rows(out.gates))
    total = loss_s + cfg.lambda_u * loss_u + cfg.lambda_ssl * loss_ssl
    return FixMatchBreakdown(loss_s, loss_u, loss_ssl, total, per_task, ssl_rows(out.gates), mask)


# training --------------------------------------------------------------------------

def semisup_header(tasks) -> list[str]:
    names = [t.value for t in tasks]
    return (["iteration", "lr", "loss_total", "loss_s", "loss_u", "loss_ssl", "mask_rate"]
            + [f"loss_ssl_{n}" for n in names] + [f"gate_{n}" for n in names] + ["val_acc"])


@torch.no_grad()
def _ema_update(ema: GatedSSLModel, model: GatedSSLModel, decay: float):
    for pe, pm in zip(ema.parameters(), model.parameters()):
        pe.mul_(decay).add_(pm.detach(), alpha=1 - decay)
    for be, bm in zip(ema.buffers(), model.buffers()):
        be.copy_(bm)


def train_semisup(cfg: TrainConfig, fm: FixMatchConfig, labeled: DatasetSplit, unlabeled: DatasetSplit,
                  val_split: DatasetSplit | None, model: GatedSSLModel, out_dir=None):
    """Iteration-based FixMatch loop with the cosine decay ``lr * cos(7 pi k / 16 K)``.

    Returns ``(model, rows)`` where ``rows`` are the logged metric dicts; with
    ``fm.ema`` the returned model is the EMA copy.
    """
    cfg.validate()
    fm.validate()
    seed_everything(cfg.seed, cfg.deterministic)
    optimizer = make_optimizer(model, cfg)
    ema = copy.deepcopy(model) if fm.ema else None
    lab_stream = _Stream(len(labeled), cfg.batch_size, cfg.seed, 0)
    unl_stream = _Stream(len(unlabeled), cfg.batch_size * fm.mu, cfg.seed, 1)
    out_dir = Path(out_dir) if out_dir else None
    header = semisup_header(model.tasks)
    if out_dir:
        out_dir.mkdir(parents=True, exist_ok=True)
        with open(out_dir / "metrics.csv", "w", newline="") as fh:
            csv.writer(fh).writerow(header)
    rows, best = [], -1.0
    t = model.num_tasks
    acc = torch.zeros(5 + 2 * t, dtype=torch.float64)
    count = 0
    model.train()
    for k in range(fm.iterations):
        lr = fixmatch_lr(cfg.lr, k, fm.iterations)
        set_lr(optimizer, lr)
        lb = labeled_batch(labeled, lab_stream.next(), model.tasks, cfg.seed, k)
        ub = unlabeled_batch(unlabeled, unl_stream.next(), model.tasks, cfg.seed, k)
        parts = fixmatch_step(model, lb, ub, fm)
        if not torch.isfinite(parts.total):
            raise TrainingError(f"non-finite loss {parts.total.item()} at iteration {k}")
        optimizer.zero_grad(set_to_none=True)
        parts.total.backward()
        optimizer.step()
        if ema is not None:
            _ema_update(ema, model, fm.ema_decay)
        acc += torch.cat([torch.stack([parts.total, parts.loss_s, parts.loss_u, parts.loss_ssl,
                                       parts.mask.mean()]).detach().double(),
                          parts.ssl_losses.detach().double(), parts.gates.detach().double().mean(0)])
        count += 1
        if (k + 1) % fm.eval_every == 0 or k + 1 == fm.iterations:
            eval_model = ema if ema is not None else model
            val_acc = evaluate(eval_model, val_split, cfg.eval_batch_size) if val_split is not None else float("nan")
            means = (acc / count).tolist()
            row = dict(zip(header, [k + 1, lr] + means + [val_acc]))
            rows.append(row)
            log.info("iter %d lr %.5g loss %.4f mask %.3f val_acc %.4f", k + 1, lr, means[0], means[4], val_acc)
            acc.zero_()
            count = 0
            if out_dir:
                with open(out_dir / "metrics.csv", "a", newline="") as fh:
                    csv.writer(fh).writerow([row[h] if h == "iteration" else repr(float(row[h])) for h in header])
                save_checkpoint(eval_model, out_dir / "last.pt", fm.lambda_ssl, iteration=k + 1)
                if val_acc > best:
                    best = val_acc
                    save_checkpoint(eval_model, out_dir / "best.pt", fm.lambda_ssl, iteration=k + 1)
            model.train()
    return (ema if ema is not None else model), rows
