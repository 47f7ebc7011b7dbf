"""L-infinity PGD attacks, adversarial training and robust evaluation."""

from __future__ import annotations

from dataclasses import dataclass
from fractions import Fraction
from typing import Mapping

import torch
import torch.nn.functional as F
from torch.utils.data import DataLoader

from .datasets import DatasetSplit, ImageDataset
from .gatenet import GatedSSLModel
from .train import TrainConfig, train_supervised


def parse_fraction(text) -> float:
    """``"8/255"`` or ``"0.3/255"`` -> the exact quotient rounded once to the nearest float."""
    if isinstance(text, (int, float)):
        return float(text)
    num, slash, den = str(text).strip().partition("/")
    value = Fraction(num.strip()) / Fraction(den.strip()) if slash else Fraction(num.strip())
    return float(value)


@dataclass
class PGDConfig:
    epsilon: float = 8 / 255
    alpha: float = 2 / 255
    steps: int = 10
    random_start: bool = True

    def validate(self):
        if not self.epsilon > 0:
            raise ValueError("epsilon must be > 0")
        if not self.alpha > 0:
            raise ValueError("alpha must be > 0")
        if self.steps < 0:
            raise ValueError("steps must be >= 0")


TRAIN_PGD = PGDConfig(8 / 255, 2 / 255, 10, True)
EVAL_PGD = {
    "pgd20": PGDConfig(8 / 255, 2 / 255, 20, False),
    "pgd100": PGDConfig(8 / 255, 0.3 / 255, 100, False),
}


def class_logits(model, x: torch.Tensor) -> torch.Tensor:
    if isinstance(model, GatedSSLModel):
        return model.classify(x)
    return model(x)


def pgd_attack(model, images: torch.Tensor, labels: torch.Tensor, cfg: PGDConfig,
               generator: torch.Generator | None = None) -> torch.Tensor:
    """Maximise the classifier cross-entropy inside the eps-ball around ``images``.

    Each step moves by ``alpha * sign(grad)``, projects onto the ball and clips
    to [0, 1].  The model is put in eval mode while attacking.  With
    ``steps == 0`` the input is returned unchanged (no random start either).
    """
    cfg.validate()
    x0 = images.detach()
    if cfg.steps == 0:
        return x0.clone()
    was_training = getattr(model, "training", False)
    model.eval()
    lo, hi = x0 - cfg.epsilon, x0 + cfg.epsilon
    x = x0.clone()
    if cfg.random_start:
        noise = torch.rand(x0.shape, generator=generator, dtype=x0.dtype) * (2 * cfg.epsilon) - cfg.epsilon
        x = (x0 + noise.to(x0.device)).clamp_(0, 1)
    try:
        for _ in range(cfg.steps):
            x.requires_grad_(True)
            loss = F.cross_entropy(class_logits(model, x), labels)
            (grad,) = torch.autograd.grad(loss, x)
            if not torch.isfinite(grad).all():
                raise FloatingPointError("non-finite input gradient during PGD")
            x = x.detach() + cfg.alpha * grad.sign()
            x = torch.max(torch.min(x, hi), lo).clamp_(0, 1)
    finally:
        model.train(was_training)
    return x.detach()


def adversarial_train(cfg: TrainConfig, pgd_cfg: PGDConfig, train_split: DatasetSplit,
                      val_split: DatasetSplit | None, model: GatedSSLModel, out_dir=None, **kwargs):
    """Train on PGD adversaries of the pretext-transformed batches."""
    pgd_cfg.validate()
    gen = torch.Generator().manual_seed(cfg.seed + 7919)

    def perturb(m, images, labels):
        return pgd_attack(m, images, labels, pgd_cfg, gen)

    return train_supervised(cfg, train_split, val_split, model, out_dir=out_dir, perturb=perturb, **kwargs)


def evaluate_robust(model, split: DatasetSplit, configs: Mapping[str, PGDConfig],
                    batch_size: int = 256, seed: int = 0) -> dict[str, float]:
    """Clean accuracy plus accuracy under each attack (attacks made against ``model``)."""
    gen = torch.Generator().manual_seed(seed)
    correct = {"clean": 0, **{name: 0 for name in configs}}
    model.eval()
    for images, labels in DataLoader(ImageDataset(split), batch_size=batch_size):
        with torch.no_grad():
            correct["clean"] += (class_logits(model, images).argmax(1) == labels).sum().item()
        for name, cfg in configs.items():
            adv = pgd_attack(model, images, labels, cfg, gen)
            with torch.no_grad():
                correct[name] += (class_logits(model, adv).argmax(1) == labels).sum().item()
    n = max(len(split), 1)
    return {k: v / n for k, v in correct.items()}
