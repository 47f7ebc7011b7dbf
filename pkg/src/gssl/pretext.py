"""Quadrant-local pretext transformations and their pseudo-label codecs.

Every transform works on a single ``(C, H, W)`` tensor and only touches the
pixels of one quadrant.  Quadrants are numbered row-major::

    0 | 1
    --+--
    2 | 3

with boundaries at ``H // 2`` and ``W // 2``.
"""

from __future__ import annotations

import enum
import itertools
from dataclasses import dataclass
from typing import Sequence

import numpy as np
import torch


class PretextTask(enum.Enum):
    """Transformation families, in the fixed order they are applied."""

    LOROT_E = "lorot"
    FLIP = "flip"
    CHANNEL_PERM = "channel"
    # whole-image rotation baseline, not one of the gated tasks
    ROTATION = "rotation"

    @property
    def num_classes(self) -> int:
        return _NUM_CLASSES[self]

    @classmethod
    def parse(cls, name: str) -> "PretextTask":
        key = name.strip().lower()
        for task in cls:
            if key in (task.value, task.name.lower()):
                return task
        raise ValueError(f"unknown pretext task {name!r}")


_NUM_CLASSES = {
    PretextTask.LOROT_E: 16,
    PretextTask.FLIP: 2,
    PretextTask.CHANNEL_PERM: 6,
    PretextTask.ROTATION: 4,
}

_ORDER = {task: i for i, task in enumerate(PretextTask)}

# lexicographic order over (R, G, B); entry j is the source channel of output channel j
CHANNEL_PERMUTATIONS: tuple[tuple[int, int, int], ...] = tuple(itertools.permutations(range(3)))


@dataclass(frozen=True)
class PseudoLabel:
    task: PretextTask
    value: int

    def __post_init__(self):
        if not 0 <= self.value < self.task.num_classes:
            raise ValueError(
                f"pseudo-label {self.value} out of range for {self.task.value} "
                f"({self.task.num_classes} classes)"
            )


@dataclass
class TransformedSample:
    image: torch.Tensor
    class_label: int
    pseudo_labels: tuple[PseudoLabel, ...]

    def label_values(self) -> list[int]:
        return [p.value for p in self.pseudo_labels]


def parse_tasks(spec: str | Sequence[str | PretextTask]) -> list[PretextTask]:
    """Parse ``"lorot,flip"`` (or a list) into tasks in application order."""
    if isinstance(spec, str):
        spec = [s for s in spec.split(",") if s.strip()]
    tasks = [t if isinstance(t, PretextTask) else PretextTask.parse(t) for t in spec]
    return canonical_order(tasks)


def canonical_order(tasks: Sequence[PretextTask]) -> list[PretextTask]:
    if not tasks:
        raise ValueError("at least one pretext task must be enabled")
    if len(set(tasks)) != len(tasks):
        raise ValueError(f"duplicate pretext tasks in {[t.value for t in tasks]}")
    return sorted(tasks, key=_ORDER.__getitem__)


def quadrant_bounds(height: int, width: int, quadrant: int) -> tuple[slice, slice]:
    """Row and column slices of ``quadrant`` for an ``height x width`` grid."""
    if height < 2 or width < 2:
        raise ValueError(f"image must be at least 2x2 to split into quadrants, got {height}x{width}")
    if quadrant not in (0, 1, 2, 3):
        raise ValueError(f"quadrant must be in 0..3, got {quadrant}")
    h2, w2 = height // 2, width // 2
    rows = slice(0, h2) if quadrant < 2 else slice(h2, height)
    cols = slice(0, w2) if quadrant % 2 == 0 else slice(w2, width)
    return rows, cols


def _check_image(image: torch.Tensor):
    if image.dim() != 3:
        raise ValueError(f"expected a (C, H, W) image, got shape {tuple(image.shape)}")


def _fit_center(x: torch.Tensor, height: int, width: int) -> torch.Tensor:
    # center-crop or zero-pad the last two dims to (height, width)
    out = x.new_zeros(x.shape[0], height, width)
    src_h, src_w = x.shape[1], x.shape[2]
    ch, cw = min(height, src_h), min(width, src_w)
    sy, sx = (src_h - ch) // 2, (src_w - cw) // 2
    dy, dx = (height - ch) // 2, (width - cw) // 2
    out[:, dy:dy + ch, dx:dx + cw] = x[:, sy:sy + ch, sx:sx + cw]
    return out


def rotate_region(region: torch.Tensor, rotation: int) -> torch.Tensor:
    """Rotate a ``(C, h, w)`` block counter-clockwise by ``90 * rotation`` degrees.

    Non-square blocks rotated by an odd multiple of 90 degrees are center
    cropped / zero padded back to ``(h, w)``.
    """
    rotated = torch.rot90(region, rotation % 4, dims=(1, 2))
    if rotated.shape != region.shape:
        rotated = _fit_center(rotated, region.shape[1], region.shape[2])
    return rotated


def apply_lorot_e(image: torch.Tensor, quadrant: int, rotation: int) -> tuple[torch.Tensor, PseudoLabel]:
    """Rotate one quadrant; the label is ``4 * quadrant + rotation``."""
    _check_image(image)
    if rotation not in (0, 1, 2, 3):
        raise ValueError(f"rotation must be in 0..3, got {rotation}")
    rows, cols = quadrant_bounds(image.shape[1], image.shape[2], quadrant)
    out = image.clone()
    if rotation:
        out[:, rows, cols] = rotate_region(image[:, rows, cols], rotation)
    return out, PseudoLabel(PretextTask.LOROT_E, 4 * quadrant + rotation)


def apply_flip(image: torch.Tensor, quadrant: int, do_flip: bool) -> tuple[torch.Tensor, PseudoLabel]:
    """Mirror one quadrant left-right; label 1 if flipped."""
    _check_image(image)
    rows, cols = quadrant_bounds(image.shape[1], image.shape[2], quadrant)
    out = image.clone()
    if do_flip:
        out[:, rows, cols] = torch.flip(image[:, rows, cols], dims=(2,))
    return out, PseudoLabel(PretextTask.FLIP, int(bool(do_flip)))


def apply_channel_perm(image: torch.Tensor, quadrant: int, perm_index: int) -> tuple[torch.Tensor, PseudoLabel]:
    _check_image(image)
    if image.shape[0] != 3:
        raise ValueError(f"channel permutation needs a 3-channel image, got {image.shape[0]} channels")
    if not 0 <= perm_index < len(CHANNEL_PERMUTATIONS):
        raise ValueError(f"perm_index must be in 0..5, got {perm_index}")
    rows, cols = quadrant_bounds(image.shape[1], image.shape[2], quadrant)
    out = image.clone()
    if perm_index:
        perm = list(CHANNEL_PERMUTATIONS[perm_index])
        out[:, rows, cols] = image[perm][:, rows, cols]
    return out, PseudoLabel(PretextTask.CHANNEL_PERM, perm_index)


def apply_rotation(image: torch.Tensor, rotation: int) -> tuple[torch.Tensor, PseudoLabel]:
    """Whole-image rotation (the classic 4-way rotation pretext task)."""
    _check_image(image)
    if rotation not in (0, 1, 2, 3):
        raise ValueError(f"rotation must be in 0..3, got {rotation}")
    return rotate_region(image, rotation), PseudoLabel(PretextTask.ROTATION, rotation)


def apply_task(image: torch.Tensor, task: PretextTask, quadrant: int, param: int) -> tuple[torch.Tensor, PseudoLabel]:
    if task is PretextTask.LOROT_E:
        return apply_lorot_e(image, quadrant, param)
    if task is PretextTask.FLIP:
        return apply_flip(image, quadrant, bool(param))
    if task is PretextTask.CHANNEL_PERM:
        return apply_channel_perm(image, quadrant, param)
    return apply_rotation(image, param)


def _param_space(task: PretextTask) -> int:
    return 4 if task is PretextTask.LOROT_E else task.num_classes


def transform_sample(
    image: torch.Tensor,
    class_label: int,
    tasks: Sequence[PretextTask],
    rng: np.random.Generator,
    prob: float = 1.0,
) -> TransformedSample:
    """Apply every enabled task to ``image`` in canonical order.

    Each task draws its own quadrant and parameter from ``rng``.  With
    probability ``1 - prob`` a task falls back to its identity parameter
    (the quadrant is still drawn, so the rng stream does not depend on the
    coin flips).
    """
    out = image
    labels = []
    for task in canonical_order(list(tasks)):
        quadrant = int(rng.integers(4))
        param = int(rng.integers(_param_space(task)))
        if rng.random() >= prob:
            param = 0
        out, label = apply_task(out, task, quadrant, param)
        labels.append(label)
    return TransformedSample(out, int(class_label), tuple(labels))
