"""Synthetic labeled dataset: small single-channel images of parametric
shapes (disk, square, cross, stripes) with position/size/intensity jitter.

Values live in [-1, 1]; class counts are balanced to within one sample; the
whole dataset is a pure function of its seed. Deliberately easy: a linear
probe on raw pixels should exceed 0.9 accuracy, which is the sanity bar the
rest of the diagnostics build on.
"""

from __future__ import annotations

from dataclasses import dataclass

import torch
from torch import Tensor

from .archive import load_archive, save_archive
from .rng import make_generator

SHAPE_NAMES = ("disk", "square", "cross", "stripes")


@dataclass
class ShapesDataset:
    images: Tensor  # [num, 1, H, W] float32 in [-1, 1]
    labels: Tensor  # [num] int64 in [0, num_classes)
    num_classes: int

    def __post_init__(self):
        if self.images.shape[0] != self.labels.shape[0]:
            raise ValueError("images and labels disagree on sample count")


def _coords(height: int, width: int) -> tuple[Tensor, Tensor]:
    ys = torch.arange(height, dtype=torch.float32).view(-1, 1).expand(height, width)
    xs = torch.arange(width, dtype=torch.float32).view(1, -1).expand(height, width)
    return ys, xs


def _render(label: int, params: Tensor, height: int, width: int) -> Tensor:
    """One [H, W] mask image from 6 uniform draws in [0, 1)."""
    ys, xs = _coords(height, width)
    # +-1 px position jitter; size ranges keep the classes linearly separable
    cy = height / 2 - 1.0 + 2.0 * params[0]
    cx = width / 2 - 1.0 + 2.0 * params[1]
    name = SHAPE_NAMES[label]
    if name == "disk":
        radius = 3.5 + 1.0 * params[2]
        mask = ((ys - cy) ** 2 + (xs - cx) ** 2) <= radius**2
    elif name == "square":
        half = 2.0 + 0.75 * params[2]
        mask = ((ys - cy).abs() <= half) & ((xs - cx).abs() <= half)
    elif name == "cross":
        arm = 4.5 + 1.5 * params[2]
        bar = 0.8 + 0.4 * params[3]
        in_box = ((ys - cy).abs() <= arm) & ((xs - cx).abs() <= arm)
        mask = in_box & (((ys - cy).abs() <= bar) | ((xs - cx).abs() <= bar))
    elif name == "stripes":
        period = 3.0 + 2.0 * params[2]
        phase = period * params[3]
        mask = torch.remainder(xs + phase, period) < period / 2
    else:
        raise ValueError(f"no renderer for class {label}")
    intensity = 0.7 + 0.3 * params[4]
    return mask.float() * intensity


def generate_shapes(
    num: int,
    num_classes: int = 4,
    seed: int = 0,
    height: int = 16,
    width: int = 16,
    pixel_noise: float = 0.03,
) -> ShapesDataset:
    """Deterministic dataset of ``num`` jittered shapes over ``num_classes`` classes."""
    if not 2 <= num_classes <= len(SHAPE_NAMES):
        raise ValueError(f"num_classes must lie in [2, {len(SHAPE_NAMES)}]")
    if num < num_classes:
        raise ValueError("need at least one sample per class")
    g = make_generator(seed, "shapes")
    images = torch.empty(num, 1, height, width)
    labels = torch.arange(num, dtype=torch.long) % num_classes  # balanced within 1
    for i in range(num):
        params = torch.rand(6, generator=g)
        canvas = _render(int(labels[i]), params, height, width)
        canvas = 2.0 * canvas - 1.0  # background -1, foreground up to +1
        if pixel_noise > 0:
            canvas = canvas + pixel_noise * torch.randn(canvas.shape, generator=g)
        images[i, 0] = canvas.clamp(-1.0, 1.0)
    return ShapesDataset(images=images, labels=labels, num_classes=num_classes)


def save_dataset(dataset: ShapesDataset, path) -> None:
    save_archive(
        path,
        {"images": dataset.images, "labels": dataset.labels},
        metadata={"num_classes": dataset.num_classes},
    )


def load_dataset(path) -> ShapesDataset:
    tensors, metadata = load_archive(path)
    if "images" not in tensors or "labels" not in tensors:
        raise ValueError(f"{path}: dataset archive must contain 'images' and 'labels'")
    return ShapesDataset(
        images=tensors["images"].float(),
        labels=tensors["labels"].long(),
        num_classes=int(metadata["num_classes"]),
    )
