"""Weak (identity) and strong (SimSiam-style) views of an image batch."""

from __future__ import annotations

import math
from dataclasses import dataclass, field, replace

import numpy as np
import torch
import torchvision.transforms.functional as TF

from .data import ImageBatch

STRONG_OPS = ("random_resized_crop", "horizontal_flip", "color_jitter", "gaussian_blur",
              "random_scaling", "random_perspective")


@dataclass(frozen=True)
class StrongParams:
    crop_scale: tuple[float, float] = (0.2, 1.0)
    crop_ratio: tuple[float, float] = (3 / 4, 4 / 3)
    flip_p: float = 0.5
    jitter_p: float = 0.8
    brightness: float = 0.4
    contrast: float = 0.4
    saturation: float = 0.4
    hue: float = 0.1
    blur_p: float = 0.5
    blur_sigma: tuple[float, float] = (0.1, 2.0)
    scale_range: tuple[float, float] = (0.8, 1.2)
    perspective_p: float = 0.5
    distortion: float = 0.2

    @classmethod
    def identity(cls) -> "StrongParams":
        return cls(crop_scale=(1.0, 1.0), crop_ratio=(1.0, 1.0), flip_p=0.0, brightness=0.0,
                   contrast=0.0, saturation=0.0, hue=0.0, blur_sigma=(0.0, 0.0),
                   scale_range=(1.0, 1.0), distortion=0.0)


@dataclass(frozen=True)
class AugmentationPipeline:
    ops: tuple[str, ...]
    params: StrongParams = field(default_factory=StrongParams)
    seed: int = 0

    @property
    def is_identity(self) -> bool:
        return not self.ops


def weak_pipeline() -> AugmentationPipeline:
    return AugmentationPipeline(ops=())


def strong_pipeline(seed: int = 0, **overrides) -> AugmentationPipeline:
    return AugmentationPipeline(STRONG_OPS, replace(StrongParams(), **overrides), seed)


def weak_augment(batch: ImageBatch) -> ImageBatch:
    return batch


def _crop_box(rng: np.random.Generator, H: int, W: int, scale, ratio) -> tuple[int, int, int, int]:
    area = H * W
    log_ratio = (math.log(ratio[0]), math.log(ratio[1]))
    for _ in range(10):
        target = area * rng.uniform(*scale)
        aspect = math.exp(rng.uniform(*log_ratio))
        w = int(round(math.sqrt(target * aspect)))
        h = int(round(math.sqrt(target / aspect)))
        if 0 < w <= W and 0 < h <= H:
            top = int(rng.integers(0, H - h + 1))
            left = int(rng.integers(0, W - w + 1))
            return top, left, h, w
    return 0, 0, H, W


def _perspective_points(rng: np.random.Generator, H: int, W: int, d: float):
    hw, hh = int(d * W / 2), int(d * H / 2)
    tl = [int(rng.integers(0, hw + 1)), int(rng.integers(0, hh + 1))]
    tr = [W - 1 - int(rng.integers(0, hw + 1)), int(rng.integers(0, hh + 1))]
    br = [W - 1 - int(rng.integers(0, hw + 1)), H - 1 - int(rng.integers(0, hh + 1))]
    bl = [int(rng.integers(0, hw + 1)), H - 1 - int(rng.integers(0, hh + 1))]
    start = [[0, 0], [W - 1, 0], [W - 1, H - 1], [0, H - 1]]
    return start, [tl, tr, br, bl]


def augment_image(img: torch.Tensor, rng: np.random.Generator, p: StrongParams) -> torch.Tensor:
    """Apply the strong ops to one [C, H, W] image; identity-valued draws are skipped."""
    C, H, W = img.shape
    top, left, h, w = _crop_box(rng, H, W, p.crop_scale, p.crop_ratio)
    if (top, left, h, w) != (0, 0, H, W):
        img = TF.resized_crop(img, top, left, h, w, [H, W], antialias=True)

    if rng.random() < p.flip_p:
        img = TF.hflip(img)

    if rng.random() < p.jitter_p:
        for op in rng.permutation(4):
            if op == 0 and p.brightness > 0:
                img = TF.adjust_brightness(img, rng.uniform(1 - p.brightness, 1 + p.brightness))
            elif op == 1 and p.contrast > 0:
                img = TF.adjust_contrast(img, rng.uniform(1 - p.contrast, 1 + p.contrast))
            elif op == 2 and p.saturation > 0 and C == 3:
                img = TF.adjust_saturation(img, rng.uniform(1 - p.saturation, 1 + p.saturation))
            elif op == 3 and p.hue > 0 and C == 3:
                img = TF.adjust_hue(img, rng.uniform(-p.hue, p.hue))

    if rng.random() < p.blur_p and p.blur_sigma[1] > 0:
        sigma = rng.uniform(*p.blur_sigma)
        k = max(3, int(0.1 * H) // 2 * 2 + 1)
        img = TF.gaussian_blur(img, [k, k], [sigma, sigma])

    scale = rng.uniform(*p.scale_range)
    if scale != 1.0:
        img = TF.affine(img, angle=0.0, translate=[0, 0], scale=scale, shear=[0.0, 0.0],
                        interpolation=TF.InterpolationMode.BILINEAR)

    if rng.random() < p.perspective_p and p.distortion > 0:
        start, end = _perspective_points(rng, H, W, p.distortion)
        img = TF.perspective(img, start, end, interpolation=TF.InterpolationMode.BILINEAR)
    return img.clamp(0.0, 1.0)


def strong_augment(batch: ImageBatch, pipeline: AugmentationPipeline | None = None,
                   seed: int | None = None) -> ImageBatch:
    """Independently augment each image; deterministic per (seed, position in batch)."""
    pipeline = pipeline or strong_pipeline()
    if pipeline.is_identity:
        return batch
    seed = pipeline.seed if seed is None else seed
    out = []
    for i in range(batch.size):
        rng = np.random.default_rng([seed, i])
        img = batch.pixels[i].permute(2, 0, 1).float()
        out.append(augment_image(img, rng, pipeline.params).permute(1, 2, 0))
    return ImageBatch(batch.ids, torch.stack(out).to(batch.pixels.dtype))
