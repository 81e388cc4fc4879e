"""
Weak and strong intensity augmentations for the teacher and student inputs.

Both pipelines are intensity-only, so pseudo-labels computed on the teacher view
stay aligned pixel-for-pixel with the student view:
- weak: gaussian blur + additive gaussian noise, each applied with p=0.25
- strong: same transforms from wider ranges plus random contrast, each with p=0.5

All randomness comes from the torch.Generator passed by the caller, and every
image in a batch draws its own parameters in batch order.
"""

import math
from dataclasses import dataclass, asdict
from enum import Enum
from typing import Optional, Tuple

import torch
import torch.nn.functional as F

from .errors import ConfigError


class Strength(str, Enum):
    WEAK = "weak"
    STRONG = "strong"


Range = Tuple[float, float]


@dataclass
class AugmentationSpec:
    """Parameters of one augmentation pipeline."""
    strength: Strength = Strength.WEAK
    apply_probability: float = 0.25
    blur_sigma_range: Range = (0.5, 1.5)
    noise_sigma_range: Range = (0.01, 0.05)
    contrast_range: Optional[Range] = None  # strong only

    @classmethod
    def weak(cls) -> "AugmentationSpec":
        return cls()

    @classmethod
    def strong(cls) -> "AugmentationSpec":
        return cls(
            strength=Strength.STRONG,
            apply_probability=0.5,
            blur_sigma_range=(0.5, 3.0),
            noise_sigma_range=(0.02, 0.1),
            contrast_range=(0.6, 1.4),
        )

    def validate(self) -> None:
        if not 0.0 <= self.apply_probability <= 1.0:
            raise ConfigError(
                f"apply_probability must be in [0, 1], got {self.apply_probability}"
            )
        ranges = {
            "blur_sigma_range": self.blur_sigma_range,
            "noise_sigma_range": self.noise_sigma_range,
        }
        if self.contrast_range is not None:
            ranges["contrast_range"] = self.contrast_range
        for name, (low, high) in ranges.items():
            if low < 0 or high < low:
                raise ConfigError(f"{name} must satisfy 0 <= low <= high, got ({low}, {high})")

    def to_dict(self) -> dict:
        data = asdict(self)
        data["strength"] = self.strength.value
        for key in ("blur_sigma_range", "noise_sigma_range", "contrast_range"):
            if data[key] is not None:
                data[key] = list(data[key])
        return data

    @classmethod
    def from_dict(cls, data: dict) -> "AugmentationSpec":
        unknown = set(data) - set(cls.__dataclass_fields__)
        if unknown:
            raise ConfigError(f"Unknown augmentation keys: {', '.join(sorted(unknown))}")
        base = cls.strong() if data.get("strength") == Strength.STRONG.value else cls.weak()
        values = base.to_dict()
        values.update(data)
        spec = cls(
            strength=Strength(values["strength"]),
            apply_probability=float(values["apply_probability"]),
            blur_sigma_range=tuple(values["blur_sigma_range"]),
            noise_sigma_range=tuple(values["noise_sigma_range"]),
            contrast_range=(
                tuple(values["contrast_range"]) if values["contrast_range"] is not None else None
            ),
        )
        spec.validate()
        return spec


def gaussian_kernel_1d(sigma: float, dtype=torch.float32) -> torch.Tensor:
    """Normalized 1-D gaussian kernel with radius ceil(3 sigma)."""
    radius = int(math.ceil(3.0 * sigma))
    if radius == 0 or sigma <= 0:
        return torch.ones(1, dtype=dtype)
    x = torch.arange(-radius, radius + 1, dtype=torch.float64)
    kernel = torch.exp(-0.5 * (x / sigma) ** 2)
    return (kernel / kernel.sum()).to(dtype)


def gaussian_blur(image: torch.Tensor, sigma: float) -> torch.Tensor:
    """Separable gaussian blur of a (C, H, W) image with reflect padding."""
    kernel = gaussian_kernel_1d(sigma, dtype=image.dtype)
    radius = kernel.numel() // 2
    if radius == 0:
        return image.clone()
    # reflect padding needs the pad to be smaller than the image side
    radius_h = min(radius, image.shape[-2] - 1)
    radius_w = min(radius, image.shape[-1] - 1)
    kernel_h = kernel[radius - radius_h: radius + radius_h + 1]
    kernel_w = kernel[radius - radius_w: radius + radius_w + 1]
    kernel_h = kernel_h / kernel_h.sum()
    kernel_w = kernel_w / kernel_w.sum()

    x = image.unsqueeze(1)  # (C, 1, H, W)
    x = F.pad(x, (radius_w, radius_w, 0, 0), mode="reflect")
    x = F.conv2d(x, kernel_w.view(1, 1, 1, -1))
    x = F.pad(x, (0, 0, radius_h, radius_h), mode="reflect")
    x = F.conv2d(x, kernel_h.view(1, 1, -1, 1))
    return x.squeeze(1)


def _uniform(low: float, high: float, generator: torch.Generator) -> float:
    u = torch.rand((), generator=generator, dtype=torch.float64).item()
    return low + (high - low) * u


def _coin(probability: float, generator: torch.Generator) -> bool:
    # always consume one draw so the stream stays aligned across configs
    u = torch.rand((), generator=generator, dtype=torch.float64).item()
    return u < probability


def augment_image(image: torch.Tensor, spec: AugmentationSpec, generator: torch.Generator) -> torch.Tensor:
    """Augment one (C, H, W) image."""
    out = image
    changed = False

    if _coin(spec.apply_probability, generator):
        sigma = _uniform(*spec.blur_sigma_range, generator)
        out = gaussian_blur(out, sigma)
        changed = True

    if _coin(spec.apply_probability, generator):
        sigma = _uniform(*spec.noise_sigma_range, generator)
        noise = torch.randn(out.shape, generator=generator, dtype=out.dtype)
        out = out + sigma * noise
        changed = True

    if spec.contrast_range is not None and _coin(spec.apply_probability, generator):
        gamma = _uniform(*spec.contrast_range, generator)
        out = gamma * (out - 0.5) + 0.5
        changed = True

    if not changed:
        return image.clone()
    return out.clamp(0.0, 1.0)


def augment(images: torch.Tensor, spec: AugmentationSpec, generator: torch.Generator) -> torch.Tensor:
    """
    Augment a batch (B, C, H, W) or a single image (C, H, W).

    Augmentation is never differentiated through; inputs are detached.
    """
    images = images.detach()
    if images.dim() == 3:
        return augment_image(images, spec, generator)
    return torch.stack([augment_image(img, spec, generator) for img in images])


def weak_augment(images: torch.Tensor, generator: torch.Generator,
                 spec: Optional[AugmentationSpec] = None) -> torch.Tensor:
    """Teacher-side (and MeanTeacher student-side) augmentation."""
    return augment(images, spec or AugmentationSpec.weak(), generator)


def strong_augment(images: torch.Tensor, generator: torch.Generator,
                   spec: Optional[AugmentationSpec] = None) -> torch.Tensor:
    """FixMatch student-side augmentation."""
    return augment(images, spec or AugmentationSpec.strong(), generator)
