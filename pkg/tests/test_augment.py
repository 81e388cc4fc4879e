"""
Tests for weak/strong intensity augmentation.
"""

import pytest
import torch

from probadapt.augment import (
    AugmentationSpec, Strength, augment, gaussian_blur, gaussian_kernel_1d,
    strong_augment, weak_augment,
)
from probadapt.errors import ConfigError


def _images(n=4, size=16, seed=0):
    return torch.rand(n, 1, size, size, generator=torch.Generator().manual_seed(seed))


def test_zero_probability_is_identity():
    x = _images()
    spec = AugmentationSpec(apply_probability=0.0)
    out = augment(x, spec, torch.Generator().manual_seed(0))
    assert torch.equal(out, x)


def test_same_seed_same_output():
    x = _images()
    a = strong_augment(x, torch.Generator().manual_seed(5))
    b = strong_augment(x, torch.Generator().manual_seed(5))
    assert torch.equal(a, b)


def test_different_seed_different_output():
    x = _images()
    spec = AugmentationSpec.strong()
    spec.apply_probability = 1.0
    a = augment(x, spec, torch.Generator().manual_seed(1))
    b = augment(x, spec, torch.Generator().manual_seed(2))
    assert not torch.equal(a, b)


def test_degenerate_ranges_are_identity():
    """Blur sigma 0, noise sigma 0 and contrast 1 leave the image unchanged."""
    x = _images()
    spec = AugmentationSpec(
        strength=Strength.STRONG, apply_probability=1.0,
        blur_sigma_range=(0.0, 0.0), noise_sigma_range=(0.0, 0.0), contrast_range=(1.0, 1.0),
    )
    out = augment(x, spec, torch.Generator().manual_seed(0))
    assert torch.allclose(out, x, atol=1e-6)


def test_augmentation_keeps_pixel_positions():
    ramp = torch.linspace(0.0, 1.0, 16).repeat(2, 1, 16, 1)
    spec = AugmentationSpec.strong()
    spec.apply_probability = 1.0
    spec.blur_sigma_range = (0.0, 0.0)
    spec.noise_sigma_range = (0.0, 0.0)
    out = augment(ramp, spec, torch.Generator().manual_seed(3))
    assert torch.all(out[..., 1:] >= out[..., :-1])
    assert torch.allclose(out[..., :1, :], out)


def test_output_is_clamped():
    x = _images()
    spec = AugmentationSpec(apply_probability=1.0, noise_sigma_range=(2.0, 2.0))
    out = augment(x, spec, torch.Generator().manual_seed(0))
    assert out.min() >= 0.0 and out.max() <= 1.0


def test_shapes_and_dtype_preserved():
    x = _images()
    out = strong_augment(x, torch.Generator().manual_seed(0))
    assert out.shape == x.shape and out.dtype == x.dtype
    single = weak_augment(x[0], torch.Generator().manual_seed(0))
    assert single.shape == x[0].shape


def test_input_is_not_modified_and_detached():
    x = _images().requires_grad_(True)
    before = x.detach().clone()
    out = strong_augment(x, torch.Generator().manual_seed(0))
    assert torch.equal(x.detach(), before)
    assert not out.requires_grad


def test_strong_changes_more_than_weak():
    x = _images(n=100, seed=3)
    weak = weak_augment(x, torch.Generator().manual_seed(0))
    strong = strong_augment(x, torch.Generator().manual_seed(0))
    assert (strong - x).abs().mean() > (weak - x).abs().mean()


def test_each_image_draws_its_own_parameters():
    x = _images(n=1).expand(8, -1, -1, -1).contiguous()
    spec = AugmentationSpec(apply_probability=1.0)
    out = augment(x, spec, torch.Generator().manual_seed(0))
    assert not torch.equal(out[0], out[1])


# -- blur -------------------------------------------------------------------------

def test_kernel_normalized():
    for sigma in (0.5, 1.0, 2.7):
        k = gaussian_kernel_1d(sigma, dtype=torch.float64)
        assert k.numel() % 2 == 1
        assert k.sum().item() == pytest.approx(1.0)
        assert torch.equal(k, k.flip(0))


def test_blur_keeps_constant_image():
    x = torch.full((1, 12, 12), 0.3)
    assert torch.allclose(gaussian_blur(x, 2.0), x, atol=1e-6)


def test_blur_small_sigma_is_identity():
    x = _images(n=1)[0]
    assert torch.equal(gaussian_blur(x, 0.0), x)


def test_blur_smooths_and_keeps_mean_of_interior_impulse():
    x = torch.zeros(1, 21, 21)
    x[0, 10, 10] = 1.0
    out = gaussian_blur(x, 1.0)
    assert out[0, 10, 10] < 1.0
    assert out.sum().item() == pytest.approx(1.0, abs=1e-5)


def test_blur_larger_than_image():
    x = _images(n=1, size=4)[0]
    out = gaussian_blur(x, 3.0)
    assert out.shape == x.shape
    assert torch.isfinite(out).all()


# -- spec -------------------------------------------------------------------------

def test_presets():
    weak, strong = AugmentationSpec.weak(), AugmentationSpec.strong()
    assert weak.apply_probability == 0.25 and weak.contrast_range is None
    assert strong.apply_probability == 0.5 and strong.contrast_range == (0.6, 1.4)


def test_from_dict_fills_from_strength():
    spec = AugmentationSpec.from_dict({"strength": "strong", "apply_probability": 0.9})
    assert spec.apply_probability == 0.9
    assert spec.contrast_range == (0.6, 1.4)
    assert AugmentationSpec.from_dict(spec.to_dict()) == spec


def test_validation_errors():
    with pytest.raises(ConfigError):
        AugmentationSpec(apply_probability=1.5).validate()
    with pytest.raises(ConfigError):
        AugmentationSpec(blur_sigma_range=(2.0, 1.0)).validate()
    with pytest.raises(ConfigError):
        AugmentationSpec(noise_sigma_range=(-0.1, 0.1)).validate()
    with pytest.raises(ConfigError, match="Unknown"):
        AugmentationSpec.from_dict({"rotation": 90})
