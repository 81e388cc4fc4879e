"""
Losses for PUNet training.

    L = L_rec + beta * L_var

- L_rec is the dice error (1 - dice score), optionally weighted per pixel
- L_var is KL(posterior || prior) between diagonal gaussians

Targets may be soft (teacher probabilities are used as pseudo-labels without
post-processing).
"""

from dataclasses import dataclass
from typing import Optional

import torch

from .errors import ShapeError
from .model import LatentGaussian

DICE_EPS = 1e-6


@dataclass
class LossValue:
    """A loss with its breakdown; total is the differentiable tensor."""
    total: torch.Tensor
    reconstruction: float
    variational: float = 0.0  # beta * kl
    kl: float = 0.0
    masked_fraction: float = 0.0
    skipped: bool = False

    @property
    def value(self) -> float:
        return float(self.total.detach().item())

    def as_dict(self) -> dict:
        return {
            "total": self.value,
            "reconstruction": self.reconstruction,
            "variational": self.variational,
            "kl": self.kl,
            "masked_fraction": self.masked_fraction,
            "skipped": self.skipped,
        }


def _as_bkhw(t: torch.Tensor) -> torch.Tensor:
    if t.dim() == 2:  # (H, W)
        return t[None, None]
    if t.dim() == 3:  # (K, H, W)
        return t[None]
    if t.dim() == 4:
        return t
    raise ShapeError(f"expected (H, W), (K, H, W) or (B, K, H, W), got {tuple(t.shape)}")


def dice_score(pred: torch.Tensor, target: torch.Tensor,
               pixel_weights: Optional[torch.Tensor] = None) -> torch.Tensor:
    """
    Weighted dice score averaged over classes.

    Sums run over the batch and all pixels of a class:
        2 * sum(w p t) / (sum(w p) + sum(w t) + eps)
    A class with empty prediction and empty target scores 1.

    Args:
        pred: Probabilities (B, K, H, W), (K, H, W) or (H, W)
        target: Same shape as pred, hard or soft
        pixel_weights: Optional weights in [0, 1], broadcast over classes
                       ((B, H, W), (H, W) or the shape of pred)

    Returns:
        Scalar tensor
    """
    if pred.shape != target.shape:
        raise ShapeError(
            f"prediction shape {tuple(pred.shape)} != target shape {tuple(target.shape)}"
        )
    p = _as_bkhw(pred)
    t = _as_bkhw(target).to(p.dtype)

    if pixel_weights is None:
        w = torch.ones_like(p)
    else:
        w = pixel_weights.to(p.dtype)
        if w.shape == pred.shape:
            w = _as_bkhw(w)
        elif w.shape == p.shape[:1] + p.shape[2:] or w.shape == p.shape[2:]:
            w = w.reshape(-1, 1, *p.shape[2:]) if w.dim() == 3 else w[None, None]
        else:
            raise ShapeError(
                f"pixel weights shape {tuple(pixel_weights.shape)} does not match "
                f"prediction shape {tuple(pred.shape)}"
            )
        w = w.expand_as(p)

    dims = (0, 2, 3)
    intersection = (w * p * t).sum(dims)
    denominator = (w * p).sum(dims) + (w * t).sum(dims)
    per_class = 2.0 * intersection / (denominator + DICE_EPS)
    per_class = torch.where(denominator == 0, torch.ones_like(per_class), per_class)
    return per_class.mean()


def dice_error(pred: torch.Tensor, target: torch.Tensor,
               pixel_weights: Optional[torch.Tensor] = None) -> torch.Tensor:
    """1 - dice_score."""
    return 1.0 - dice_score(pred, target, pixel_weights)


def kl_diag_gaussians(posterior: LatentGaussian, prior: LatentGaussian) -> torch.Tensor:
    """
    KL(posterior || prior) for diagonal gaussians.

    Summed over latent dimensions, averaged over the batch.
    """
    if posterior.mean.shape != prior.mean.shape:
        raise ShapeError(
            f"posterior shape {tuple(posterior.mean.shape)} != prior shape {tuple(prior.mean.shape)}"
        )
    lv_q, lv_p = posterior.log_variance, prior.log_variance
    mu_q, mu_p = posterior.mean, prior.mean
    kl = 0.5 * (torch.exp(lv_q - lv_p) + (mu_p - mu_q) ** 2 / torch.exp(lv_p) - 1.0 + lv_p - lv_q)
    kl = kl.sum(dim=-1)
    return kl.mean() if kl.dim() > 0 else kl


def punet_loss(seg: torch.Tensor, target: torch.Tensor,
               prior: LatentGaussian, posterior: LatentGaussian,
               beta: float = 1.0,
               pixel_weights: Optional[torch.Tensor] = None) -> LossValue:
    """Dice error plus beta-weighted KL between posterior and prior."""
    if beta < 0:
        raise ValueError(f"beta must be >= 0, got {beta}")
    reconstruction = dice_error(seg, target, pixel_weights)
    kl = kl_diag_gaussians(posterior, prior)
    variational = beta * kl
    total = reconstruction + variational
    return LossValue(
        total=total,
        reconstruction=float(reconstruction.detach().item()),
        variational=float(variational.detach().item()),
        kl=float(kl.detach().item()),
    )
