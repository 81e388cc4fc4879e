"""
Consensus response and pseudo-label filtering.

The consensus response counts, per pixel, the fraction of N sampled teacher
predictions that exceed a threshold theta in any class. It drives three
filtering strategies for the unsupervised reconstruction loss:
- mask: keep only pixels where all samples agree (c = 1)
- weight: weight every pixel by c
- none: keep every pixel (weight 1)
"""

from abc import ABC, abstractmethod
from dataclasses import dataclass
from enum import Enum
from typing import Dict, Sequence, Type, Union

import torch

from .errors import ConfigError, ShapeError


class FilterMode(str, Enum):
    MASK = "mask"
    WEIGHT = "weight"
    NONE = "none"


@dataclass
class ConsensusMap:
    """Per-pixel consensus values, each a multiple of 1/n_samples."""
    values: torch.Tensor  # (B, H, W) or (H, W)
    n_samples: int
    theta: float

    @property
    def mean(self) -> float:
        return float(self.values.mean().item())


def consensus_response(
    samples: Union[Sequence[torch.Tensor], torch.Tensor],
    theta: float = 0.5,
) -> ConsensusMap:
    """
    Compute the consensus response over N sampled predictions.

    Args:
        samples: N predictions of shape (..., K, H, W), or a stacked tensor (N, ..., K, H, W)
        theta: Threshold in (0, 1)

    Returns:
        ConsensusMap with values of shape (..., H, W)
    """
    if not 0.0 < theta < 1.0:
        raise ConfigError(f"theta must be in (0, 1), got {theta}")

    if isinstance(samples, torch.Tensor):
        stacked = samples
    else:
        samples = list(samples)
        if not samples:
            raise ValueError("consensus_response needs at least one sample")
        first = samples[0].shape
        for i, sample in enumerate(samples):
            if sample.shape != first:
                raise ShapeError(
                    f"sample {i} has shape {tuple(sample.shape)}, expected {tuple(first)}"
                )
        stacked = torch.stack(samples)

    if stacked.shape[0] == 0:
        raise ValueError("consensus_response needs at least one sample")
    if stacked.dim() < 4:
        raise ShapeError(
            f"samples must have shape (N, ..., K, H, W), got {tuple(stacked.shape)}"
        )

    n = stacked.shape[0]
    # any class above theta, then count over samples
    hits = (stacked.detach() >= theta).any(dim=-3)
    counts = hits.sum(dim=0)
    values = counts.to(torch.float64 if stacked.dtype == torch.float64 else torch.float32) / n
    return ConsensusMap(values=values, n_samples=n, theta=theta)


class PseudoLabelFilter(ABC):
    """Base class for pseudo-label filters."""

    mode: FilterMode

    @abstractmethod
    def weights(self, consensus: ConsensusMap) -> torch.Tensor:
        """Per-pixel loss weights in [0, 1]."""


class MaskFilter(PseudoLabelFilter):
    """
    Consensus masking: only pixels where every sample agrees contribute.

    With a single sample this is plain confidence thresholding.
    """

    mode = FilterMode.MASK

    def weights(self, consensus: ConsensusMap) -> torch.Tensor:
        # counts are exact multiples of 1/N, c == 1 iff count == N
        counts = torch.round(consensus.values * consensus.n_samples)
        return (counts == consensus.n_samples).to(consensus.values.dtype)


class WeightFilter(PseudoLabelFilter):
    """Consensus weighting: pixels weighted by their consensus value."""

    mode = FilterMode.WEIGHT

    def weights(self, consensus: ConsensusMap) -> torch.Tensor:
        return consensus.values.clone()


class NoFilter(PseudoLabelFilter):
    """Identity filter: every pixel has weight 1."""

    mode = FilterMode.NONE

    def weights(self, consensus: ConsensusMap) -> torch.Tensor:
        return torch.ones_like(consensus.values)


FILTERS: Dict[FilterMode, Type[PseudoLabelFilter]] = {
    FilterMode.MASK: MaskFilter,
    FilterMode.WEIGHT: WeightFilter,
    FilterMode.NONE: NoFilter,
}


def get_filter(mode: Union[str, FilterMode]) -> PseudoLabelFilter:
    """Get a pseudo-label filter by mode name (mask, weight, none)."""
    try:
        mode = FilterMode(mode)
    except ValueError:
        raise ConfigError(
            f"Unknown filter mode: {mode}. "
            f"Available: {', '.join(m.value for m in FILTERS)}"
        ) from None
    return FILTERS[mode]()


def filter_weights(consensus: ConsensusMap, mode: Union[str, FilterMode]) -> torch.Tensor:
    """Turn a consensus map into per-pixel loss weights for the given mode."""
    return get_filter(mode).weights(consensus)


def masked_fraction(weights: torch.Tensor) -> float:
    """Fraction of pixels whose weight is exactly zero."""
    if weights.numel() == 0:
        return 0.0
    return float((weights == 0).sum().item()) / weights.numel()
