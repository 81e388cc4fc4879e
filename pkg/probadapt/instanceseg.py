"""
Instance segmentation from a 2-channel (foreground, boundary) prediction.

    mask  = foreground >= fg_threshold
    seeds = connected components of (foreground - boundary >= seed_threshold)
    labels = seeded watershed on the boundary map, restricted to mask

The watershed is a priority flood: pixels leave the queue in order of
(flood level, insertion order), and a neighbor entering the queue gets the
label of the pixel that pushed it, at level max(height, current level).
"""

import heapq
import logging
from dataclasses import dataclass
from pathlib import Path
from typing import Union

import numpy as np
import torch
from scipy import ndimage

from .data import relabel_sequential, write_pgm
from .errors import ShapeError

logger = logging.getLogger(__name__)

_STRUCTURES = {
    4: ndimage.generate_binary_structure(2, 1),
    8: ndimage.generate_binary_structure(2, 2),
}
_OFFSETS = {
    4: ((-1, 0), (0, -1), (0, 1), (1, 0)),
    8: ((-1, -1), (-1, 0), (-1, 1), (0, -1), (0, 1), (1, -1), (1, 0), (1, 1)),
}


@dataclass
class InstanceLabeling:
    """Labels 0 (background) and 1..instance_count."""
    labels: np.ndarray

    @property
    def instance_count(self) -> int:
        return int(self.labels.max()) if self.labels.size else 0

    def save(self, path: Union[str, Path]) -> None:
        """Export as 16-bit PGM."""
        if self.instance_count > 65535:
            raise ValueError(f"{self.instance_count} instances do not fit in 16 bit")
        write_pgm(path, self.labels.astype(np.uint16))


def _check_connectivity(connectivity: int) -> None:
    if connectivity not in _STRUCTURES:
        raise ValueError(f"connectivity must be 4 or 8, got {connectivity}")


def connected_components(mask: np.ndarray, connectivity: int = 4) -> InstanceLabeling:
    """Label maximal connected regions of a binary mask 1..C."""
    _check_connectivity(connectivity)
    labels, _ = ndimage.label(np.asarray(mask) > 0, structure=_STRUCTURES[connectivity])
    return InstanceLabeling(labels.astype(np.int32))


def watershed(height: np.ndarray, seeds: Union[InstanceLabeling, np.ndarray],
              mask: np.ndarray, connectivity: int = 4) -> InstanceLabeling:
    """
    Seeded watershed by priority flood.

    Every mask pixel connected to a seed gets the label of the seed reached by
    the path with the lowest maximum height. Seeds keep their labels, pixels
    outside the mask stay 0, and ties go to the pixel queued first.
    """
    _check_connectivity(connectivity)
    seed_labels = seeds.labels if isinstance(seeds, InstanceLabeling) else np.asarray(seeds)
    height = np.asarray(height, dtype=np.float64)
    mask = np.asarray(mask) > 0
    if not (height.shape == seed_labels.shape == mask.shape) or height.ndim != 2:
        raise ShapeError(
            f"height {height.shape}, seeds {seed_labels.shape} and mask {mask.shape} "
            "must be equal 2-D shapes"
        )
    if np.any((seed_labels > 0) & ~mask):
        raise ShapeError("every seed pixel must lie inside the mask")

    out = np.where(mask, seed_labels, 0).astype(np.int32)
    if not out.any():
        logger.warning("watershed: no seeds inside the mask, returning an empty labeling")
        return InstanceLabeling(out)

    h, w = height.shape
    queue = []
    counter = 0
    for r, c in zip(*np.nonzero(out)):
        heapq.heappush(queue, (height[r, c], counter, int(r), int(c)))
        counter += 1

    offsets = _OFFSETS[connectivity]
    while queue:
        level, _, r, c = heapq.heappop(queue)
        label = out[r, c]
        for dr, dc in offsets:
            nr, nc = r + dr, c + dc
            if 0 <= nr < h and 0 <= nc < w and mask[nr, nc] and not out[nr, nc]:
                # label at push time: later pops cannot reach it at a lower level
                out[nr, nc] = label
                heapq.heappush(queue, (max(height[nr, nc], level), counter, nr, nc))
                counter += 1
    return InstanceLabeling(out)


def instances_from_prediction(seg: Union[np.ndarray, torch.Tensor],
                              fg_threshold: float = 0.5,
                              seed_threshold: float = 0.5,
                              connectivity: int = 4) -> InstanceLabeling:
    """
    Instances from a (2, H, W) foreground/boundary prediction.

    Labels are made contiguous; seeds that fall outside the foreground mask
    are dropped.
    """
    if isinstance(seg, torch.Tensor):
        seg = seg.detach().cpu().numpy()
    seg = np.asarray(seg, dtype=np.float64)
    if seg.ndim == 4 and seg.shape[0] == 1:
        seg = seg[0]
    if seg.ndim != 3 or seg.shape[0] != 2:
        raise ShapeError(f"expected a (2, H, W) prediction, got shape {seg.shape}")
    foreground, boundary = seg
    mask = foreground >= fg_threshold
    seeds = connected_components((foreground - boundary >= seed_threshold) & mask, connectivity)
    labels = watershed(boundary, seeds, mask, connectivity).labels
    return InstanceLabeling(relabel_sequential(labels))


def instance_boundaries(instances: np.ndarray) -> np.ndarray:
    """
    Boundary map (uint8, {0, 1}) of an instance labeling.

    A foreground pixel is a boundary pixel when one of its 4-neighbors carries
    a different label (background or another instance). Image borders do not count.
    """
    labels = np.asarray(instances)
    padded = np.pad(labels, 1, mode="edge")
    center = padded[1:-1, 1:-1]
    boundary = np.zeros(labels.shape, dtype=bool)
    for dr, dc in _OFFSETS[4]:
        neighbor = padded[1 + dr:1 + dr + labels.shape[0], 1 + dc:1 + dc + labels.shape[1]]
        boundary |= neighbor != center
    return (boundary & (labels > 0)).astype(np.uint8)
