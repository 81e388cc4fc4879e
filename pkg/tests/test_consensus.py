"""
Tests for the consensus response and pseudo-label filters.
"""

import pytest
import torch

from probadapt.consensus import (
    ConsensusMap, FilterMode, MaskFilter, NoFilter, WeightFilter,
    consensus_response, filter_weights, get_filter, masked_fraction,
)
from probadapt.errors import ConfigError, ShapeError


def _loop_consensus(samples, theta):
    """Per-pixel loop reference."""
    n = len(samples)
    k, h, w = samples[0].shape
    out = torch.zeros(h, w)
    for i in range(h):
        for j in range(w):
            count = 0
            for s in samples:
                if any(s[c, i, j] >= theta for c in range(k)):
                    count += 1
            out[i, j] = count / n
    return out


def test_matches_loop_reference(rng):
    # quantized values so that ties with theta occur
    for steps, thetas in ((10, (0.3, 0.5, 0.7)), (4, (0.25, 0.5, 0.75))):
        for n in (1, 2, 3):
            for k in (1, 2):
                for theta in thetas:
                    samples = [torch.from_numpy(rng.integers(0, steps + 1, (k, 4, 4)) / steps).float()
                               for _ in range(n)]
                    c = consensus_response(samples, theta)
                    assert c.n_samples == n
                    assert torch.allclose(c.values, _loop_consensus(samples, theta))


def test_single_sample_reduces_to_thresholding(rng):
    for _ in range(1000):
        s = torch.from_numpy(rng.random((1, 3, 3))).float()
        theta = float(rng.uniform(0.01, 0.99))
        c = consensus_response([s], theta)
        assert torch.equal(c.values, (s[0] >= theta).float())


def test_threshold_is_inclusive():
    s = torch.full((1, 2, 2), 0.5)
    assert torch.all(consensus_response([s], 0.5).values == 1.0)


def test_monotone_in_theta(rng):
    samples = [torch.from_numpy(rng.random((2, 5, 5))).float() for _ in range(4)]
    low = consensus_response(samples, 0.3).values
    high = consensus_response(samples, 0.7).values
    assert torch.all(high <= low)


def test_values_are_multiples_of_one_over_n(rng):
    samples = [torch.from_numpy(rng.random((1, 8, 8))).float() for _ in range(5)]
    c = consensus_response(samples, 0.5)
    scaled = c.values * 5
    assert torch.allclose(scaled, torch.round(scaled), atol=1e-6)
    assert torch.all((c.values >= 0) & (c.values <= 1))


def test_stacked_tensor_with_batch():
    samples = torch.zeros(4, 2, 1, 3, 3)
    samples[:2, 0] = 0.9  # two of four samples agree on image 0
    samples[:, 1] = 0.9  # all agree on image 1
    c = consensus_response(samples, 0.5)
    assert c.values.shape == (2, 3, 3)
    assert torch.all(c.values[0] == 0.5)
    assert torch.all(c.values[1] == 1.0)
    assert c.mean == pytest.approx(0.75)


def test_consensus_does_not_track_gradients():
    s = torch.rand(1, 3, 3, requires_grad=True)
    assert not consensus_response([s], 0.5).values.requires_grad


def test_consensus_errors():
    s = torch.rand(1, 3, 3)
    with pytest.raises(ValueError):
        consensus_response([], 0.5)
    with pytest.raises(ShapeError):
        consensus_response([s, torch.rand(1, 3, 4)], 0.5)
    for theta in (0.0, 1.0, -0.1, 1.5):
        with pytest.raises(ConfigError):
            consensus_response([s], theta)


# -- filters ----------------------------------------------------------------------

def _map(values, n=4):
    return ConsensusMap(values=torch.tensor(values), n_samples=n, theta=0.5)


def test_mask_filter_keeps_full_agreement_only():
    c = _map([[0.0, 0.25], [0.75, 1.0]])
    assert torch.equal(MaskFilter().weights(c), torch.tensor([[0.0, 0.0], [0.0, 1.0]]))


def test_mask_filter_with_three_samples():
    values = torch.tensor([[3.0, 3.0], [3.0, 2.0]]) / 3.0
    c = ConsensusMap(values=values, n_samples=3, theta=0.5)
    assert torch.equal(MaskFilter().weights(c), torch.tensor([[1.0, 1.0], [1.0, 0.0]]))


def test_weight_filter_is_consensus():
    c = _map([[0.0, 0.25], [0.75, 1.0]])
    assert torch.equal(WeightFilter().weights(c), c.values)


def test_no_filter_is_all_ones():
    c = _map([[0.0, 0.25], [0.75, 1.0]])
    assert torch.equal(NoFilter().weights(c), torch.ones(2, 2))


def test_filter_weights_by_name():
    c = _map([[0.5, 1.0]])
    assert torch.equal(filter_weights(c, "mask"), torch.tensor([[0.0, 1.0]]))
    assert torch.equal(filter_weights(c, FilterMode.WEIGHT), torch.tensor([[0.5, 1.0]]))
    assert isinstance(get_filter("none"), NoFilter)
    with pytest.raises(ConfigError, match="Available"):
        get_filter("median")


def test_masked_fraction():
    assert masked_fraction(torch.tensor([0.0, 0.0, 0.5, 1.0])) == 0.5
    assert masked_fraction(torch.ones(3)) == 0.0
    assert masked_fraction(torch.zeros(0)) == 0.0
