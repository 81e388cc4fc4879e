"""
Shared fixtures: tiny models and toy domains that train in seconds on a CPU.

The end-to-end adaptation run is marked `slow` and only runs with PROBADAPT_SLOW=1.
"""

import os
import sys
from pathlib import Path

import numpy as np
import pytest
import torch
import yaml

# Add parent to path for imports
sys.path.insert(0, str(Path(__file__).parent.parent))

from probadapt.config import ModelConfig, Strategy, TrainConfig, get_method
from probadapt.data import DomainData, DomainSpec, generate_domain
from probadapt.model import ProbabilisticUNet


def pytest_configure(config):
    config.addinivalue_line("markers", "slow: end-to-end training runs (set PROBADAPT_SLOW=1)")


def pytest_collection_modifyitems(config, items):
    if os.environ.get("PROBADAPT_SLOW") == "1":
        return
    skip = pytest.mark.skip(reason="set PROBADAPT_SLOW=1 to run")
    for item in items:
        if "slow" in item.keywords:
            item.add_marker(skip)


TINY_MODEL = {"channels": [4, 8], "latent_dim": 3}

TOY_SOURCE = DomainSpec(blob_count_range=(1, 3), blob_radius_range=(3.0, 7.0),
                        foreground_intensity=0.8, background_intensity=0.2,
                        texture_noise_sigma=0.05, image_size=32, seed=11)
TOY_TARGET = DomainSpec(blob_count_range=(1, 3), blob_radius_range=(3.0, 7.0),
                        foreground_intensity=0.6, background_intensity=0.35,
                        texture_noise_sigma=0.12, blur_sigma=1.0, image_size=32, seed=12)


def tiny_config(method: str = "source", **train) -> TrainConfig:
    """TrainConfig for the tiny model on 32x32 toy images."""
    data = {"patch_shape": [16, 16], "batch_size": 2}
    strategy = get_method(method).strategy
    if strategy is not Strategy.SEPARATE:
        data["source_domain"] = "source"
    if strategy is not Strategy.SOURCE:
        data["target_domain"] = "target"
    values = {"method": method, "iterations": 4, "val_interval": 2, "val_samples": 2, "n_samples": 3}
    values.update(train)
    return TrainConfig.from_dict({"train": values, "model": dict(TINY_MODEL), "data": data}).validate()


@pytest.fixture
def tiny_model():
    torch.manual_seed(0)
    return ProbabilisticUNet(ModelConfig(channels=(4, 8), latent_dim=3))


@pytest.fixture(scope="session")
def toy_source():
    return DomainData.from_samples("source", generate_domain(TOY_SOURCE, 20, domain="source"))


@pytest.fixture(scope="session")
def toy_target():
    data = DomainData.from_samples("target", generate_domain(TOY_TARGET, 20, domain="target"))
    for s in data.train:
        s.mask = None
        s.instances = None
    return data


@pytest.fixture
def toy_dataset_config(tmp_path):
    """Dataset config file for `probadapt generate` with 20 tiny images per domain."""
    path = tmp_path / "dataset.yaml"
    with open(path, "w", encoding="utf-8") as f:
        yaml.safe_dump({
            "n": 20,
            "domains": {"source": TOY_SOURCE.to_dict(), "target": TOY_TARGET.to_dict()},
            "unlabeled": {"target": ["train"]},
        }, f)
    return path


@pytest.fixture
def rng():
    return np.random.default_rng(1234)
