"""
Checkpoint files.

A checkpoint is a torch.save'd dict:

    {"state_dict": {...}, "metadata": {"channels": [...], "latent_dim": 6, ...}}

The metadata holds the architecture (enough to rebuild the PUNet or the
deterministic UNet baseline), the training iteration, the config hash and
the software version.
"""

import logging
from pathlib import Path
from typing import Optional, Tuple, Union

import torch

from . import __version__
from .config import ModelConfig
from .errors import CheckpointMismatchError, DataFormatError
from .model import ProbabilisticUNet, build_model

logger = logging.getLogger(__name__)

ARCHITECTURE_KEYS = ("in_channels", "num_classes", "channels", "latent_dim", "comb_layers", "batch_norm")


def checkpoint_metadata(model: ProbabilisticUNet, iteration: int = 0,
                        config_hash: Optional[str] = None, **extra) -> dict:
    metadata = model.config.to_dict()
    metadata.update({
        "probabilistic": bool(model.probabilistic),
        "iteration": int(iteration),
        "config_hash": config_hash,
        "software_version": __version__,
    })
    metadata.update(extra)
    return metadata


def save_checkpoint(path: Union[str, Path], model: ProbabilisticUNet, iteration: int = 0,
                    config_hash: Optional[str] = None, **extra) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    state = {k: v.detach().cpu().clone() for k, v in model.state_dict().items()}
    torch.save({"state_dict": state, "metadata": checkpoint_metadata(model, iteration, config_hash, **extra)}, path)
    logger.debug("Saved checkpoint %s (iteration %d)", path, iteration)
    return path


def _model_config(metadata: dict) -> ModelConfig:
    missing = [k for k in ARCHITECTURE_KEYS if k not in metadata]
    if missing:
        raise CheckpointMismatchError(f"checkpoint metadata lacks {', '.join(missing)}")
    return ModelConfig.from_dict({k: metadata[k] for k in ARCHITECTURE_KEYS})


def load_checkpoint(path: Union[str, Path],
                    expected: Optional[ModelConfig] = None,
                    probabilistic: Optional[bool] = None) -> Tuple[ProbabilisticUNet, dict]:
    """
    Rebuild a model from a checkpoint.

    Args:
        path: Checkpoint file
        expected: Architecture the caller needs; any difference raises CheckpointMismatchError
        probabilistic: Require a PUNet (True) or the deterministic UNet (False); None accepts both

    Returns:
        (model in eval mode, metadata)
    """
    path = Path(path)
    if not path.exists():
        raise DataFormatError(f"checkpoint not found: {path}")
    try:
        payload = torch.load(path, map_location="cpu", weights_only=True)
    except Exception as e:
        raise DataFormatError(f"cannot read checkpoint {path}: {e}") from None
    if not isinstance(payload, dict) or "state_dict" not in payload or "metadata" not in payload:
        raise DataFormatError(f"{path} is not a probadapt checkpoint")

    metadata = payload["metadata"]
    config = _model_config(metadata)
    if expected is not None:
        for key in ARCHITECTURE_KEYS:
            have, want = getattr(config, key), getattr(expected, key)
            if have != want:
                raise CheckpointMismatchError(
                    f"checkpoint {path} has {key}={have}, config expects {key}={want}"
                )

    stored = bool(metadata.get("probabilistic", True))
    if probabilistic is not None and stored != probabilistic:
        kinds = {True: "a probabilistic UNet", False: "a deterministic UNet"}
        raise CheckpointMismatchError(
            f"checkpoint {path} holds {kinds[stored]}, {kinds[probabilistic]} is needed"
        )
    model = build_model(config, probabilistic=stored)
    try:
        model.load_state_dict(payload["state_dict"])
    except RuntimeError as e:
        raise CheckpointMismatchError(f"checkpoint {path} does not fit the model: {e}") from None
    model.eval()
    return model, metadata
