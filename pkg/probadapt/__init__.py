"""
ProbAdapt - probabilistic domain adaptation for binary segmentation.

A Probabilistic UNet trained by self-training (MeanTeacher or FixMatch) with
consensus-filtered pseudo-labels, adapted from a labeled source domain to an
unlabeled target domain jointly or in a separate fine-tuning stage.

Usage:
    from probadapt import load_config, DomainData, Trainer

    cfg = load_config("experiment.yaml", overrides={"train.method": "fm_j_m"})
    source = DomainData.load("data", "source")
    target = DomainData.load("data", "target")
    result = Trainer(cfg, source=source, target=target, out_dir="runs/fm_j_m").run()

Methods (self-training x strategy x filter):
    mt_j, mt_j_m, mt_j_w, mt_s, mt_s_m, mt_s_w,
    fm_j, fm_j_m, fm_j_w, fm_s, fm_s_m, fm_s_w
    plus "source" for supervised source training and "unet", a deterministic
    UNet baseline trained the same way
"""

__version__ = "0.1.0"

from .config import METHODS, TrainConfig, get_method, load_config
from .consensus import consensus_response, filter_weights
from .data import DomainData, export_dataset, generate_domain
from .model import ProbabilisticUNet
from .selftrain import Trainer, adapt_separate, evaluate, train_joint, train_source

__all__ = [
    "METHODS",
    "TrainConfig",
    "get_method",
    "load_config",
    "consensus_response",
    "filter_weights",
    "DomainData",
    "export_dataset",
    "generate_domain",
    "ProbabilisticUNet",
    "Trainer",
    "train_source",
    "train_joint",
    "adapt_separate",
    "evaluate",
]
