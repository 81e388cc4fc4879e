"""
Student-teacher self-training for domain adaptation.

Variants:
- MeanTeacher: weak augmentation on both paths, teacher = EMA of the student
- FixMatch: strong student / weak teacher augmentation, teacher shares the student weights

Strategies:
- source:   supervised training on the labeled source domain
- joint:    L = L_s(source batch) + L_u(target batch) from the start
- separate: start from a source-trained model, then L_u on target data only

Each joint iteration runs in this order: sample source and target batches,
make pseudo-labels with the teacher, compute L_s + L_u, step the student,
update the teacher.
"""

import copy
import logging
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, Iterator, List, Optional, Sequence, Tuple

import numpy as np
import torch
import torch.nn as nn
from tqdm import tqdm

from .augment import augment
from .checkpoint import save_checkpoint
from .config import Strategy, TrainConfig
from .consensus import ConsensusMap, consensus_response, filter_weights, masked_fraction
from .data import DomainData, Sample, sample_patches, to_tensors
from .errors import DataFormatError, ShapeError, TrainingDivergedError
from .losses import LossValue, dice_error, dice_score, punet_loss
from .model import ProbabilisticUNet, build_model
from .records import MetricsLog, ScalarWriter

logger = logging.getLogger(__name__)


# =============================================================================
# Teacher
# =============================================================================

@dataclass(frozen=True)
class TeacherMode:
    """EMA teacher (MeanTeacher) or shared weights (FixMatch)."""
    shared: bool
    alpha: float = 0.999

    @classmethod
    def ema(cls, alpha: float = 0.999) -> "TeacherMode":
        if not 0.0 < alpha <= 1.0:
            raise ValueError(f"alpha must be in (0, 1], got {alpha}")
        return cls(shared=False, alpha=alpha)

    @classmethod
    def shared_weights(cls) -> "TeacherMode":
        return cls(shared=True)

    @classmethod
    def for_config(cls, cfg: TrainConfig) -> "TeacherMode":
        spec = cfg.method_spec
        return cls.shared_weights() if spec.shares_weights else cls.ema(cfg.alpha)

    def make_teacher(self, student: nn.Module) -> nn.Module:
        if self.shared:
            return student
        teacher = copy.deepcopy(student)
        for p in teacher.parameters():
            p.requires_grad_(False)
        return teacher


@torch.no_grad()
def ema_update(teacher: nn.Module, student: nn.Module, alpha: float) -> nn.Module:
    """w_t <- alpha * w_t + (1 - alpha) * w_s for every parameter (and float buffer)."""
    if teacher is student:
        return teacher
    t_state = dict(teacher.named_parameters())
    s_state = dict(student.named_parameters())
    t_state.update(teacher.named_buffers())
    s_state.update(student.named_buffers())
    if t_state.keys() != s_state.keys():
        raise ShapeError("teacher and student have different parameter sets")
    for name, t in t_state.items():
        s = s_state[name]
        if t.shape != s.shape:
            raise ShapeError(f"{name}: teacher shape {tuple(t.shape)} != student shape {tuple(s.shape)}")
        if t.is_floating_point():
            t.mul_(alpha).add_(s.detach(), alpha=1.0 - alpha)
        else:
            t.copy_(s)
    return teacher


# =============================================================================
# Losses of one step
# =============================================================================

@dataclass
class PseudoLabel:
    """Detached teacher target and per-pixel weights."""
    target: torch.Tensor
    weights: torch.Tensor
    consensus: ConsensusMap

    @property
    def masked_fraction(self) -> float:
        return masked_fraction(self.weights)


def make_pseudo_label(teacher: ProbabilisticUNet, x_u: torch.Tensor, cfg: TrainConfig,
                      generator: torch.Generator) -> PseudoLabel:
    """
    Teacher prediction on a weakly augmented view, plus consensus weights.

    The target is the first of n_samples prior samples (or their mean with
    pseudo_label_target="mean"); all samples feed the consensus map.
    """
    was_training = teacher.training
    teacher.eval()
    try:
        with torch.no_grad():
            view = augment(x_u, cfg.teacher_augmentation, generator)
            samples = teacher.predict_samples(view, cfg.n_samples, generator)
            if cfg.pseudo_label_target == "mean":
                target = torch.stack(samples).mean(dim=0)
            else:
                target = samples[0]
            consensus = consensus_response(samples, cfg.theta)
            weights = filter_weights(consensus, cfg.filter_mode)
    finally:
        teacher.train(was_training)
    return PseudoLabel(target=target.detach(), weights=weights.detach(), consensus=consensus)


def unsupervised_loss(student: ProbabilisticUNet, x_u: torch.Tensor, pl: PseudoLabel,
                      cfg: TrainConfig, generator: torch.Generator) -> LossValue:
    """
    Dice error of a prior-sample student prediction on tau_s(x_u) against the pseudo-label.

    No label exists on target data, so the posterior path and the variational
    term are not used. A batch whose weights are all zero contributes 0.
    """
    view = augment(x_u, cfg.student_augmentation, generator)
    frac = pl.masked_fraction
    if pl.weights.numel() and frac == 1.0:
        return LossValue(total=torch.zeros((), dtype=x_u.dtype), reconstruction=0.0,
                         masked_fraction=1.0, skipped=True)
    pred = student.predict_samples(view, 1, generator)[0]
    rec = dice_error(pred, pl.target, pl.weights)
    return LossValue(total=rec, reconstruction=float(rec.detach().item()), masked_fraction=frac)


def supervised_loss(student: ProbabilisticUNet, x_s: torch.Tensor, y_s: torch.Tensor,
                    cfg: TrainConfig, generator: torch.Generator) -> LossValue:
    """
    Full PUNet loss: dice error of a posterior sample + beta * KL.

    A deterministic UNet has no latent, so its loss is the dice error alone.
    """
    if not student.probabilistic:
        rec = dice_error(student(x_s), y_s)
        return LossValue(total=rec, reconstruction=float(rec.detach().item()))
    seg, prior, posterior = student.forward_train(x_s, y_s, generator)
    return punet_loss(seg, y_s, prior, posterior, beta=cfg.beta)


# =============================================================================
# Evaluation
# =============================================================================

@dataclass
class MetricsReport:
    per_image: List[float]
    n_samples: int

    @property
    def mean(self) -> float:
        return float(np.mean(self.per_image))

    def to_rows(self) -> List[dict]:
        return [{"index": i, "dice": d} for i, d in enumerate(self.per_image)]


def _batches(samples: Sequence[Sample], size: int) -> Iterator[List[Sample]]:
    """Consecutive runs of up to size samples sharing one image shape, in order."""
    batch: List[Sample] = []
    for sample in samples:
        if batch and (len(batch) == size or sample.shape != batch[0].shape):
            yield batch
            batch = []
        batch.append(sample)
    if batch:
        yield batch


@torch.no_grad()
def predict_mean(model: ProbabilisticUNet, images: torch.Tensor, n_samples: int,
                 generator: torch.Generator) -> torch.Tensor:
    """Mean of n prior-sample predictions."""
    return torch.stack(model.predict_samples(images, n_samples, generator)).mean(dim=0)


@torch.no_grad()
def evaluate(model: ProbabilisticUNet, samples: Sequence[Sample], n_samples: int = 8,
             generator: Optional[torch.Generator] = None, batch_size: int = 8) -> MetricsReport:
    """
    Per-image dice of the thresholded mean-of-samples prediction.

    Pixels with mean probability >= 0.5 count as foreground.
    """
    if not samples:
        raise DataFormatError("cannot evaluate on an empty dataset")
    if not all(s.labeled for s in samples):
        raise DataFormatError("evaluation needs labeled samples")
    generator = generator if generator is not None else torch.Generator().manual_seed(0)
    num_classes = model.config.num_classes

    was_training = model.training
    model.eval()
    per_image: List[float] = []
    try:
        for batch in _batches(samples, batch_size):
            images, targets = to_tensors(batch, num_classes)
            hard = (predict_mean(model, images, n_samples, generator) >= 0.5).float()
            per_image.extend(float(dice_score(p, t).item()) for p, t in zip(hard, targets))
    finally:
        model.train(was_training)
    return MetricsReport(per_image=per_image, n_samples=n_samples)


# =============================================================================
# Trainer
# =============================================================================

STREAMS = ("init", "source", "target", "supervised", "pseudo", "student", "validation")


def make_generators(seed: int) -> Dict[str, torch.Generator]:
    """Independent torch generators per call site, spawned from one seed."""
    children = np.random.SeedSequence(seed).spawn(len(STREAMS))
    return {
        name: torch.Generator().manual_seed(int(child.generate_state(1, dtype=np.uint64)[0] >> 1))
        for name, child in zip(STREAMS, children)
    }


def init_model(cfg: TrainConfig, generator: torch.Generator) -> ProbabilisticUNet:
    """Build a model whose initial weights depend only on the generator."""
    seed = int(torch.randint(2 ** 62, (1,), generator=generator).item())
    with torch.random.fork_rng(devices=[]):
        torch.manual_seed(seed)
        return build_model(cfg.model, probabilistic=cfg.probabilistic)


@dataclass
class TrainResult:
    model: ProbabilisticUNet
    teacher: nn.Module
    iterations: int
    best_iteration: Optional[int] = None
    best_metric: Optional[float] = None
    rows: List[dict] = field(default_factory=list)
    skipped_steps: int = 0


class Trainer:
    """
    Runs one training configuration.

    Usage:
        trainer = Trainer(cfg, source=DomainData.load(root, "source"), out_dir="runs/a")
        result = trainer.run()
    """

    def __init__(self, cfg: TrainConfig,
                 source: Optional[DomainData] = None,
                 target: Optional[DomainData] = None,
                 model: Optional[ProbabilisticUNet] = None,
                 out_dir: Optional[Path] = None,
                 writer: Optional[ScalarWriter] = None,
                 progress: bool = False):
        self.cfg = cfg
        self.spec = cfg.method_spec
        self.strategy = cfg.strategy
        self.source = source
        self.target = target
        self.out_dir = Path(out_dir) if out_dir is not None else None
        self.writer = writer or ScalarWriter(None)
        self.progress = progress
        self.generators = make_generators(cfg.seed)

        if self.strategy is Strategy.SEPARATE:
            if model is None:
                raise ValueError(f"{self.spec.name} needs a pretrained model")
            if source is not None:
                raise ValueError(f"{self.spec.name} adapts without access to the source data")
            if target is None or not target.train:
                raise DataFormatError(f"{self.spec.name} needs target training images")
        elif source is None or not source.train:
            raise DataFormatError(f"{self.spec.name} needs labeled source training images")

        self.student = model if model is not None else init_model(cfg, self.generators["init"])
        self.student.train()
        self.teacher_mode = TeacherMode.for_config(cfg) if self.strategy is not Strategy.SOURCE else None
        self.teacher = self.teacher_mode.make_teacher(self.student) if self.teacher_mode else None

        self.optimizer = torch.optim.Adam(self.student.parameters(), lr=cfg.learning_rate)
        self.selection_mode = "min" if self.strategy is Strategy.SEPARATE else "max"
        self.scheduler = torch.optim.lr_scheduler.ReduceLROnPlateau(
            self.optimizer,
            mode=self.selection_mode,
            factor=cfg.scheduler_factor,
            patience=cfg.scheduler_patience,
        )
        self.metrics = MetricsLog(self.out_dir / "metrics.csv") if self.out_dir else None
        self.rows: List[dict] = []
        self.best_metric: Optional[float] = None
        self.best_iteration: Optional[int] = None
        self._best_state: Optional[dict] = None
        self.skipped_steps = 0

    # -- data ----------------------------------------------------------------------

    def _stream(self, domain: Optional[DomainData], name: str):
        if domain is None or not domain.train:
            return None
        return sample_patches(
            domain.train,
            self.cfg.data.patch_shape,
            self.cfg.data.batch_size,
            self.generators[name],
            num_classes=self.cfg.model.num_classes if name == "source" else 1,
        )

    # -- one iteration -------------------------------------------------------------

    def step(self, source_batch: Optional[Tuple[torch.Tensor, torch.Tensor]],
             target_batch: Optional[torch.Tensor]) -> dict:
        """One optimizer step; returns the metrics row (without iteration/val/lr)."""
        g = self.generators
        row: Dict[str, Optional[float]] = {}
        total = None

        if source_batch is not None:
            x_s, y_s = source_batch
            sup = supervised_loss(self.student, x_s, y_s, self.cfg, g["supervised"])
            total = sup.total
            row["loss_sup"] = sup.value
            row["kl"] = sup.kl

        if target_batch is not None:
            pl = make_pseudo_label(self.teacher, target_batch, self.cfg, g["pseudo"])
            unsup = unsupervised_loss(self.student, target_batch, pl, self.cfg, g["student"])
            row["loss_unsup"] = unsup.value
            row["masked_frac"] = unsup.masked_fraction
            row["mean_consensus"] = pl.consensus.mean
            if unsup.skipped:
                self.skipped_steps += 1
                logger.debug("all pixels masked, unsupervised loss skipped")
            else:
                total = unsup.total if total is None else total + unsup.total

        self.optimizer.zero_grad()
        if total is not None:
            if not torch.isfinite(total):
                raise TrainingDivergedError("non-finite loss")
            total.backward()
            self.optimizer.step()
            row["loss_total"] = float(total.detach().item())
        else:
            row["loss_total"] = 0.0

        if self.teacher_mode is not None and not self.teacher_mode.shared:
            ema_update(self.teacher, self.student, self.teacher_mode.alpha)
        return row

    # -- validation ----------------------------------------------------------------

    def _validation_generator(self) -> torch.Generator:
        # same draws at every validation so rounds are comparable
        return torch.Generator().manual_seed(self.cfg.seed)

    @torch.no_grad()
    def label_free_loss(self, samples: Sequence[Sample]) -> float:
        """Mean unsupervised loss on whole images; needs no labels."""
        g = self._validation_generator()
        was_training = self.student.training
        self.student.eval()
        losses = []
        try:
            for batch in _batches(samples, 8):
                images, _ = to_tensors([Sample(image=s.image) for s in batch])
                pl = make_pseudo_label(self.teacher, images, self.cfg, g)
                losses.append(unsupervised_loss(self.student, images, pl, self.cfg, g).value)
        finally:
            self.student.train(was_training)
        return float(np.mean(losses))

    def validate(self) -> Tuple[Optional[float], Optional[float]]:
        """Returns (selection metric, reported validation dice)."""
        n = self.cfg.val_samples
        target_dice = None
        if self.strategy is not Strategy.SOURCE and self.target is not None and self.target.val_labeled:
            target_dice = evaluate(self.student, self.target.val, n, self._validation_generator()).mean

        if self.strategy is Strategy.SEPARATE:
            if not self.target.val:
                return None, target_dice
            return self.label_free_loss(self.target.val), target_dice

        if not self.source.val:
            return None, target_dice
        source_dice = evaluate(self.student, self.source.val, n, self._validation_generator()).mean
        return source_dice, target_dice if target_dice is not None else source_dice

    def _is_better(self, metric: float) -> bool:
        if self.best_metric is None:
            return True
        if self.selection_mode == "max":
            return metric > self.best_metric
        return metric < self.best_metric

    def _remember_best(self, metric: float, iteration: int) -> None:
        self.best_metric = metric
        self.best_iteration = iteration
        self._best_state = copy.deepcopy(self.student.state_dict())
        if self.out_dir:
            save_checkpoint(self.out_dir / "checkpoints" / "best.pt", self.student, iteration,
                            self.cfg.config_hash(), metric=metric, method=self.spec.name)

    # -- loop ------------------------------------------------------------------------

    def run(self) -> TrainResult:
        cfg = self.cfg
        total_iterations = cfg.total_iterations
        source_stream = self._stream(self.source, "source") if self.strategy is not Strategy.SEPARATE else None
        target_stream = self._stream(self.target, "target") if self.strategy is not Strategy.SOURCE else None
        if self.strategy is Strategy.JOINT and target_stream is None:
            logger.warning("%s: no target images, training on source only", self.spec.name)

        logger.info(
            "Training %s (%s) for %d iterations, seed %d",
            self.spec.name, self.strategy.value, total_iterations, cfg.seed,
        )
        if self.spec.name.startswith("fm_s"):
            logger.warning("FixMatch with the separate strategy is known to train unstably")

        iterations = tqdm(range(1, total_iterations + 1), disable=not self.progress,
                          desc=self.spec.name, unit="it")
        for iteration in iterations:
            source_batch = next(source_stream) if source_stream is not None else None
            target_batch = next(target_stream)[0] if target_stream is not None else None
            try:
                row = self.step(source_batch, target_batch)
            except TrainingDivergedError as e:
                e.iteration = iteration
                raise

            row["iteration"] = iteration
            row["lr"] = self.optimizer.param_groups[0]["lr"]
            if iteration % cfg.val_interval == 0 or iteration == total_iterations:
                metric, val_dice = self.validate()
                row["val_dice"] = val_dice
                if metric is not None:
                    if not math.isfinite(metric):
                        raise TrainingDivergedError("non-finite validation metric", iteration)
                    self.scheduler.step(metric)
                    if self._is_better(metric):
                        self._remember_best(metric, iteration)
                    logger.info(
                        "iteration %d: selection %.4f, val dice %s, lr %.3g",
                        iteration, metric, "-" if val_dice is None else f"{val_dice:.4f}",
                        self.optimizer.param_groups[0]["lr"],
                    )
            self.rows.append(row)
            if self.metrics:
                self.metrics.append(row)
            self.writer.add_scalars(row, iteration)

        if self.out_dir:
            save_checkpoint(self.out_dir / "checkpoints" / "final.pt", self.student, total_iterations,
                            cfg.config_hash(), method=self.spec.name)
            if self._best_state is None:
                save_checkpoint(self.out_dir / "checkpoints" / "best.pt", self.student, total_iterations,
                                cfg.config_hash(), method=self.spec.name)

        # source training hands back the best validation weights
        if self.strategy is Strategy.SOURCE and self._best_state is not None:
            self.student.load_state_dict(self._best_state)

        logger.info(
            "Finished %s: %d iterations, best %s at iteration %s, %d unsupervised steps skipped (all pixels masked)",
            self.spec.name, total_iterations,
            "-" if self.best_metric is None else f"{self.best_metric:.4f}",
            "-" if self.best_iteration is None else self.best_iteration,
            self.skipped_steps,
        )
        return TrainResult(
            model=self.student,
            teacher=self.teacher if self.teacher is not None else self.student,
            iterations=total_iterations,
            best_iteration=self.best_iteration,
            best_metric=self.best_metric,
            rows=self.rows,
            skipped_steps=self.skipped_steps,
        )


# =============================================================================
# Entry points
# =============================================================================

def train_source(cfg: TrainConfig, data: DomainData, **kwargs) -> ProbabilisticUNet:
    """Supervised source training; returns the best-validation weights."""
    if cfg.strategy is not Strategy.SOURCE:
        raise ValueError(f"train_source needs method 'source', got {cfg.method}")
    return Trainer(cfg, source=data, **kwargs).run().model


def train_joint(cfg: TrainConfig, source_data: DomainData, target_data: Optional[DomainData],
                **kwargs) -> ProbabilisticUNet:
    """Joint source + target self-training from scratch; returns the final weights."""
    if cfg.strategy is not Strategy.JOINT:
        raise ValueError(f"train_joint needs a joint method, got {cfg.method}")
    return Trainer(cfg, source=source_data, target=target_data, **kwargs).run().model


def adapt_separate(cfg: TrainConfig, pretrained: ProbabilisticUNet, target_data: DomainData,
                   **kwargs) -> ProbabilisticUNet:
    """Target-only self-training from a source-trained model; returns the final weights."""
    if cfg.strategy is not Strategy.SEPARATE:
        raise ValueError(f"adapt_separate needs a separate method, got {cfg.method}")
    return Trainer(cfg, target=target_data, model=pretrained, **kwargs).run().model
