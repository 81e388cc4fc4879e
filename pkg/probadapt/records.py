"""
Run records: manifest, metrics CSV, output lock and plots.

Run directory:
    <out>/manifest.yaml
    <out>/metrics.csv
    <out>/checkpoints/best.pt, final.pt
    <out>/train.log
    <out>/.lock           (while the run is active)
"""

import csv
import logging
import math
import os
from dataclasses import dataclass, field
from datetime import datetime
from pathlib import Path
from typing import Dict, List, Optional, Union

import yaml

from . import __version__
from .config import TrainConfig, is_manifest
from .errors import ConfigError, DataFormatError

logger = logging.getLogger(__name__)

PathLike = Union[str, Path]

METRICS_COLUMNS = (
    "iteration", "loss_total", "loss_sup", "loss_unsup", "kl",
    "masked_frac", "mean_consensus", "val_dice", "lr",
)


@dataclass
class RunManifest:
    """Everything needed to rerun a training run."""
    config: dict
    seed: int
    software_version: str = __version__
    config_hash: str = ""
    inputs: Dict[str, Optional[str]] = field(default_factory=dict)
    outputs: Dict[str, str] = field(default_factory=dict)
    started: str = field(default_factory=lambda: datetime.now().isoformat(timespec="seconds"))
    finished: Optional[str] = None
    status: str = "running"

    @classmethod
    def for_run(cls, cfg: TrainConfig, inputs: Optional[dict] = None) -> "RunManifest":
        resolved = cfg.resolved()
        return cls(
            config=resolved.to_dict(),
            seed=cfg.seed,
            config_hash=cfg.config_hash(),
            inputs=dict(inputs or {}),
        )

    def finish(self, status: str = "completed") -> None:
        self.finished = datetime.now().isoformat(timespec="seconds")
        self.status = status

    def to_dict(self) -> dict:
        return {
            "software_version": self.software_version,
            "seed": self.seed,
            "config_hash": self.config_hash,
            "started": self.started,
            "finished": self.finished,
            "status": self.status,
            "inputs": self.inputs,
            "outputs": self.outputs,
            "config": self.config,
        }

    def save(self, path: PathLike) -> None:
        with open(path, "w", encoding="utf-8") as f:
            yaml.safe_dump(self.to_dict(), f, sort_keys=False)

    @classmethod
    def load(cls, path: PathLike) -> "RunManifest":
        with open(path, "r", encoding="utf-8") as f:
            data = yaml.safe_load(f) or {}
        if not isinstance(data, dict) or not is_manifest(data):
            raise ConfigError(f"{path} is not a run manifest")
        return cls(
            config=data["config"],
            seed=int(data.get("seed", 0)),
            software_version=data["software_version"],
            config_hash=data.get("config_hash", ""),
            inputs=data.get("inputs") or {},
            outputs=data.get("outputs") or {},
            started=data.get("started", ""),
            finished=data.get("finished"),
            status=data.get("status", ""),
        )


def manifest_inputs(path: PathLike) -> dict:
    """Inputs recorded in a run manifest; {} for a plain config file."""
    with open(path, "r", encoding="utf-8") as f:
        data = yaml.safe_load(f) or {}
    if not isinstance(data, dict) or not is_manifest(data):
        return {}
    return dict(data.get("inputs") or {})


def _format(value) -> str:
    if value is None:
        return ""
    if isinstance(value, bool):
        return str(int(value))
    if isinstance(value, int):
        return str(value)
    value = float(value)
    if math.isnan(value):
        return ""
    return f"{value:.8g}"


class MetricsLog:
    """Append-only metrics CSV with a fixed column order."""

    def __init__(self, path: PathLike, columns=METRICS_COLUMNS):
        self.path = Path(path)
        self.columns = tuple(columns)
        self.path.parent.mkdir(parents=True, exist_ok=True)
        with open(self.path, "w", encoding="utf-8", newline="") as f:
            csv.writer(f, lineterminator="\n").writerow(self.columns)

    def append(self, row: dict) -> None:
        unknown = set(row) - set(self.columns)
        if unknown:
            raise ValueError(f"unknown metrics columns: {', '.join(sorted(unknown))}")
        with open(self.path, "a", encoding="utf-8", newline="") as f:
            csv.writer(f, lineterminator="\n").writerow([_format(row.get(c)) for c in self.columns])


def read_metrics(path: PathLike) -> List[Dict[str, Optional[float]]]:
    """Read a metrics CSV; empty cells become None."""
    path = Path(path)
    if not path.exists():
        raise DataFormatError(f"metrics file not found: {path}")
    with open(path, "r", encoding="utf-8", newline="") as f:
        return [
            {k: (float(v) if v != "" else None) for k, v in row.items()}
            for row in csv.DictReader(f)
        ]


class OutputLock:
    """
    Exclusive claim on an output directory.

    Usage:
        with OutputLock(out_dir):
            ...
    """

    def __init__(self, directory: PathLike):
        self.directory = Path(directory)
        self.path = self.directory / ".lock"
        self._held = False

    def acquire(self) -> None:
        self.directory.mkdir(parents=True, exist_ok=True)
        try:
            fd = os.open(self.path, os.O_CREAT | os.O_EXCL | os.O_WRONLY)
        except FileExistsError:
            raise ConfigError(
                f"output directory {self.directory} is used by another run "
                f"(delete {self.path} if that run is gone)"
            ) from None
        with os.fdopen(fd, "w") as f:
            f.write(str(os.getpid()))
        self._held = True

    def release(self) -> None:
        if self._held:
            self.path.unlink(missing_ok=True)
            self._held = False

    def __enter__(self) -> "OutputLock":
        self.acquire()
        return self

    def __exit__(self, *exc) -> None:
        self.release()


class ScalarWriter:
    """TensorBoard scalars through tensorboardX; a no-op when disabled."""

    def __init__(self, log_dir: Optional[PathLike] = None):
        self._writer = None
        if log_dir is None:
            return
        try:
            from tensorboardX import SummaryWriter
        except ImportError:
            raise ConfigError(
                "tensorboardX not installed. Run: pip install probadapt[tensorboard]"
            ) from None
        self._writer = SummaryWriter(str(log_dir))

    def add_scalars(self, row: dict, step: int) -> None:
        if self._writer is None:
            return
        for key, value in row.items():
            if key != "iteration" and value is not None and not (isinstance(value, float) and math.isnan(value)):
                self._writer.add_scalar(key, value, step)

    def close(self) -> None:
        if self._writer is not None:
            self._writer.close()


def plot_metrics(metrics_path: PathLike, out_dir: Optional[PathLike] = None) -> List[Path]:
    """Loss and dice curves from a metrics CSV, written as PNGs next to it."""
    try:
        import matplotlib
        matplotlib.use("Agg")
        import matplotlib.pyplot as plt
    except ImportError:
        raise ConfigError("matplotlib not installed. Run: pip install probadapt[plots]") from None

    rows = read_metrics(metrics_path)
    out_dir = Path(out_dir) if out_dir is not None else Path(metrics_path).parent
    written = []

    def series(key):
        points = [(r["iteration"], r[key]) for r in rows if r.get(key) is not None]
        return [p[0] for p in points], [p[1] for p in points]

    fig, ax = plt.subplots(figsize=(6, 4))
    for key in ("loss_total", "loss_sup", "loss_unsup", "kl"):
        xs, ys = series(key)
        if xs:
            ax.plot(xs, ys, label=key)
    ax.set_xlabel("iteration")
    ax.set_ylabel("loss")
    ax.legend()
    path = out_dir / "loss.png"
    fig.savefig(path, dpi=100, bbox_inches="tight")
    plt.close(fig)
    written.append(path)

    xs, ys = series("val_dice")
    if xs:
        fig, ax = plt.subplots(figsize=(6, 4))
        ax.plot(xs, ys, marker="o")
        ax.set_xlabel("iteration")
        ax.set_ylabel("validation dice")
        ax.set_ylim(0, 1)
        path = out_dir / "dice.png"
        fig.savefig(path, dpi=100, bbox_inches="tight")
        plt.close(fig)
        written.append(path)
    return written
