"""
Synthetic two-domain data, PGM files and patch sampling.

Directory layout written by export_dataset and read by load_domain:

    <root>/dataset.yaml
    <root>/<domain>/<split>/images/0000.pgm
    <root>/<domain>/<split>/labels/0000.pgm       (labeled splits only)
    <root>/<domain>/<split>/instances/0000.pgm    (16-bit, labeled splits only)

Splits are train/val/test = 80/10/10 by index. Labels are optional, so any
pre-converted PGM pairs can be used as a domain.
"""

import logging
from dataclasses import dataclass, field, asdict, fields
from pathlib import Path
from typing import Dict, Iterator, List, Optional, Sequence, Tuple, Union

import numpy as np
import torch
import yaml
from PIL import Image
from scipy import ndimage

from .errors import ConfigError, DataFormatError, ShapeError

logger = logging.getLogger(__name__)

SPLITS = ("train", "val", "test")
PathLike = Union[str, Path]


# =============================================================================
# Domain specs
# =============================================================================

@dataclass
class DomainSpec:
    """Rendering parameters of one synthetic domain."""
    blob_count_range: Tuple[int, int] = (3, 8)
    blob_radius_range: Tuple[float, float] = (5.0, 14.0)
    foreground_intensity: float = 0.8
    background_intensity: float = 0.2
    texture_noise_sigma: float = 0.05
    blur_sigma: float = 0.0
    invert: bool = False
    image_size: int = 128
    seed: int = 0

    def validate(self, divisor: int = 1) -> "DomainSpec":
        for name in ("foreground_intensity", "background_intensity"):
            value = getattr(self, name)
            if not 0.0 <= value <= 1.0:
                raise ConfigError(f"{name} must be in [0, 1], got {value}")
        low, high = self.blob_count_range
        if low < 0 or high < low:
            raise ConfigError(f"blob_count_range must satisfy 0 <= low <= high, got {self.blob_count_range}")
        low, high = self.blob_radius_range
        if low <= 0 or high < low:
            raise ConfigError(f"blob_radius_range must satisfy 0 < low <= high, got {self.blob_radius_range}")
        if self.texture_noise_sigma < 0 or self.blur_sigma < 0:
            raise ConfigError("texture_noise_sigma and blur_sigma must be >= 0")
        if self.image_size < 1 or self.image_size % divisor:
            raise ConfigError(f"image_size {self.image_size} is not divisible by {divisor}")
        return self

    def to_dict(self) -> dict:
        data = asdict(self)
        data["blob_count_range"] = list(self.blob_count_range)
        data["blob_radius_range"] = list(self.blob_radius_range)
        return data

    @classmethod
    def from_dict(cls, data: dict) -> "DomainSpec":
        unknown = set(data) - {f.name for f in fields(cls)}
        if unknown:
            raise ConfigError(f"Unknown domain keys: {', '.join(sorted(unknown))}")
        data = dict(data)
        for key in ("blob_count_range", "blob_radius_range"):
            if key in data:
                data[key] = tuple(data[key])
        return cls(**data).validate()


# bright clean blobs
SOURCE_SPEC = DomainSpec(foreground_intensity=0.8, background_intensity=0.2,
                         texture_noise_sigma=0.05, blur_sigma=0.0, seed=1)
# dimmer, textured and blurred
TARGET_SPEC = DomainSpec(foreground_intensity=0.6, background_intensity=0.35,
                         texture_noise_sigma=0.12, blur_sigma=1.0, seed=2)


@dataclass
class Sample:
    """One image with optional label and instance map (numpy, (H, W))."""
    image: np.ndarray                       # float32 in [0, 1]
    mask: Optional[np.ndarray] = None       # uint8 in {0, 1}
    instances: Optional[np.ndarray] = None  # uint16, 0 = background
    domain: str = ""
    index: int = 0

    @property
    def shape(self) -> Tuple[int, int]:
        return self.image.shape

    @property
    def labeled(self) -> bool:
        return self.mask is not None

    def target(self, num_classes: int = 1) -> np.ndarray:
        """Training target (K, H, W): foreground, plus boundaries when K=2."""
        if self.mask is None:
            raise DataFormatError(f"sample {self.domain}/{self.index} has no label")
        if num_classes == 1:
            return self.mask[None].astype(np.float32)
        if self.instances is None:
            raise DataFormatError(
                f"sample {self.domain}/{self.index} has no instance labels for a 2-class target"
            )
        from .instanceseg import instance_boundaries
        boundary = instance_boundaries(self.instances)
        return np.stack([self.mask, boundary]).astype(np.float32)


# =============================================================================
# Generation
# =============================================================================

def _render_blobs(spec: DomainSpec, rng: np.random.Generator) -> np.ndarray:
    """Instance map of random ellipses; later blobs overwrite earlier ones."""
    size = spec.image_size
    instances = np.zeros((size, size), dtype=np.uint16)
    yy, xx = np.mgrid[0:size, 0:size].astype(np.float64)
    count = int(rng.integers(spec.blob_count_range[0], spec.blob_count_range[1] + 1))
    for blob_id in range(1, count + 1):
        cy, cx = rng.uniform(0, size, size=2)
        a, b = rng.uniform(*spec.blob_radius_range, size=2)
        angle = rng.uniform(0, np.pi)
        dy, dx = yy - cy, xx - cx
        u = (dx * np.cos(angle) + dy * np.sin(angle)) / a
        v = (-dx * np.sin(angle) + dy * np.cos(angle)) / b
        instances[u * u + v * v <= 1.0] = blob_id
    return relabel_sequential(instances)


def relabel_sequential(labels: np.ndarray) -> np.ndarray:
    """Map the non-zero ids of a labeling onto 1..n in order of first appearance."""
    flat = labels.ravel()
    ids, first = np.unique(flat[flat > 0], return_index=True)
    out = np.zeros_like(labels)
    for new_id, old_id in enumerate(ids[np.argsort(first)], start=1):
        out[labels == old_id] = new_id
    return out


def render_sample(spec: DomainSpec, rng: np.random.Generator, domain: str = "", index: int = 0) -> Sample:
    instances = _render_blobs(spec, rng)
    mask = (instances > 0).astype(np.uint8)

    image = np.where(mask > 0, spec.foreground_intensity, spec.background_intensity)
    if spec.blur_sigma > 0:
        image = ndimage.gaussian_filter(image, sigma=spec.blur_sigma, mode="reflect")
    if spec.texture_noise_sigma > 0:
        image = image + spec.texture_noise_sigma * rng.standard_normal(image.shape)

    # 8-bit grid, so a PGM round trip is exact
    quantized = np.round(np.clip(image, 0.0, 1.0) * 255.0).astype(np.uint8)
    if spec.invert:
        quantized = 255 - quantized
    return Sample(
        image=quantized.astype(np.float32) / 255.0,
        mask=mask,
        instances=instances,
        domain=domain,
        index=index,
    )


def generate_domain(spec: DomainSpec, n: int, domain: str = "") -> List[Sample]:
    """
    Render n samples; deterministic given spec.seed.

    Each image draws from its own child of SeedSequence(spec.seed).
    """
    spec.validate()
    if n < 0:
        raise ConfigError(f"n must be >= 0, got {n}")
    children = np.random.SeedSequence(spec.seed).spawn(n)
    return [
        render_sample(spec, np.random.default_rng(child), domain=domain, index=i)
        for i, child in enumerate(children)
    ]


def split_indices(n: int) -> Dict[str, List[int]]:
    """Deterministic 80/10/10 train/val/test split by index."""
    n_train = int(0.8 * n)
    n_val = int(0.9 * n) - n_train
    return {
        "train": list(range(0, n_train)),
        "val": list(range(n_train, n_train + n_val)),
        "test": list(range(n_train + n_val, n)),
    }


# =============================================================================
# PGM files (P5, 8 or 16 bit)
# =============================================================================

# Pillow modes of a P5 graymap with maxval 255 and 65535
_PGM_MODES = {"L": np.uint8, "I": np.uint16, "I;16": np.uint16, "I;16B": np.uint16}


def write_pgm(path: PathLike, array: np.ndarray) -> None:
    """Write a 2-D uint8 (maxval 255) or uint16 (maxval 65535) array."""
    if array.ndim != 2:
        raise ShapeError(f"PGM needs a 2-D array, got shape {array.shape}")
    if array.dtype == np.uint8:
        image = Image.fromarray(array)
    elif array.dtype == np.uint16:
        # mode "I" is written as P5 with maxval 65535
        image = Image.fromarray(array.astype(np.int32))
    else:
        raise DataFormatError(f"unsupported PGM dtype {array.dtype}, use uint8 or uint16")
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    image.save(path, format="PPM")


def read_pgm(path: PathLike) -> np.ndarray:
    """Read a P5 graymap as uint8 or uint16."""
    path = Path(path)
    if not path.exists():
        raise DataFormatError(f"file not found: {path}")
    try:
        with Image.open(path, formats=["PPM"]) as image:
            w, h = image.size
            if w < 1 or h < 1:
                raise DataFormatError(f"{path}: invalid size {w}x{h}")
            if image.mode not in _PGM_MODES:
                raise DataFormatError(f"{path}: not a graymap (mode {image.mode})")
            # plain (P2) files and maxvals other than 255/65535 need a rescaling decoder
            if not image.tile or image.tile[0][0] != "raw":
                raise DataFormatError(f"{path}: unsupported bit depth or not a binary PGM")
            image.load()
            return np.asarray(image).astype(_PGM_MODES[image.mode])
    except DataFormatError:
        raise
    except (OSError, ValueError, SyntaxError) as e:
        raise DataFormatError(f"{path}: malformed PGM ({e})") from None


def image_to_u8(image: np.ndarray) -> np.ndarray:
    return np.round(np.clip(image, 0.0, 1.0) * 255.0).astype(np.uint8)


def load_pgm_pair(image_path: PathLike, mask_path: Optional[PathLike] = None,
                  instances_path: Optional[PathLike] = None,
                  domain: str = "", index: int = 0) -> Sample:
    """
    Load an 8-bit image (scaled to [0, 1]) and an optional 8-bit mask (binarized at > 127).
    """
    raw = read_pgm(image_path)
    if raw.dtype != np.uint8:
        raise DataFormatError(f"{image_path}: unsupported bit depth, images must be 8-bit")
    sample = Sample(image=raw.astype(np.float32) / 255.0, domain=domain, index=index)

    if mask_path is not None:
        mask = read_pgm(mask_path)
        if mask.dtype != np.uint8:
            raise DataFormatError(f"{mask_path}: unsupported bit depth, labels must be 8-bit")
        if mask.shape != raw.shape:
            raise ShapeError(f"label shape {mask.shape} != image shape {raw.shape} ({mask_path})")
        sample.mask = (mask > 127).astype(np.uint8)

    if instances_path is not None:
        instances = read_pgm(instances_path).astype(np.uint16)
        if instances.shape != raw.shape:
            raise ShapeError(
                f"instance shape {instances.shape} != image shape {raw.shape} ({instances_path})"
            )
        sample.instances = instances
    return sample


# =============================================================================
# Dataset export / loading
# =============================================================================

@dataclass
class DatasetConfig:
    """What `probadapt generate` writes."""
    n: int = 640
    domains: Dict[str, DomainSpec] = field(
        default_factory=lambda: {"source": SOURCE_SPEC, "target": TARGET_SPEC}
    )
    # splits written without labels, per domain
    unlabeled: Dict[str, List[str]] = field(default_factory=lambda: {"target": ["train"]})

    def to_dict(self) -> dict:
        return {
            "n": self.n,
            "domains": {name: spec.to_dict() for name, spec in self.domains.items()},
            "unlabeled": {name: list(splits) for name, splits in self.unlabeled.items()},
        }

    @classmethod
    def from_dict(cls, data: dict) -> "DatasetConfig":
        unknown = set(data) - {"n", "domains", "unlabeled"}
        if unknown:
            raise ConfigError(f"Unknown dataset keys: {', '.join(sorted(unknown))}")
        cfg = cls()
        if "n" in data:
            cfg.n = int(data["n"])
        if "domains" in data:
            cfg.domains = {name: DomainSpec.from_dict(spec or {}) for name, spec in data["domains"].items()}
        if "unlabeled" in data:
            cfg.unlabeled = {name: list(splits) for name, splits in (data["unlabeled"] or {}).items()}
        return cfg.validate()

    def validate(self) -> "DatasetConfig":
        if self.n < 0:
            raise ConfigError(f"n must be >= 0, got {self.n}")
        if not self.domains:
            raise ConfigError("dataset needs at least one domain")
        for name, splits in self.unlabeled.items():
            if name not in self.domains:
                raise ConfigError(f"unlabeled lists unknown domain '{name}'")
            bad = set(splits) - set(SPLITS)
            if bad:
                raise ConfigError(f"unknown splits for '{name}': {', '.join(sorted(bad))}")
        for spec in self.domains.values():
            spec.validate()
        return self

    @classmethod
    def load(cls, path: Optional[PathLike]) -> "DatasetConfig":
        if path is None:
            return cls()
        path = Path(path)
        if not path.exists():
            raise ConfigError(f"Config file not found: {path}")
        with open(path, "r", encoding="utf-8") as f:
            try:
                data = yaml.safe_load(f) or {}
            except yaml.YAMLError as e:
                raise ConfigError(f"Invalid YAML in {path}: {e}") from None
        # accept either a bare dataset config or a full config with a "dataset" section
        return cls.from_dict(data.get("dataset", data))


def export_dataset(root: PathLike, cfg: Optional[DatasetConfig] = None) -> Path:
    """Generate every domain and write the PGM tree plus dataset.yaml. Returns the manifest path."""
    cfg = (cfg or DatasetConfig()).validate()
    root = Path(root)
    root.mkdir(parents=True, exist_ok=True)
    splits = split_indices(cfg.n)

    manifest = {"n": cfg.n, "splits": splits, "domains": {}}
    for name, spec in cfg.domains.items():
        samples = generate_domain(spec, cfg.n, domain=name)
        unlabeled = set(cfg.unlabeled.get(name, []))
        counts = {}
        for split, indices in splits.items():
            split_dir = root / name / split
            (split_dir / "images").mkdir(parents=True, exist_ok=True)
            labeled = split not in unlabeled
            for i in indices:
                sample = samples[i]
                fname = f"{i:04d}.pgm"
                write_pgm(split_dir / "images" / fname, image_to_u8(sample.image))
                if labeled:
                    write_pgm(split_dir / "labels" / fname, sample.mask * np.uint8(255))
                    write_pgm(split_dir / "instances" / fname, sample.instances.astype(np.uint16))
            counts[split] = {"count": len(indices), "labeled": labeled}
        manifest["domains"][name] = {"spec": spec.to_dict(), "splits": counts}
        logger.info("Wrote domain '%s': %d images", name, cfg.n)

    manifest_path = root / "dataset.yaml"
    with open(manifest_path, "w", encoding="utf-8") as f:
        yaml.safe_dump(manifest, f, sort_keys=False)
    return manifest_path


def load_domain(root: PathLike, domain: str, split: str = "train",
                require_labels: bool = False) -> List[Sample]:
    """Load every image of <root>/<domain>/<split>, with labels when present."""
    split_dir = Path(root) / domain / split
    image_dir = split_dir / "images"
    if not image_dir.is_dir():
        raise DataFormatError(f"missing images directory: {image_dir}")
    label_dir = split_dir / "labels"
    instance_dir = split_dir / "instances"
    if require_labels and not label_dir.is_dir():
        raise DataFormatError(f"missing labels directory: {label_dir}")

    samples = []
    for image_path in sorted(image_dir.glob("*.pgm")):
        mask_path = label_dir / image_path.name if label_dir.is_dir() else None
        if mask_path is not None and not mask_path.exists():
            raise DataFormatError(f"missing label for {image_path.name} in {label_dir}")
        instances_path = instance_dir / image_path.name
        samples.append(load_pgm_pair(
            image_path,
            mask_path,
            instances_path if instances_path.exists() else None,
            domain=domain,
            index=int(image_path.stem) if image_path.stem.isdigit() else len(samples),
        ))
    logger.debug("Loaded %d samples from %s", len(samples), split_dir)
    return samples


@dataclass
class DomainData:
    """Train and validation samples of one domain."""
    name: str
    train: List[Sample]
    val: List[Sample] = field(default_factory=list)

    @property
    def val_labeled(self) -> bool:
        return bool(self.val) and all(s.labeled for s in self.val)

    @classmethod
    def load(cls, root: PathLike, domain: str, require_labels: bool = False) -> "DomainData":
        train = load_domain(root, domain, "train", require_labels=require_labels)
        val_dir = Path(root) / domain / "val" / "images"
        val = load_domain(root, domain, "val") if val_dir.is_dir() else []
        return cls(name=domain, train=train, val=val)

    @classmethod
    def from_samples(cls, name: str, samples: Sequence[Sample]) -> "DomainData":
        """Split generated samples 80/10 into train/val (the test tenth is dropped)."""
        splits = split_indices(len(samples))
        return cls(
            name=name,
            train=[samples[i] for i in splits["train"]],
            val=[samples[i] for i in splits["val"]],
        )


# =============================================================================
# Patch sampling
# =============================================================================

def to_tensors(samples: Sequence[Sample], num_classes: int = 1) -> Tuple[torch.Tensor, Optional[torch.Tensor]]:
    """Stack whole samples into (B, 1, H, W) images and (B, K, H, W) targets (or None)."""
    shapes = {s.shape for s in samples}
    if len(shapes) > 1:
        raise ShapeError(f"cannot stack images of different shapes: {sorted(shapes)}")
    images = torch.from_numpy(np.stack([s.image for s in samples]))[:, None].float()
    if not all(s.labeled for s in samples):
        return images, None
    targets = torch.from_numpy(np.stack([s.target(num_classes) for s in samples])).float()
    return images, targets


def sample_patches(samples: Sequence[Sample], patch_shape: Tuple[int, int], batch_size: int,
                   generator: torch.Generator,
                   num_classes: int = 1) -> Iterator[Tuple[torch.Tensor, Optional[torch.Tensor]]]:
    """
    Infinite stream of random crops.

    Each batch item draws an image index, then a row and a column offset,
    uniformly from the generator. Targets are None for unlabeled samples.

    Yields:
        (images (B, 1, h, w), targets (B, K, h, w) or None)
    """
    if not samples:
        raise DataFormatError("cannot sample patches from an empty dataset")
    ph, pw = patch_shape
    for s in samples:
        h, w = s.shape
        if ph > h or pw > w:
            raise ShapeError(f"patch {ph}x{pw} is larger than image {h}x{w} ({s.domain}/{s.index})")
    labeled = all(s.labeled for s in samples)
    targets = [s.target(num_classes) for s in samples] if labeled else None

    while True:
        images, masks = [], []
        for _ in range(batch_size):
            i = int(torch.randint(len(samples), (1,), generator=generator).item())
            h, w = samples[i].shape
            top = int(torch.randint(h - ph + 1, (1,), generator=generator).item())
            left = int(torch.randint(w - pw + 1, (1,), generator=generator).item())
            images.append(samples[i].image[top:top + ph, left:left + pw])
            if targets is not None:
                masks.append(targets[i][:, top:top + ph, left:left + pw])
        x = torch.from_numpy(np.stack(images))[:, None].float()
        y = torch.from_numpy(np.stack(masks)).float() if targets is not None else None
        yield x, y
