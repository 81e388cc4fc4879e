"""
Probabilistic UNet.

A deterministic UNet computes per-pixel features. Two encoders with identical
architecture map inputs to diagonal gaussians over a latent space:
- the prior encoder sees the image
- the posterior encoder sees the image and the label (one extra channel)

A latent sample is tiled over every pixel, concatenated with the UNet
features and passed through 1x1 convolutions (the combination head) and a
per-class sigmoid. Training samples the posterior, inference samples the
prior.

SegmentationUNet is the deterministic baseline: the same backbone with a
1x1 sigmoid head and no latent.

Usage:
    model = ProbabilisticUNet(ModelConfig())
    seg, prior, posterior = model.forward_train(x, y, generator)
    samples = model.predict_samples(x, n=8, generator=generator)
"""

import logging
from dataclasses import dataclass
from typing import List, Optional

import torch
import torch.nn as nn
import torch.nn.functional as F

from .config import ModelConfig
from .errors import ShapeError, TrainingDivergedError

logger = logging.getLogger(__name__)

# log-variance guard applied to the encoder outputs
LOG_VARIANCE_MIN = -20.0
LOG_VARIANCE_MAX = 20.0


@dataclass
class LatentGaussian:
    """Diagonal gaussian; mean and log_variance have shape (B, D)."""
    mean: torch.Tensor
    log_variance: torch.Tensor

    def __post_init__(self):
        if self.mean.shape != self.log_variance.shape:
            raise ShapeError(
                f"mean shape {tuple(self.mean.shape)} != "
                f"log_variance shape {tuple(self.log_variance.shape)}"
            )
        if self.mean.shape[-1] < 1:
            raise ShapeError("latent dimension must be >= 1")

    @property
    def dim(self) -> int:
        return self.mean.shape[-1]

    @property
    def std(self) -> torch.Tensor:
        return torch.exp(0.5 * self.log_variance.clamp(max=LOG_VARIANCE_MAX))


def sample_latent(g: LatentGaussian, generator: Optional[torch.Generator] = None) -> torch.Tensor:
    """
    Reparameterized sample z = mean + exp(0.5 * log_variance) * eps.

    Differentiable with respect to mean and log_variance; eps is drawn from
    the given generator on the CPU.
    """
    eps = torch.randn(g.mean.shape, generator=generator, dtype=g.mean.dtype)
    return g.mean + g.std * eps.to(g.mean.device)


def _init_weights(module: nn.Module) -> None:
    if isinstance(module, nn.Conv2d):
        nn.init.kaiming_normal_(module.weight, mode="fan_in", nonlinearity="relu")
        if module.bias is not None:
            nn.init.zeros_(module.bias)


def check_input(config: ModelConfig, x: torch.Tensor) -> None:
    """Raise ShapeError unless x is (B, in_channels, H, W) with H and W divisible by 2^(depth-1)."""
    if x.dim() != 4:
        raise ShapeError(f"expected input of shape (B, C, H, W), got {tuple(x.shape)}")
    if x.shape[1] != config.in_channels:
        raise ShapeError(
            f"input has {x.shape[1]} channels, model expects {config.in_channels}"
        )
    divisor = config.divisor
    for axis, size in zip(("height", "width"), x.shape[-2:]):
        if size % divisor:
            raise ShapeError(
                f"input {axis} {size} is not divisible by {divisor} "
                f"(2^(depth-1) for depth {config.depth})"
            )


class ConvBlock(nn.Sequential):
    """Two 3x3 convolutions with ReLU (and optional batch norm)."""

    def __init__(self, in_channels: int, out_channels: int, batch_norm: bool = False):
        layers: List[nn.Module] = []
        for c_in in (in_channels, out_channels):
            layers.append(nn.Conv2d(c_in, out_channels, kernel_size=3, padding=1))
            if batch_norm:
                layers.append(nn.BatchNorm2d(out_channels))
            layers.append(nn.ReLU(inplace=True))
        super().__init__(*layers)


class Encoder(nn.Module):
    """Contracting path: one ConvBlock per level, 2x2 max-pooling in between."""

    def __init__(self, in_channels: int, channels, batch_norm: bool = False):
        super().__init__()
        blocks = []
        for c_out in channels:
            blocks.append(ConvBlock(in_channels, c_out, batch_norm))
            in_channels = c_out
        self.blocks = nn.ModuleList(blocks)

    def forward(self, x: torch.Tensor) -> List[torch.Tensor]:
        features = []
        for i, block in enumerate(self.blocks):
            if i > 0:
                x = F.max_pool2d(x, kernel_size=2)
            x = block(x)
            features.append(x)
        return features


class UNet(nn.Module):
    """Deterministic UNet backbone returning features at full resolution."""

    def __init__(self, in_channels: int, channels, batch_norm: bool = False):
        super().__init__()
        self.encoder = Encoder(in_channels, channels, batch_norm)
        ups, decoders = [], []
        for c_low, c_high in zip(reversed(channels[1:]), reversed(channels[:-1])):
            ups.append(nn.Conv2d(c_low, c_high, kernel_size=1))
            decoders.append(ConvBlock(2 * c_high, c_high, batch_norm))
        self.ups = nn.ModuleList(ups)
        self.decoders = nn.ModuleList(decoders)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        skips = self.encoder(x)
        x = skips[-1]
        for up, decoder, skip in zip(self.ups, self.decoders, reversed(skips[:-1])):
            x = F.interpolate(x, scale_factor=2, mode="nearest")
            x = decoder(torch.cat([up(x), skip], dim=1))
        return x


class GaussianEncoder(nn.Module):
    """Encoder followed by global average pooling and a 1x1 head predicting 2*D values."""

    def __init__(self, in_channels: int, channels, latent_dim: int, batch_norm: bool = False):
        super().__init__()
        self.latent_dim = latent_dim
        self.encoder = Encoder(in_channels, channels, batch_norm)
        self.head = nn.Conv2d(channels[-1], 2 * latent_dim, kernel_size=1)

    def forward(self, x: torch.Tensor) -> LatentGaussian:
        encoding = self.encoder(x)[-1]
        encoding = encoding.mean(dim=(2, 3), keepdim=True)
        params = self.head(encoding).flatten(1)
        mean = params[:, :self.latent_dim]
        log_variance = params[:, self.latent_dim:].clamp(LOG_VARIANCE_MIN, LOG_VARIANCE_MAX)
        return LatentGaussian(mean=mean, log_variance=log_variance)


class CombinationHead(nn.Module):
    """1x1 convolutions applied to [features, tiled latent]; returns logits."""

    def __init__(self, feature_channels: int, latent_dim: int, num_classes: int, layers: int = 3):
        super().__init__()
        convs: List[nn.Module] = []
        c_in = feature_channels + latent_dim
        for _ in range(layers - 1):
            convs.append(nn.Conv2d(c_in, feature_channels, kernel_size=1))
            convs.append(nn.ReLU(inplace=True))
            c_in = feature_channels
        convs.append(nn.Conv2d(c_in, num_classes, kernel_size=1))
        self.layers = nn.Sequential(*convs)

    def forward(self, features: torch.Tensor, z: torch.Tensor) -> torch.Tensor:
        h, w = features.shape[-2:]
        tiled = z[:, :, None, None].expand(-1, -1, h, w)
        return self.layers(torch.cat([features, tiled], dim=1))


class ProbabilisticUNet(nn.Module):
    """UNet + prior/posterior gaussian encoders + combination head."""

    probabilistic = True

    def __init__(self, config: Optional[ModelConfig] = None):
        super().__init__()
        self.config = config or ModelConfig()
        self.config.validate()
        cfg = self.config
        self.unet = UNet(cfg.in_channels, cfg.channels, cfg.batch_norm)
        self.prior = GaussianEncoder(cfg.in_channels, cfg.channels, cfg.latent_dim, cfg.batch_norm)
        self.posterior = GaussianEncoder(
            cfg.in_channels + cfg.num_classes, cfg.channels, cfg.latent_dim, cfg.batch_norm
        )
        self.comb_head = CombinationHead(cfg.channels[0], cfg.latent_dim, cfg.num_classes, cfg.comb_layers)
        self.apply(_init_weights)

    @property
    def latent_dim(self) -> int:
        return self.config.latent_dim

    # -- input checks -----------------------------------------------------------

    def check_input(self, x: torch.Tensor) -> None:
        check_input(self.config, x)

    @staticmethod
    def _check_finite(g: LatentGaussian, which: str) -> LatentGaussian:
        if not (torch.isfinite(g.mean).all() and torch.isfinite(g.log_variance).all()):
            raise TrainingDivergedError(f"{which} encoder produced non-finite values")
        return g

    # -- operations -------------------------------------------------------------

    def unet_features(self, x: torch.Tensor) -> torch.Tensor:
        self.check_input(x)
        return self.unet(x)

    def prior_encode(self, x: torch.Tensor) -> LatentGaussian:
        self.check_input(x)
        return self._check_finite(self.prior(x), "prior")

    def posterior_encode(self, x: torch.Tensor, y: torch.Tensor) -> LatentGaussian:
        self.check_input(x)
        if y.dim() == 3:
            y = y.unsqueeze(1)
        if y.shape[0] != x.shape[0] or y.shape[-2:] != x.shape[-2:]:
            raise ShapeError(
                f"label shape {tuple(y.shape)} does not match image shape {tuple(x.shape)}"
            )
        if y.shape[1] != self.config.num_classes:
            raise ShapeError(
                f"label has {y.shape[1]} channels, model predicts {self.config.num_classes} classes"
            )
        return self._check_finite(self.posterior(torch.cat([x, y.to(x.dtype)], dim=1)), "posterior")

    def combine_predict(self, features: torch.Tensor, z: torch.Tensor) -> torch.Tensor:
        """Probabilities (B, K, H, W) in [0, 1]."""
        if z.dim() != 2 or z.shape[1] != self.latent_dim:
            raise ShapeError(
                f"latent has shape {tuple(z.shape)}, expected (B, {self.latent_dim})"
            )
        return torch.sigmoid(self.comb_head(features, z))

    def forward_train(self, x: torch.Tensor, y: torch.Tensor,
                      generator: Optional[torch.Generator] = None):
        """
        Training forward pass.

        Returns:
            (segmentation from a posterior sample, prior gaussian, posterior gaussian)
        """
        features = self.unet_features(x)
        prior = self.prior_encode(x)
        posterior = self.posterior_encode(x, y)
        z = sample_latent(posterior, generator)
        return self.combine_predict(features, z), prior, posterior

    def predict_samples(self, x: torch.Tensor, n: int,
                        generator: Optional[torch.Generator] = None) -> List[torch.Tensor]:
        """n segmentations from independent prior samples (features computed once)."""
        if n < 1:
            raise ValueError(f"n must be >= 1, got {n}")
        features = self.unet_features(x)
        prior = self.prior_encode(x)
        return [self.combine_predict(features, sample_latent(prior, generator)) for _ in range(n)]

    def forward(self, x: torch.Tensor, generator: Optional[torch.Generator] = None) -> torch.Tensor:
        return self.predict_samples(x, 1, generator)[0]

    def __repr__(self) -> str:
        cfg = self.config
        return (
            f"ProbabilisticUNet(channels={list(cfg.channels)}, latent_dim={cfg.latent_dim}, "
            f"num_classes={cfg.num_classes})"
        )


class SegmentationUNet(nn.Module):
    """
    Deterministic baseline: the UNet backbone and a 1x1 sigmoid head.

    Has the sampling interface of ProbabilisticUNet so the trainer, evaluation
    and checkpoints treat both alike; every "sample" is the same prediction.
    """

    probabilistic = False

    def __init__(self, config: Optional[ModelConfig] = None):
        super().__init__()
        self.config = config or ModelConfig()
        self.config.validate()
        cfg = self.config
        self.unet = UNet(cfg.in_channels, cfg.channels, cfg.batch_norm)
        self.head = nn.Conv2d(cfg.channels[0], cfg.num_classes, kernel_size=1)
        self.apply(_init_weights)

    def check_input(self, x: torch.Tensor) -> None:
        check_input(self.config, x)

    def predict(self, x: torch.Tensor) -> torch.Tensor:
        """Probabilities (B, K, H, W) in [0, 1]."""
        self.check_input(x)
        return torch.sigmoid(self.head(self.unet(x)))

    def predict_samples(self, x: torch.Tensor, n: int,
                        generator: Optional[torch.Generator] = None) -> List[torch.Tensor]:
        if n < 1:
            raise ValueError(f"n must be >= 1, got {n}")
        prediction = self.predict(x)
        return [prediction] * n

    def forward(self, x: torch.Tensor, generator: Optional[torch.Generator] = None) -> torch.Tensor:
        return self.predict(x)

    def __repr__(self) -> str:
        cfg = self.config
        return f"SegmentationUNet(channels={list(cfg.channels)}, num_classes={cfg.num_classes})"


def build_model(config: Optional[ModelConfig] = None, probabilistic: bool = True) -> nn.Module:
    """ProbabilisticUNet, or the deterministic SegmentationUNet baseline."""
    return ProbabilisticUNet(config) if probabilistic else SegmentationUNet(config)
