"""
U-Net feature extractors and the three model variants.

``proposed``
    SAR and optical U-Nets produce feature maps that are concatenated and
    passed through a 1x1 conv head (late fusion). A third U-Net maps SAR to
    an approximation of the optical features, which replaces them when the
    optical image is missing.
``ds-zerofill``
    Dual-stream U-Net; a missing optical image is replaced by zeros.
``unimodal-sar``
    Single U-Net on SAR with a 1x1 conv head.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass, replace
from pathlib import Path
from typing import Sequence

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from .data import NUM_OPTICAL, NUM_SAR, Sample, zero_fill_optical

VARIANTS = ("proposed", "ds-zerofill", "unimodal-sar")
MODES = ("auto", "force-missing")

CHECKPOINT_FORMAT = "sarfuse-checkpoint"
CHECKPOINT_VERSION = 1


class ConfigError(ValueError):
    pass


@dataclass(frozen=True)
class BackboneConfig:
    in_channels: int = NUM_SAR
    feature_channels: int = 16
    depth: int = 2
    base_width: int = 16

    def __post_init__(self):
        if self.depth < 1:
            raise ConfigError(f"depth must be >= 1, got {self.depth}")
        if self.feature_channels < 1 or self.base_width < 1 or self.in_channels < 1:
            raise ConfigError("channel counts must be positive")

    @property
    def divisor(self) -> int:
        return 2 ** self.depth

    def check_size(self, *sizes: int) -> None:
        for s in sizes:
            if s % self.divisor:
                raise ConfigError(f"spatial size {s} is not divisible by 2^depth = {self.divisor}")


def _double_conv(cin: int, cout: int) -> nn.Sequential:
    return nn.Sequential(
        nn.Conv2d(cin, cout, 3, padding=1, bias=False),
        nn.BatchNorm2d(cout),
        nn.ReLU(inplace=True),
        nn.Conv2d(cout, cout, 3, padding=1, bias=False),
        nn.BatchNorm2d(cout),
        nn.ReLU(inplace=True),
    )


class Up(nn.Module):
    """Nearest upsampling, conv, concat with skip, double conv."""

    def __init__(self, cin: int, cskip: int, cout: int):
        super().__init__()
        self.up_conv = nn.Conv2d(cin, cskip, 3, padding=1)
        self.conv = _double_conv(2 * cskip, cout)

    def forward(self, x, skip):
        x = self.up_conv(F.interpolate(x, scale_factor=2, mode="nearest"))
        return self.conv(torch.cat([skip, x], dim=1))


class UNet(nn.Module):
    """U-Net returning a non-negative full-resolution feature map (N, C_f, H, W)."""

    def __init__(self, config: BackboneConfig):
        super().__init__()
        self.config = config
        widths = [config.base_width * 2 ** i for i in range(config.depth + 1)]
        self.inc = _double_conv(config.in_channels, widths[0])
        self.down = nn.ModuleList(_double_conv(widths[i], widths[i + 1]) for i in range(config.depth))
        self.up = nn.ModuleList(Up(widths[i + 1], widths[i], widths[i]) for i in reversed(range(config.depth)))
        self.out = nn.Conv2d(widths[0], config.feature_channels, 1)

    def forward(self, x):
        self.config.check_size(*x.shape[-2:])
        skips = [self.inc(x)]
        for block in self.down:
            skips.append(block(F.max_pool2d(skips[-1], 2)))
        x = skips.pop()
        for block in self.up:
            x = block(x, skips.pop())
        return F.relu(self.out(x))


@dataclass
class ForwardOutput:
    """Per-sample outputs; rasters are (1, H, W) probabilities or (C_f, H, W) features."""

    variant: str
    optical_available: bool
    p_fused: torch.Tensor | None = None
    p_sar_path: torch.Tensor | None = None
    f_s2: torch.Tensor | None = None
    f_s2_hat: torch.Tensor | None = None
    f_s1: torch.Tensor | None = None

    @property
    def prediction(self) -> torch.Tensor:
        """The prediction used for evaluation: fused if computed, else the SAR path."""
        return self.p_fused if self.p_fused is not None else self.p_sar_path


class ModelBundle(nn.Module):
    def __init__(self, variant: str, config: BackboneConfig):
        super().__init__()
        if variant not in VARIANTS:
            raise ConfigError(f"unknown variant {variant!r}, expected one of {VARIANTS}")
        self.variant = variant
        self.config = config
        cf = config.feature_channels
        self.sar_extractor = UNet(replace(config, in_channels=NUM_SAR))
        self.optical_extractor = None
        self.reconstruction_net = None
        if variant == "unimodal-sar":
            self.fusion_head = nn.Conv2d(cf, 1, 1)
        else:
            self.optical_extractor = UNet(replace(config, in_channels=NUM_OPTICAL))
            self.fusion_head = nn.Conv2d(2 * cf, 1, 1)
        if variant == "proposed":
            self.reconstruction_net = UNet(replace(config, in_channels=NUM_SAR))

    def fuse(self, f_s1: torch.Tensor, f_s2: torch.Tensor | None = None) -> torch.Tensor:
        """Head over concatenated features; returns probabilities (N, 1, H, W)."""
        x = f_s1 if f_s2 is None else torch.cat([f_s1, f_s2], dim=1)
        return torch.sigmoid(self.fusion_head(x))

    def forward(self, sar, optical=None, available=None, mode: str = "auto") -> list[ForwardOutput]:
        """Run a batch.

        ``sar`` is (N, 2, H, W); ``optical`` is (N, 4, H, W) or None;
        ``available`` is a bool tensor (N,) flagging rows of ``optical`` that
        hold real data (defaults to all rows when ``optical`` is given).
        """
        if mode not in MODES:
            raise ValueError(f"unknown mode {mode!r}, expected one of {MODES}")
        n = sar.shape[0]
        if available is None:
            available = torch.full((n,), optical is not None, dtype=torch.bool)
        available = available.to(torch.bool)
        if optical is None and bool(available.any()):
            raise ValueError("available flags set but no optical tensor given")
        self.config.check_size(*sar.shape[-2:])

        flags = available.tolist()
        f_s1 = self.sar_extractor(sar)
        if self.variant == "unimodal-sar":
            p = self.fuse(f_s1)
            return [ForwardOutput(self.variant, flags[i], p_sar_path=p[i], f_s1=f_s1[i]) for i in range(n)]

        if self.variant == "ds-zerofill":
            if optical is None:
                opt = sar.new_zeros((n, NUM_OPTICAL, *sar.shape[-2:]))
            else:
                opt = torch.where(available[:, None, None, None], optical, torch.zeros_like(optical))
            f_s2 = self.optical_extractor(opt)
            p = self.fuse(f_s1, f_s2)
            return [ForwardOutput(self.variant, flags[i], p_fused=p[i], f_s2=f_s2[i], f_s1=f_s1[i])
                    for i in range(n)]

        f_hat = self.reconstruction_net(sar)
        p_sar = self.fuse(f_s1, f_hat)
        use_optical = available if mode == "auto" else torch.zeros_like(available)
        idx = torch.nonzero(use_optical).flatten().tolist()
        fused = {}
        if idx:
            f_s2 = self.optical_extractor(optical[idx])
            p_fused = self.fuse(f_s1[idx], f_s2)
            fused = {i: (p_fused[k], f_s2[k]) for k, i in enumerate(idx)}
        outs = []
        for i in range(n):
            pf, fs2 = fused.get(i, (None, None))
            outs.append(ForwardOutput(self.variant, flags[i], p_fused=pf, p_sar_path=p_sar[i],
                                      f_s2=fs2, f_s2_hat=f_hat[i], f_s1=f_s1[i]))
        return outs


def build_model(variant: str, backbone_config: BackboneConfig | None = None, seed: int = 0,
                patch_size: int | None = None) -> ModelBundle:
    """Build a variant with parameters initialised deterministically from ``seed``."""
    config = backbone_config or BackboneConfig()
    if patch_size is not None:
        config.check_size(patch_size)
    with torch.random.fork_rng(devices=[]):
        torch.manual_seed(seed)
        return ModelBundle(variant, config)


def batch_tensors(samples: Sequence[Sample]):
    """Stack samples into (sar, optical-or-None, available, label) tensors."""
    sar = torch.from_numpy(np.stack([s.sar for s in samples]))
    label = torch.from_numpy(np.stack([s.label for s in samples]))
    available = torch.tensor([s.optical_available for s in samples], dtype=torch.bool)
    optical = None
    if bool(available.any()):
        optical = torch.from_numpy(np.stack([
            s.optical if s.optical_available else zero_fill_optical(s).optical for s in samples
        ]))
    return sar, optical, available, label


def forward(bundle: ModelBundle, sample: Sample, mode: str = "auto") -> ForwardOutput:
    """Forward pass for a single sample."""
    sar, optical, available, _ = batch_tensors([sample])
    return bundle(sar, optical, available, mode)[0]


def parameter_count(module: nn.Module | None) -> int:
    if module is None:
        return 0
    return sum(p.numel() for p in module.parameters())


def save_checkpoint(bundle: ModelBundle, path: str | Path, seed: int, **extra) -> None:
    """Save parameters, backbone config, variant and seed in one torch file."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    torch.save({
        "format": CHECKPOINT_FORMAT,
        "version": CHECKPOINT_VERSION,
        "variant": bundle.variant,
        "backbone_config": asdict(bundle.config),
        "seed": int(seed),
        "state_dict": bundle.state_dict(),
        "extra": extra,
    }, path)


def load_checkpoint(path: str | Path) -> tuple[ModelBundle, dict]:
    blob = torch.load(path, map_location="cpu", weights_only=False)
    if not isinstance(blob, dict) or blob.get("format") != CHECKPOINT_FORMAT:
        raise ValueError(f"{path} is not a {CHECKPOINT_FORMAT} file")
    if blob.get("version") != CHECKPOINT_VERSION:
        raise ValueError(f"{path}: checkpoint version {blob.get('version')}, expected {CHECKPOINT_VERSION}")
    bundle = ModelBundle(blob["variant"], BackboneConfig(**blob["backbone_config"]))
    bundle.load_state_dict(blob["state_dict"])
    bundle.eval()
    return bundle, blob
