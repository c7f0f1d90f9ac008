"""
Synthetic SAR/optical/label time series with a known cross-modal map.

Each site owns a fixed set of rectangular buildings, each with an
appearance time, so the built-up area of a site never shrinks over time.
SAR is a blurred rendering of the label plus smooth building-free
clutter (bright terrain), with multiplicative unit-mean gamma speckle.
Optical is ``optical_from_sar(sar, label)`` plus Gaussian noise of std
``cross_modal_noise``:

    optical[c] = sigmoid(a_c * mean3(VV) + b_c * mean3(VH) + d_c * label + e_c)

where ``mean3`` is a 3x3 local mean (reflect border) and the coefficients
are ``OPTICAL_COEFFS``. Each affine map is invertible in its argument.
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np
from scipy.ndimage import gaussian_filter, uniform_filter

from .data import IDENTITY_NORMALIZATION, Sample, sample_rng, write_dataset

# rows: blue, green, red, nir; columns: VV, VH, label, bias.
# Background maps to dark reflectance (~0.02), buildings to bright (~0.7).
OPTICAL_COEFFS = np.array([
    [1.5, 1.0, 5.0, -4.8],
    [1.5, 1.5, 5.5, -5.0],
    [1.0, 2.0, 6.0, -5.2],
    [2.0, 1.0, 4.0, -4.5],
])

SPLIT_RATIO = (41, 15, 14)
SPLIT_NAMES = ("train", "val", "test")

# built-up fraction targets at the first and last timestamp
_DENSITY_START = 0.08
_DENSITY_END = 0.30

_SITE_STREAM = 0
_SCENE_STREAM = 1
_DROPOUT_STREAM = 2
_SPLIT_STREAM = 3


@dataclass(frozen=True)
class SimConfig:
    num_sites: int = 10
    timestamps_per_site: int = 24
    tile_size: int = 64
    dropout_rate: float = 0.12
    cross_modal_noise: float = 0.02
    seed: int = 0
    speckle_looks: float | None = 1.0  # None: speckle-free SAR
    clutter: float = 0.3

    def __post_init__(self):
        if self.num_sites < 1 or self.timestamps_per_site < 1:
            raise ValueError("num_sites and timestamps_per_site must be positive")
        if self.tile_size < 64:
            raise ValueError(f"tile_size must be >= 64, got {self.tile_size}")
        if not 0.0 <= self.dropout_rate <= 1.0:
            raise ValueError(f"dropout_rate must lie in [0, 1], got {self.dropout_rate}")
        if self.cross_modal_noise < 0:
            raise ValueError(f"cross_modal_noise must be >= 0, got {self.cross_modal_noise}")
        if (self.speckle_looks is not None and self.speckle_looks <= 0) or self.clutter < 0:
            raise ValueError("speckle_looks must be > 0 (or None) and clutter >= 0")

    @classmethod
    def from_json(cls, path: str | Path, **overrides) -> "SimConfig":
        with open(path) as f:
            values = json.load(f)
        values.update({k: v for k, v in overrides.items() if v is not None})
        return cls(**values)


def _sigmoid(x):
    return 1.0 / (1.0 + np.exp(-x))


def optical_from_sar(sar: np.ndarray, label: np.ndarray) -> np.ndarray:
    """Noise-free optical raster (4, H, W) implied by SAR (2, H, W) and label (1, H, W)."""
    m = uniform_filter(sar.astype(np.float64), size=(1, 3, 3), mode="reflect")
    y = label[0].astype(np.float64)
    z = (OPTICAL_COEFFS[:, 0, None, None] * m[0]
         + OPTICAL_COEFFS[:, 1, None, None] * m[1]
         + OPTICAL_COEFFS[:, 2, None, None] * y
         + OPTICAL_COEFFS[:, 3, None, None])
    return _sigmoid(z)


def sar_mean_from_label(label: np.ndarray, clutter: np.ndarray | None = None, strength: float = 0.0) -> np.ndarray:
    """Speckle-free SAR backscatter (2, H, W): smooth function of the label and clutter field."""
    y = label[0].astype(np.float64)
    vv = 0.2 + 0.45 * uniform_filter(y, size=5, mode="reflect")
    vh = 0.12 + 0.3 * uniform_filter(y, size=9, mode="reflect")
    if clutter is not None and strength > 0:
        vv = vv + strength * clutter
        vh = vh + 0.5 * strength * clutter
    return np.stack([vv, vh])


def clutter_field(rng: np.random.Generator, size: int) -> np.ndarray:
    """Smooth random field in [0, 1] with blob-like bright areas."""
    field = gaussian_filter(rng.standard_normal((size, size)), sigma=4.0, mode="wrap")
    field = (field - field.min()) / (np.ptp(field) + 1e-12)
    return np.clip(2.0 * field - 0.8, 0.0, 1.0)


def _site_buildings(config: SimConfig, site_index: int) -> np.ndarray:
    """Rectangles (top, left, h, w, appear_t) for one site."""
    rng = sample_rng(config.seed, _SITE_STREAM, site_index)
    size = config.tile_size
    n = config.timestamps_per_site
    lo, hi = 3, max(4, size // 8)
    mean_area = ((lo + hi) / 2.0) ** 2
    count = max(1, int(round(_DENSITY_END * size * size / mean_area * 1.3)))
    h = rng.integers(lo, hi + 1, count)
    w = rng.integers(lo, hi + 1, count)
    top = rng.integers(0, size - h + 1)
    left = rng.integers(0, size - w + 1)
    # a share of buildings exists from the start; the rest appear uniformly over time
    start_share = _DENSITY_START / _DENSITY_END
    appear = np.where(rng.random(count) < start_share, 1, rng.integers(1, n + 1, count))
    return np.stack([top, left, h, w, appear], axis=1)


def render_label(config: SimConfig, site_index: int, t: int) -> np.ndarray:
    size = config.tile_size
    label = np.zeros((1, size, size), dtype=np.float32)
    for top, left, h, w, appear in _site_buildings(config, site_index):
        if appear <= t:
            label[0, top:top + h, left:left + w] = 1.0
    return label


def site_id(site_index: int) -> str:
    return f"site_{site_index:03d}"


def generate_scene(config: SimConfig, site_index: int, t: int) -> Sample:
    """Deterministic synthetic sample for (site_index, t), t in [1, timestamps_per_site]."""
    if not 0 <= site_index < config.num_sites:
        raise ValueError(f"site_index {site_index} outside [0, {config.num_sites})")
    if not 1 <= t <= config.timestamps_per_site:
        raise ValueError(f"t {t} outside [1, {config.timestamps_per_site}]")
    label = render_label(config, site_index, t)
    rng = sample_rng(config.seed, _SCENE_STREAM, site_index, t)
    clutter = clutter_field(rng, config.tile_size)
    sar = sar_mean_from_label(label, clutter, config.clutter)
    looks = config.speckle_looks
    speckle = rng.gamma(looks, 1.0 / looks, size=sar.shape) if looks is not None else None
    if speckle is not None:
        sar = sar * speckle
    sar = np.clip(sar, 0.0, 1.0).astype(np.float32)

    available = bool(sample_rng(config.seed, _DROPOUT_STREAM, site_index, t).random() >= config.dropout_rate)
    optical = None
    if available:
        opt = optical_from_sar(sar, label)
        if config.cross_modal_noise > 0:
            opt = np.clip(opt + rng.normal(0.0, config.cross_modal_noise, opt.shape), 0.0, 1.0)
        optical = opt.astype(np.float32)
    return Sample(sar, optical, label, available, site_id(site_index), t)


def split_sizes(num_sites: int, ratio=SPLIT_RATIO) -> tuple[int, ...]:
    """Largest-remainder apportionment of sites to splits, each split nonempty."""
    k = len(ratio)
    if num_sites < k:
        raise ValueError(f"need at least {k} sites to form {k} nonempty splits, got {num_sites}")
    total = sum(ratio)
    quotas = [num_sites * r / total for r in ratio]
    sizes = [max(1, int(np.floor(q))) for q in quotas]
    remainders = [q - np.floor(q) for q in quotas]
    while sum(sizes) < num_sites:
        i = max(range(k), key=lambda j: (remainders[j], -j))
        sizes[i] += 1
        remainders[i] = -1.0
    while sum(sizes) > num_sites:
        i = max((j for j in range(k) if sizes[j] > 1), key=lambda j: sizes[j])
        sizes[i] -= 1
    return tuple(sizes)


def assign_sites(config: SimConfig) -> dict[str, list[int]]:
    sizes = split_sizes(config.num_sites)
    order = sample_rng(config.seed, _SPLIT_STREAM).permutation(config.num_sites)
    out, start = {}, 0
    for name, n in zip(SPLIT_NAMES, sizes):
        out[name] = sorted(int(i) for i in order[start:start + n])
        start += n
    return out


def generate_dataset(config: SimConfig, out_root: str | Path) -> dict:
    """Write a full train/val/test dataset (split by site) and return its manifest."""
    out_root = Path(out_root)
    sites = assign_sites(config)
    splits = {
        name: [generate_scene(config, i, t)
               for i in idx for t in range(1, config.timestamps_per_site + 1)]
        for name, idx in sites.items()
    }
    try:
        return write_dataset(out_root, splits, IDENTITY_NORMALIZATION, extra={"simulator": asdict(config)})
    except OSError as exc:
        raise OSError(f"cannot write dataset under {out_root}: {exc}") from exc

