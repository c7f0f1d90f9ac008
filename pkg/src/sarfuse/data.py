"""
Sample model, on-disk dataset format, cropping/augmentation and zero-fill.

On-disk layout::

    <root>/manifest.json
    <root>/<site_id>/tNN_sar.bin      float32 LE, (2, H, W), C-order
    <root>/<site_id>/tNN_optical.bin  float32 LE, (4, H, W), only if available
    <root>/<site_id>/tNN_label.bin    float32 LE, (1, H, W), values in {0, 1}

Normalization parameters live in the manifest and are applied on load as
``(x - offset) / scale`` per channel, followed by an optional clip.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, replace
from pathlib import Path
from typing import Iterator, Mapping, Sequence

import numpy as np

FORMAT_VERSION = "1"
MANIFEST_NAME = "manifest.json"

SAR_CHANNELS = ("VV", "VH")
OPTICAL_CHANNELS = ("blue", "green", "red", "nir")
NUM_SAR = len(SAR_CHANNELS)
NUM_OPTICAL = len(OPTICAL_CHANNELS)

RASTER_DTYPE = np.dtype("<f4")

# SAR in dB clipped to [-25, 0] -> [0, 1]; optical reflectance / 10000 -> [0, 1]
SENTINEL_NORMALIZATION = {
    "sar": {"offset": [-25.0] * NUM_SAR, "scale": [25.0] * NUM_SAR, "clip": [0.0, 1.0]},
    "optical": {"offset": [0.0] * NUM_OPTICAL, "scale": [10000.0] * NUM_OPTICAL, "clip": [0.0, 1.0]},
}
IDENTITY_NORMALIZATION = {
    "sar": {"offset": [0.0] * NUM_SAR, "scale": [1.0] * NUM_SAR, "clip": None},
    "optical": {"offset": [0.0] * NUM_OPTICAL, "scale": [1.0] * NUM_OPTICAL, "clip": None},
}


class DatasetLoadError(Exception):
    """A raster referenced by the manifest is missing or unreadable."""


class ManifestFormatError(Exception):
    """The manifest does not match the expected schema/version."""


@dataclass(frozen=True)
class Sample:
    """One timestamp of one site: SAR, optional optical, building label."""

    sar: np.ndarray
    optical: np.ndarray | None
    label: np.ndarray
    optical_available: bool
    site_id: str = ""
    timestamp_index: int = 1

    def __post_init__(self):
        if self.sar.ndim != 3 or self.sar.shape[0] != NUM_SAR:
            raise ValueError(f"sar must have shape ({NUM_SAR}, H, W), got {self.sar.shape}")
        hw = self.sar.shape[1:]
        if self.label.shape != (1, *hw):
            raise ValueError(f"label shape {self.label.shape} does not match sar {self.sar.shape}")
        if self.optical_available != (self.optical is not None):
            raise ValueError("optical_available must be true iff an optical raster is present")
        if self.optical is not None and self.optical.shape != (NUM_OPTICAL, *hw):
            raise ValueError(f"optical shape {self.optical.shape} does not match sar {self.sar.shape}")

    @property
    def height(self) -> int:
        return self.sar.shape[1]

    @property
    def width(self) -> int:
        return self.sar.shape[2]

    def without_optical(self) -> "Sample":
        return replace(self, optical=None, optical_available=False)


def check_sample(sample: Sample) -> None:
    """Raise ValueError if rasters contain non-finite values or a non-binary label."""
    for name in ("sar", "optical", "label"):
        arr = getattr(sample, name)
        if arr is not None and not np.all(np.isfinite(arr)):
            raise ValueError(f"{name} raster of {sample.site_id}/t{sample.timestamp_index} has non-finite values")
    if not np.all((sample.label == 0) | (sample.label == 1)):
        raise ValueError(f"label of {sample.site_id}/t{sample.timestamp_index} is not binary")


class Dataset(Sequence):
    """Immutable, index-addressable collection of samples from one split."""

    def __init__(self, samples: Sequence[Sample], split: str = "", root: Path | None = None):
        self._samples = tuple(samples)
        self.split = split
        self.root = root

    def __len__(self) -> int:
        return len(self._samples)

    def __getitem__(self, index):
        if isinstance(index, slice):
            return Dataset(self._samples[index], self.split, self.root)
        return self._samples[index]

    def __iter__(self) -> Iterator[Sample]:
        return iter(self._samples)

    @property
    def site_ids(self) -> set[str]:
        return {s.site_id for s in self._samples}

    def missing_fraction(self) -> float:
        if not self._samples:
            return 0.0
        return sum(not s.optical_available for s in self._samples) / len(self._samples)

    def without_optical(self) -> "Dataset":
        return Dataset([s.without_optical() for s in self._samples], self.split, self.root)


# ---------------------------------------------------------------------------
# On-disk format
# ---------------------------------------------------------------------------

def _raster_name(timestamp_index: int, kind: str) -> str:
    return f"t{timestamp_index:02d}_{kind}.bin"


def write_raster(path: Path, array: np.ndarray) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    np.ascontiguousarray(array, dtype=RASTER_DTYPE).tofile(path)


def read_raster(path: Path, shape: tuple[int, int, int]) -> np.ndarray:
    try:
        flat = np.fromfile(path, dtype=RASTER_DTYPE)
    except OSError as exc:
        raise DatasetLoadError(f"cannot read raster {path}: {exc}") from exc
    expected = int(np.prod(shape))
    if flat.size != expected:
        raise DatasetLoadError(f"raster {path} holds {flat.size} values, expected {expected} for shape {shape}")
    return flat.reshape(shape).astype(np.float32)


def _check_normalization(norm) -> dict:
    if not isinstance(norm, Mapping):
        raise ManifestFormatError("normalization must be an object")
    out = {}
    for modality, nch in (("sar", NUM_SAR), ("optical", NUM_OPTICAL)):
        entry = norm.get(modality)
        if entry is None or "offset" not in entry or "scale" not in entry:
            raise ManifestFormatError(f"normalization.{modality} needs 'offset' and 'scale'")
        offset = np.asarray(entry["offset"], dtype=np.float64)
        scale = np.asarray(entry["scale"], dtype=np.float64)
        if offset.shape != (nch,) or scale.shape != (nch,):
            raise ManifestFormatError(f"normalization.{modality} must give {nch} offsets and scales")
        if np.any(scale == 0):
            raise ManifestFormatError(f"normalization.{modality}.scale contains zero")
        clip = entry.get("clip")
        out[modality] = {"offset": offset.tolist(), "scale": scale.tolist(),
                         "clip": None if clip is None else [float(clip[0]), float(clip[1])]}
    return out


def normalize(raster: np.ndarray, params: Mapping) -> np.ndarray:
    offset = np.asarray(params["offset"], dtype=np.float32)[:, None, None]
    scale = np.asarray(params["scale"], dtype=np.float32)[:, None, None]
    if np.all(offset == 0) and np.all(scale == 1):
        out = raster.copy()
    else:
        out = ((raster - offset) / scale).astype(np.float32)
    if params.get("clip") is not None:
        lo, hi = params["clip"]
        np.clip(out, lo, hi, out=out)
    return out


def write_dataset(
    root: str | Path,
    splits: Mapping[str, Sequence[Sample]],
    normalization: Mapping | None = None,
    extra: Mapping | None = None,
) -> dict:
    """Write samples per split under ``root`` and return the manifest dict.

    Rasters are written as given; ``normalization`` only records how the
    loader should transform them (identity by default).
    """
    root = Path(root)
    norm = _check_normalization(normalization or IDENTITY_NORMALIZATION)
    owner: dict[str, str] = {}
    manifest_splits: dict[str, list] = {}
    for split, samples in splits.items():
        records = []
        for s in samples:
            if owner.setdefault(s.site_id, split) != split:
                raise ValueError(f"site {s.site_id} appears in splits {owner[s.site_id]!r} and {split!r}")
            files = {"sar": f"{s.site_id}/{_raster_name(s.timestamp_index, 'sar')}",
                     "label": f"{s.site_id}/{_raster_name(s.timestamp_index, 'label')}"}
            write_raster(root / files["sar"], s.sar)
            write_raster(root / files["label"], s.label)
            if s.optical_available:
                files["optical"] = f"{s.site_id}/{_raster_name(s.timestamp_index, 'optical')}"
                write_raster(root / files["optical"], s.optical)
            records.append({
                "site_id": s.site_id,
                "timestamp_index": int(s.timestamp_index),
                "height": int(s.height),
                "width": int(s.width),
                "optical_available": bool(s.optical_available),
                "files": files,
            })
        manifest_splits[split] = records
    manifest = {
        "format_version": FORMAT_VERSION,
        "channels": {"sar": list(SAR_CHANNELS), "optical": list(OPTICAL_CHANNELS), "label": ["building"]},
        "normalization": norm,
        "splits": manifest_splits,
    }
    if extra:
        manifest.update(extra)
    root.mkdir(parents=True, exist_ok=True)
    with open(root / MANIFEST_NAME, "w") as f:
        json.dump(manifest, f, indent=1)
    return manifest


def read_manifest(root: str | Path) -> dict:
    path = Path(root) / MANIFEST_NAME
    if not path.is_file():
        raise DatasetLoadError(f"manifest not found: {path}")
    try:
        with open(path) as f:
            manifest = json.load(f)
    except json.JSONDecodeError as exc:
        raise ManifestFormatError(f"manifest {path} is not valid JSON: {exc}") from exc
    version = manifest.get("format_version") if isinstance(manifest, dict) else None
    if version != FORMAT_VERSION:
        raise ManifestFormatError(f"manifest {path} has format_version {version!r}, expected {FORMAT_VERSION!r}")
    if not isinstance(manifest.get("splits"), dict):
        raise ManifestFormatError(f"manifest {path} has no 'splits' object")
    manifest["normalization"] = _check_normalization(manifest.get("normalization"))
    seen: dict[str, str] = {}
    for split, records in manifest["splits"].items():
        for rec in records:
            other = seen.setdefault(rec.get("site_id"), split)
            if other != split:
                raise ManifestFormatError(f"site {rec.get('site_id')} appears in splits {other!r} and {split!r}")
    return manifest


def _load_record(root: Path, rec: Mapping, norm: Mapping) -> Sample:
    try:
        site_id = rec["site_id"]
        t = int(rec["timestamp_index"])
        h, w = int(rec["height"]), int(rec["width"])
        available = bool(rec["optical_available"])
        files = rec["files"]
        sar_path, label_path = root / files["sar"], root / files["label"]
        opt_path = root / files["optical"] if available else None
    except (KeyError, TypeError, ValueError) as exc:
        raise ManifestFormatError(f"malformed sample record {rec!r}: {exc}") from exc

    for path in (sar_path, label_path, opt_path):
        if path is not None and not path.is_file():
            raise DatasetLoadError(f"record {site_id}/t{t}: missing file {path}")
    sar = normalize(read_raster(sar_path, (NUM_SAR, h, w)), norm["sar"])
    label = read_raster(label_path, (1, h, w))
    optical = None
    if available:
        optical = normalize(read_raster(opt_path, (NUM_OPTICAL, h, w)), norm["optical"])
    sample = Sample(sar, optical, label, available, site_id, t)
    try:
        check_sample(sample)
    except ValueError as exc:
        raise DatasetLoadError(f"record {site_id}/t{t}: {exc}") from exc
    for arr in (sample.sar, sample.optical, sample.label):
        if arr is not None:
            arr.setflags(write=False)
    return sample


def load_dataset(root: str | Path, split: str) -> Dataset:
    """Load one split, applying the manifest's normalization."""
    root = Path(root)
    manifest = read_manifest(root)
    if split not in manifest["splits"]:
        raise ManifestFormatError(f"split {split!r} not in manifest (have {sorted(manifest['splits'])})")
    norm = manifest["normalization"]
    samples = [_load_record(root, rec, norm) for rec in manifest["splits"][split]]
    return Dataset(samples, split, root)


# ---------------------------------------------------------------------------
# Transforms
# ---------------------------------------------------------------------------

def _rasters(sample: Sample) -> dict[str, np.ndarray]:
    out = {"sar": sample.sar, "label": sample.label}
    if sample.optical is not None:
        out["optical"] = sample.optical
    return out


def crop(sample: Sample, top: int, left: int, size: int) -> Sample:
    window = (slice(None), slice(top, top + size), slice(left, left + size))
    return replace(sample, **{k: np.ascontiguousarray(v[window]) for k, v in _rasters(sample).items()})


def random_crop(sample: Sample, size: int = 64, rng: np.random.Generator | None = None) -> Sample:
    """Crop a ``size`` x ``size`` window, the same for every raster."""
    h, w = sample.height, sample.width
    if size < 1 or size > h or size > w:
        raise ValueError(f"crop size {size} does not fit a {h}x{w} sample")
    rng = rng if rng is not None else np.random.default_rng()
    top = int(rng.integers(0, h - size + 1))
    left = int(rng.integers(0, w - size + 1))
    return crop(sample, top, left, size)


# Dihedral group of the square, acting on (C, H, W) rasters.
DIHEDRAL_ELEMENTS = (
    "identity", "rot90", "rot180", "rot270",
    "flip_lr", "flip_ud", "transpose", "antitranspose",
)
_INVERSE = {"rot90": "rot270", "rot270": "rot90"}


def _apply(arr: np.ndarray, element: str) -> np.ndarray:
    if element == "identity":
        out = arr
    elif element == "rot90":
        out = np.rot90(arr, 1, axes=(1, 2))
    elif element == "rot180":
        out = np.rot90(arr, 2, axes=(1, 2))
    elif element == "rot270":
        out = np.rot90(arr, 3, axes=(1, 2))
    elif element == "flip_lr":
        out = arr[:, :, ::-1]
    elif element == "flip_ud":
        out = arr[:, ::-1, :]
    elif element == "transpose":
        out = arr.transpose(0, 2, 1)
    elif element == "antitranspose":
        out = np.rot90(arr, 2, axes=(1, 2)).transpose(0, 2, 1)
    else:
        raise ValueError(f"unknown dihedral element {element!r}")
    return np.ascontiguousarray(out)


def inverse_element(element: str) -> str:
    if element not in DIHEDRAL_ELEMENTS:
        raise ValueError(f"unknown dihedral element {element!r}")
    return _INVERSE.get(element, element)


def apply_dihedral(sample: Sample, element: str) -> Sample:
    if sample.height != sample.width:
        raise ValueError(f"dihedral transforms need a square patch, got {sample.height}x{sample.width}")
    return replace(sample, **{k: _apply(v, element) for k, v in _rasters(sample).items()})


def augment(sample: Sample, rng: np.random.Generator | None = None, return_element: bool = False):
    """Apply one uniformly drawn flip/rotation to all rasters of a square patch."""
    if sample.height != sample.width:
        raise ValueError(f"augment needs a square patch, got {sample.height}x{sample.width}")
    rng = rng if rng is not None else np.random.default_rng()
    element = DIHEDRAL_ELEMENTS[int(rng.integers(len(DIHEDRAL_ELEMENTS)))]
    out = apply_dihedral(sample, element)
    return (out, element) if return_element else out


def zero_fill_optical(sample: Sample) -> Sample:
    """Substitute an all-zero optical raster for a missing one.

    The flag keeps recording the ground truth, so a zero-filled sample still
    has ``optical_available`` false. Samples with optical data pass through.
    """
    if sample.optical is not None:
        return sample
    zeros = np.zeros((NUM_OPTICAL, sample.height, sample.width), dtype=np.float32)
    # bypass the availability invariant deliberately: this is an input substitution
    out = replace(sample, optical=None)
    object.__setattr__(out, "optical", zeros)
    return out


def hide_optical(sample: Sample, rng: np.random.Generator, rate: float) -> Sample:
    """Drop the optical raster of a multi-modal sample with probability ``rate``."""
    if sample.optical_available and rate > 0 and rng.random() < rate:
        return sample.without_optical()
    return sample


def sample_rng(seed: int, *keys: int) -> np.random.Generator:
    """Independent generator keyed by (seed, worker/epoch/index...)."""
    return np.random.default_rng(np.random.SeedSequence([int(seed), *map(int, keys)]))
