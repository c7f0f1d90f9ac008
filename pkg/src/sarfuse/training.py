"""
Seeded training with mixed-modality mini-batches, AdamW and early stopping.

Per epoch the training tiles are shuffled with an epoch-derived seed and
each one is randomly cropped, flipped/rotated and (for multi-modal tiles)
has its optical image hidden with probability ``dropout_rate_train``. The
mini-batch cost is the plain sum of per-sample losses. Validation F1 on
full tiles drives early stopping; the best model is checkpointed.
"""

from __future__ import annotations

import csv
import json
import logging
import math
import time
from dataclasses import asdict, dataclass, field, fields, replace
from pathlib import Path

import numpy as np
import torch

from .data import Dataset, augment, hide_optical, load_dataset, random_crop, sample_rng
from .evaluation import evaluate
from .losses import LossConfig, batch_loss, sample_loss
from .models import VARIANTS, BackboneConfig, ConfigError, ModelBundle, batch_tensors, build_model, save_checkpoint

log = logging.getLogger(__name__)

CHECKPOINT_NAME = "best.pt"
RECORD_NAME = "run_record.json"
HISTORY_NAME = "history.csv"
SUMMARY_NAME = "experiment_summary.json"


class TrainingError(RuntimeError):
    pass


@dataclass(frozen=True)
class TrainConfig:
    variant: str = "proposed"
    learning_rate: float = 1e-5
    weight_decay: float = 0.01
    betas: tuple[float, float] = (0.9, 0.999)
    batch_size: int = 16
    max_epochs: int = 100
    patience: int = 10
    patch_size: int = 64
    seed: int = 0
    num_runs: int = 5
    dropout_rate_train: float = 0.1
    threshold: float = 0.5
    loss: LossConfig = field(default_factory=LossConfig)
    backbone: BackboneConfig = field(default_factory=BackboneConfig)

    def __post_init__(self):
        if self.variant not in VARIANTS:
            raise ConfigError(f"unknown variant {self.variant!r}, expected one of {VARIANTS}")
        if self.batch_size < 1:
            raise ConfigError("batch_size must be >= 1")
        if self.max_epochs < 1 or self.num_runs < 1:
            raise ConfigError("max_epochs and num_runs must be >= 1")
        if not 0 < self.patience < self.max_epochs:
            raise ConfigError(f"patience must lie in (0, max_epochs), got {self.patience}")
        if not 0 <= self.dropout_rate_train <= 1:
            raise ConfigError("dropout_rate_train must lie in [0, 1]")
        self.backbone.check_size(self.patch_size)

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, values: dict) -> "TrainConfig":
        values = dict(values)
        known = {f.name for f in fields(cls)}
        unknown = set(values) - known
        if unknown:
            raise ConfigError(f"unknown train config keys: {sorted(unknown)}")
        if isinstance(values.get("loss"), dict):
            values["loss"] = LossConfig(**values["loss"])
        if isinstance(values.get("backbone"), dict):
            values["backbone"] = BackboneConfig(**values["backbone"])
        if "betas" in values:
            values["betas"] = tuple(values["betas"])
        return cls(**values)


@dataclass
class RunRecord:
    seed: int
    best_epoch: int
    best_val_f1: float
    checkpoint: str
    val_f1: list[float]
    val_iou: list[float]
    train_loss: list[float]
    seconds: float

    @property
    def epochs_run(self) -> int:
        return len(self.val_f1)

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, values: dict) -> "RunRecord":
        return cls(**values)


class EarlyStopping:
    """Tracks the best score; signals a stop after ``patience`` epochs without strict improvement."""

    def __init__(self, patience: int):
        self.patience = patience
        self.best_score = -math.inf
        self.best_epoch = 0
        self.epoch = 0

    def step(self, score: float) -> tuple[bool, bool]:
        """Record one epoch's score; returns (improved, should_stop)."""
        self.epoch += 1
        improved = score > self.best_score
        if improved:
            self.best_score = score
            self.best_epoch = self.epoch
        return improved, self.epoch - self.best_epoch >= self.patience


def prepare_epoch(dataset: Dataset, config: TrainConfig, seed: int, epoch: int, worker: int = 0):
    """Shuffled, cropped, augmented and optically-dropped samples for one epoch."""
    order = sample_rng(seed, worker, epoch).permutation(len(dataset))
    out = []
    for idx in order:
        rng = sample_rng(seed, worker, epoch, int(idx))
        s = random_crop(dataset[int(idx)], config.patch_size, rng)
        s = augment(s, rng)
        out.append(hide_optical(s, rng, config.dropout_rate_train))
    return out


def train_step(bundle: ModelBundle, optimizer, samples, loss_config: LossConfig):
    """One optimiser step on a list of samples; returns (batch loss, per-sample reports)."""
    sar, optical, available, label = batch_tensors(samples)
    outputs = bundle(sar, optical, available)
    reports = [sample_loss(o, label[i], loss_config) for i, o in enumerate(outputs)]
    loss = batch_loss(reports)
    optimizer.zero_grad()
    loss.backward()
    optimizer.step()
    return loss.detach(), reports


def make_optimizer(bundle: ModelBundle, config: TrainConfig):
    return torch.optim.AdamW(bundle.parameters(), lr=config.learning_rate,
                             betas=config.betas, weight_decay=config.weight_decay)


def _write_history(path: Path, record: RunRecord) -> None:
    with open(path, "w", newline="") as f:
        w = csv.writer(f)
        w.writerow(["epoch", "val_f1", "val_iou", "train_loss"])
        for i, (f1, iou, loss) in enumerate(zip(record.val_f1, record.val_iou, record.train_loss), 1):
            w.writerow([i, repr(f1), repr(iou), repr(loss)])


def train(config: TrainConfig, dataset_root: str | Path, out_dir: str | Path,
          train_split: str = "train", val_split: str = "val") -> RunRecord:
    """Train one model and persist ``best.pt``, ``history.csv`` and ``run_record.json`` in ``out_dir``."""
    start = time.perf_counter()
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    train_set = load_dataset(dataset_root, train_split)
    val_set = load_dataset(dataset_root, val_split)
    if not len(train_set) or not len(val_set):
        raise ConfigError(f"empty split: {len(train_set)} train / {len(val_set)} validation samples")

    seed = config.seed
    torch.manual_seed(seed)
    bundle = build_model(config.variant, config.backbone, seed, config.patch_size)
    optimizer = make_optimizer(bundle, config)
    stopper = EarlyStopping(config.patience)
    ckpt = out_dir / CHECKPOINT_NAME
    val_f1, val_iou, train_losses = [], [], []

    for epoch in range(1, config.max_epochs + 1):
        bundle.train()
        samples = prepare_epoch(train_set, config, seed, epoch)
        epoch_loss = 0.0
        for b, i in enumerate(range(0, len(samples), config.batch_size)):
            loss, _ = train_step(bundle, optimizer, samples[i:i + config.batch_size], config.loss)
            if not torch.isfinite(loss):
                raise TrainingError(f"non-finite loss {float(loss)} at epoch {epoch}, batch {b}")
            epoch_loss += float(loss)
        result = evaluate(bundle, val_set, config.threshold)
        val_f1.append(result["all"].f1)
        val_iou.append(result["all"].iou)
        train_losses.append(epoch_loss / len(samples))
        improved, stop = stopper.step(val_f1[-1])
        if improved:
            save_checkpoint(bundle, ckpt, seed, epoch=epoch, val_f1=val_f1[-1], train_config=config.to_dict())
        log.info("%s seed %d epoch %d: loss %.4f val F1 %.4f IoU %.4f%s", config.variant, seed, epoch,
                 train_losses[-1], val_f1[-1], val_iou[-1], " *" if improved else "")
        if stop:
            break

    record = RunRecord(seed, stopper.best_epoch, stopper.best_score, str(ckpt),
                       val_f1, val_iou, train_losses, time.perf_counter() - start)
    _write_history(out_dir / HISTORY_NAME, record)
    with open(out_dir / RECORD_NAME, "w") as f:
        json.dump(record.to_dict(), f, indent=1)
    return record


def run_dir(out_dir: str | Path, seed: int) -> Path:
    return Path(out_dir) / f"seed_{seed}"


def run_experiment(config: TrainConfig, dataset_root: str | Path, out_dir: str | Path,
                   resume: bool = False) -> list[RunRecord]:
    """Train ``num_runs`` models with seeds seed, seed+1, ...; writes an experiment summary."""
    out_dir = Path(out_dir)
    records = []
    for k in range(config.num_runs):
        seed = config.seed + k
        rdir = run_dir(out_dir, seed)
        record_path = rdir / RECORD_NAME
        if resume and record_path.is_file() and (rdir / CHECKPOINT_NAME).is_file():
            with open(record_path) as f:
                records.append(RunRecord.from_dict(json.load(f)))
            log.info("%s seed %d already trained, skipping", config.variant, seed)
            continue
        try:
            records.append(train(replace(config, seed=seed), dataset_root, rdir))
        except Exception as exc:
            raise TrainingError(f"{config.variant} run with seed {seed} failed: {exc}") from exc
    summary = {
        "variant": config.variant,
        "config": config.to_dict(),
        "runs": [{k: v for k, v in r.to_dict().items() if k != "seconds"} for r in records],
        "best_val_f1_mean": float(np.mean([r.best_val_f1 for r in records])),
        "best_val_f1_std": float(np.std([r.best_val_f1 for r in records])),
    }
    out_dir.mkdir(parents=True, exist_ok=True)
    with open(out_dir / SUMMARY_NAME, "w") as f:
        json.dump(summary, f, indent=1)
    return records
