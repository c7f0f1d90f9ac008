"""
Confusion counts, F1/IoU, stratified evaluation and Table-style reports.

Metrics pool pixel counts over every tile of a stratum before computing
F1 and IoU (micro-averaging). Strata are ``all``, ``multi-modal`` and
``missing-modality``; the latter two partition ``all`` by the sample's
``optical_available`` flag.
"""

from __future__ import annotations

import csv
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Iterable

import numpy as np
import torch
import torch.nn.functional as F

from .data import Dataset, Sample
from .models import ModelBundle, batch_tensors

STRATA = ("all", "multi-modal", "missing-modality")
CSV_FIELDS = ("variant", "stratum", "seed", "f1", "iou", "tp", "fp", "fn", "tn")


@dataclass(frozen=True)
class ConfusionCounts:
    tp: int = 0
    fp: int = 0
    fn: int = 0
    tn: int = 0

    def __add__(self, other: "ConfusionCounts") -> "ConfusionCounts":
        return ConfusionCounts(self.tp + other.tp, self.fp + other.fp, self.fn + other.fn, self.tn + other.tn)

    @property
    def total(self) -> int:
        return self.tp + self.fp + self.fn + self.tn


def confusion(pred, label, threshold: float = 0.5) -> ConfusionCounts:
    """Binarise ``pred`` at ``threshold`` (>= is positive) and count against ``label``."""
    pred = np.asarray(pred)
    label = np.asarray(label)
    if pred.shape != label.shape:
        raise ValueError(f"pred shape {pred.shape} != label shape {label.shape}")
    if not 0 < threshold < 1:
        raise ValueError(f"threshold must lie in (0, 1), got {threshold}")
    p = pred >= threshold
    y = label > 0.5
    tp = int(np.count_nonzero(p & y))
    fp = int(np.count_nonzero(p & ~y))
    fn = int(np.count_nonzero(~p & y))
    return ConfusionCounts(tp, fp, fn, int(p.size) - tp - fp - fn)


def f1_iou(counts: ConfusionCounts, empty_value: float = 1.0) -> tuple[float, float]:
    """F1 = TP / (TP + (FP + FN)/2), IoU = TP / (TP + FP + FN).

    With no positives anywhere (TP = FP = FN = 0) both are ``empty_value``.
    """
    tp, fp, fn = counts.tp, counts.fp, counts.fn
    if tp == 0 and fp == 0 and fn == 0:
        return float(empty_value), float(empty_value)
    return tp / (tp + 0.5 * (fp + fn)), tp / (tp + fp + fn)


def _pad_amount(size: int, divisor: int) -> int:
    return (-size) % divisor


@torch.no_grad()
def predict(bundle: ModelBundle, sample: Sample, mode: str = "auto") -> np.ndarray:
    """Full-tile probability map (H, W); reflect-pads to the U-Net divisor and crops back."""
    sar, optical, available, _ = batch_tensors([sample])
    h, w = sample.height, sample.width
    d = bundle.config.divisor
    ph, pw = _pad_amount(h, d), _pad_amount(w, d)
    if ph or pw:
        pad = (0, pw, 0, ph)
        sar = F.pad(sar, pad, mode="reflect")
        if optical is not None:
            optical = F.pad(optical, pad, mode="reflect")
    out = bundle(sar, optical, available, mode)[0]
    return out.prediction[0, :h, :w].numpy()


AGGREGATIONS = ("pooled", "per-tile")


@dataclass
class StratumResult:
    """Pooled counts of a stratum; ``per_tile`` holds tile metrics when averaging per tile."""
    counts: ConfusionCounts
    num_samples: int
    per_tile: list[tuple[float, float]] | None = None

    def _metrics(self) -> tuple[float, float]:
        if self.per_tile is None:
            return f1_iou(self.counts)
        arr = np.asarray(self.per_tile, dtype=np.float64)
        return float(arr[:, 0].mean()), float(arr[:, 1].mean())

    @property
    def f1(self) -> float:
        return self._metrics()[0]

    @property
    def iou(self) -> float:
        return self._metrics()[1]


def evaluate(bundle: ModelBundle, dataset: Dataset | Iterable[Sample], threshold: float = 0.5,
             mode: str = "auto", exclude_empty: bool = False,
             aggregation: str = "pooled") -> dict[str, StratumResult]:
    """Per-stratum counts and metrics; empty strata are omitted.

    ``aggregation="pooled"`` (default) computes F1/IoU from counts summed
    over the stratum; ``"per-tile"`` averages tile-level metrics instead.
    ``exclude_empty`` drops tiles whose label and thresholded prediction are
    both all-background.
    """
    if aggregation not in AGGREGATIONS:
        raise ValueError(f"aggregation must be one of {AGGREGATIONS}, got {aggregation!r}")
    was_training = bundle.training
    bundle.eval()
    counts = {"multi-modal": [], "missing-modality": []}
    try:
        for sample in dataset:
            c = confusion(predict(bundle, sample, mode), sample.label[0], threshold)
            if exclude_empty and c.tp == c.fp == c.fn == 0:
                continue
            counts["multi-modal" if sample.optical_available else "missing-modality"].append(c)
    finally:
        bundle.train(was_training)
    if not counts["multi-modal"] and not counts["missing-modality"]:
        raise ValueError("evaluate needs a non-empty dataset")
    per_tile = aggregation == "per-tile"

    def make(items: list[ConfusionCounts]) -> StratumResult:
        tiles = [f1_iou(c) for c in items] if per_tile else None
        return StratumResult(sum(items, ConfusionCounts()), len(items), tiles)

    result = {s: make(counts[s]) for s in ("multi-modal", "missing-modality") if counts[s]}
    result["all"] = make(counts["multi-modal"] + counts["missing-modality"])
    return {s: result[s] for s in STRATA if s in result}


# ---------------------------------------------------------------------------
# Cross-seed tables
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class EvalRecord:
    variant: str
    stratum: str
    seed: int
    f1: float
    iou: float
    tp: int
    fp: int
    fn: int
    tn: int


@dataclass
class EvalTable:
    records: list[EvalRecord] = field(default_factory=list)

    def add_result(self, variant: str, seed: int, result: dict[str, StratumResult]) -> None:
        for stratum, r in result.items():
            c = r.counts
            self.records.append(EvalRecord(variant, stratum, int(seed), r.f1, r.iou, c.tp, c.fp, c.fn, c.tn))

    def extend(self, other: "EvalTable") -> None:
        self.records.extend(other.records)

    @property
    def variants(self) -> list[str]:
        return list(dict.fromkeys(r.variant for r in self.records))

    def seeds(self, variant: str) -> list[int]:
        return sorted({r.seed for r in self.records if r.variant == variant})

    def values(self, variant: str, stratum: str, metric: str) -> dict[int, float]:
        return {r.seed: getattr(r, metric) for r in self.records
                if r.variant == variant and r.stratum == stratum}

    def aggregate(self, variant: str, stratum: str, metric: str) -> tuple[float, float] | None:
        """(mean, population std) across seeds, or None for an absent stratum."""
        vals = list(self.values(variant, stratum, metric).values())
        if not vals:
            return None
        arr = np.asarray(vals, dtype=np.float64)
        return float(arr.mean()), float(arr.std(ddof=0))


def write_csv(table: EvalTable, path: str | Path) -> None:
    """Per-seed rows followed by ``mean`` and ``std`` aggregate rows."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="") as f:
        w = csv.writer(f)
        w.writerow(CSV_FIELDS)
        for r in table.records:
            w.writerow([r.variant, r.stratum, r.seed, repr(r.f1), repr(r.iou), r.tp, r.fp, r.fn, r.tn])
        for variant in table.variants:
            for stratum in STRATA:
                f1, iou = table.aggregate(variant, stratum, "f1"), table.aggregate(variant, stratum, "iou")
                if f1 is None:
                    continue
                w.writerow([variant, stratum, "mean", repr(f1[0]), repr(iou[0]), "", "", "", ""])
                w.writerow([variant, stratum, "std", repr(f1[1]), repr(iou[1]), "", "", "", ""])


def read_csv(path: str | Path) -> EvalTable:
    """Rebuild an EvalTable from the per-seed rows; aggregate rows are skipped."""
    table = EvalTable()
    with open(path, newline="") as f:
        reader = csv.DictReader(f)
        if tuple(reader.fieldnames or ()) != CSV_FIELDS:
            raise ValueError(f"{path}: unexpected CSV header {reader.fieldnames}")
        for row in reader:
            if row["seed"] in ("mean", "std"):
                continue
            table.records.append(EvalRecord(
                row["variant"], row["stratum"], int(row["seed"]), float(row["f1"]), float(row["iou"]),
                int(row["tp"]), int(row["fp"]), int(row["fn"]), int(row["tn"])))
    return table


def markdown_table(table: EvalTable) -> str:
    headers = ["Method", "All F1", "All IoU", "Multi-modal F1", "Multi-modal IoU",
               "Missing F1", "Missing IoU"]
    columns = [(s, m) for s in STRATA for m in ("f1", "iou")]
    best = {}
    for col in columns:
        means = [agg[0] for v in table.variants if (agg := table.aggregate(v, *col)) is not None]
        best[col] = max(means) if means else None
    lines = ["| " + " | ".join(headers) + " |", "|" + "---|" * len(headers)]
    for variant in table.variants:
        cells = [variant]
        for col in columns:
            agg = table.aggregate(variant, *col)
            if agg is None:
                cells.append("n/a")
            elif math.isclose(agg[0], best[col], rel_tol=0, abs_tol=1e-12):
                cells.append(f"**{agg[0]:.3f}** ± **{agg[1]:.3f}**")
            else:
                cells.append(f"{agg[0]:.3f} ± {agg[1]:.3f}")
        lines.append("| " + " | ".join(cells) + " |")
    return "\n".join(lines) + "\n"


def plot_table(table: EvalTable, path: str | Path, metric: str = "f1") -> None:
    import matplotlib
    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    variants = table.variants
    x = np.arange(len(STRATA))
    width = 0.8 / max(1, len(variants))
    fig, ax = plt.subplots(figsize=(7, 4))
    for i, variant in enumerate(variants):
        aggs = [table.aggregate(variant, s, metric) or (np.nan, 0.0) for s in STRATA]
        ax.bar(x + i * width, [a[0] for a in aggs], width, yerr=[a[1] for a in aggs],
               capsize=3, label=variant)
    ax.set_xticks(x + width * (len(variants) - 1) / 2)
    ax.set_xticklabels(STRATA)
    ax.set_ylabel(metric.upper())
    ax.set_ylim(0, 1)
    ax.legend()
    fig.tight_layout()
    fig.savefig(path, dpi=100)
    plt.close(fig)


def report(table: EvalTable, out: str | Path) -> dict[str, Path]:
    """Write results.csv, results.md and f1/iou bar charts to ``out``."""
    if not table.records:
        raise ValueError("report needs at least one variant and one seed")
    out = Path(out)
    out.mkdir(parents=True, exist_ok=True)
    paths = {"csv": out / "results.csv", "markdown": out / "results.md",
             "f1_plot": out / "results_f1.png", "iou_plot": out / "results_iou.png"}
    write_csv(table, paths["csv"])
    paths["markdown"].write_text(markdown_table(table))
    plot_table(table, paths["f1_plot"], "f1")
    plot_table(table, paths["iou_plot"], "iou")
    return paths


def result_to_dict(result: dict[str, StratumResult]) -> dict:
    return {s: {"f1": r.f1, "iou": r.iou, "num_samples": r.num_samples, **asdict(r.counts)}
            for s, r in result.items()}


def check_orderings(table: EvalTable, proposed: str = "proposed", ds: str = "ds-zerofill",
                    unimodal: str = "unimodal-sar", min_seed_fraction: float = 2 / 3) -> list[tuple[str, bool, str]]:
    """Qualitative ordering checks between the three variants.

    (a) proposed beats unimodal-sar on multi-modal F1 and (b) proposed beats
    ds-zerofill on missing-modality F1, each on at least ``min_seed_fraction``
    of the paired seeds; (c) proposed mean F1 on ``all`` is at least each
    baseline's.
    """
    checks = []

    def paired(a: str, b: str, stratum: str):
        va, vb = table.values(a, stratum, "f1"), table.values(b, stratum, "f1")
        seeds = sorted(set(va) & set(vb))
        wins = sum(va[s] > vb[s] for s in seeds)
        ma, mb = table.aggregate(a, stratum, "f1"), table.aggregate(b, stratum, "f1")
        if ma is None or mb is None or not seeds:
            return False, f"stratum {stratum} missing for {a} or {b}"
        ok = wins >= math.ceil(min_seed_fraction * len(seeds) - 1e-9)
        return ok, f"{a} {ma[0]:.4f} vs {b} {mb[0]:.4f}; wins on {wins}/{len(seeds)} seeds"

    checks.append(("(a) proposed > unimodal-sar on multi-modal F1", *paired(proposed, unimodal, "multi-modal")))
    checks.append(("(b) proposed > ds-zerofill on missing-modality F1", *paired(proposed, ds, "missing-modality")))
    p_all = table.aggregate(proposed, "all", "f1")
    for other in (ds, unimodal):
        o_all = table.aggregate(other, "all", "f1")
        if p_all is None or o_all is None:
            checks.append((f"(c) proposed >= {other} on all F1", False, "missing results"))
        else:
            checks.append((f"(c) proposed >= {other} on all F1", p_all[0] >= o_all[0],
                           f"{p_all[0]:.4f} vs {o_all[0]:.4f}"))
    return checks

