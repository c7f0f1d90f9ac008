"""Power Jaccard, feature similarity, the two-case sample loss and batch sum."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np
import torch

from .models import ForwardOutput

MULTI_MODAL = "multi-modal"
MISSING_MODALITY = "missing-modality"


@dataclass(frozen=True)
class LossConfig:
    phi: float = 1e-2
    jaccard_power: float = 2.0
    smoothing: float = 1.0
    similarity_detach_target: bool = True
    similarity_reduction: str = "mean"

    def __post_init__(self):
        if self.similarity_reduction not in ("mean", "sum"):
            raise ValueError(f"similarity_reduction must be 'mean' or 'sum', got {self.similarity_reduction!r}")
        if self.phi < 0:
            raise ValueError(f"phi must be >= 0, got {self.phi}")
        if self.jaccard_power < 1:
            raise ValueError(f"jaccard_power must be >= 1, got {self.jaccard_power}")
        if self.smoothing <= 0:
            raise ValueError(f"smoothing must be > 0, got {self.smoothing}")


def power_jaccard(pred: torch.Tensor, target: torch.Tensor, config: LossConfig = LossConfig()) -> torch.Tensor:
    """1 - (sum(p*y) + eps) / (sum(p^k) + sum(y^k) - sum(p*y) + eps), summed over all pixels."""
    if pred.shape != target.shape:
        raise ValueError(f"pred shape {tuple(pred.shape)} != target shape {tuple(target.shape)}")
    with torch.no_grad():
        if pred.numel() and (pred.min() < 0 or pred.max() > 1):
            raise ValueError("pred must lie in [0, 1]")
    target = target.to(pred.dtype)
    k, eps = config.jaccard_power, config.smoothing
    inter = (pred * target).sum()
    denom = pred.pow(k).sum() + target.pow(k).sum() - inter + eps
    return 1.0 - (inter + eps) / denom


def power_jaccard_grad(pred: np.ndarray, target: np.ndarray, config: LossConfig = LossConfig()) -> np.ndarray:
    """Hand-derived gradient of :func:`power_jaccard` with respect to ``pred``."""
    p = np.asarray(pred, dtype=np.float64)
    y = np.asarray(target, dtype=np.float64)
    k, eps = config.jaccard_power, config.smoothing
    num = (p * y).sum() + eps
    den = (p ** k).sum() + (y ** k).sum() - (p * y).sum() + eps
    dnum = y
    dden = k * p ** (k - 1) - y
    return -(dnum * den - num * dden) / den ** 2


def feature_similarity(f_s2: torch.Tensor, f_s2_hat: torch.Tensor, detach_target: bool = True,
                       reduction: str = "mean") -> torch.Tensor:
    """Squared difference between optical features and their reconstruction (mean or sum)."""
    if f_s2.shape != f_s2_hat.shape:
        raise ValueError(f"feature shapes differ: {tuple(f_s2.shape)} vs {tuple(f_s2_hat.shape)}")
    target = f_s2.detach() if detach_target else f_s2
    sq = (f_s2_hat - target).pow(2)
    return sq.sum() if reduction == "sum" else sq.mean()


@dataclass
class LossReport:
    case: str
    total: torch.Tensor
    supervised_sar_path: torch.Tensor | None = None
    supervised_fused: torch.Tensor | None = None
    similarity: torch.Tensor | None = None

    def as_dict(self) -> dict:
        def f(v):
            return None if v is None else float(v.detach())
        return {"case": self.case, "total": f(self.total), "supervised_fused": f(self.supervised_fused),
                "supervised_sar_path": f(self.supervised_sar_path), "similarity": f(self.similarity)}


def sample_loss(output: ForwardOutput, label: torch.Tensor, config: LossConfig = LossConfig()) -> LossReport:
    """Loss of one sample.

    For the proposed variant the case follows the outputs: with optical
    features present the loss is PJ(p_fused) + PJ(p_sar_path) + phi * L2,
    otherwise PJ(p_sar_path) alone. Baselines have a single supervised term
    on their only prediction; the case then mirrors the availability flag.
    """
    if output.variant != "proposed":
        case = MULTI_MODAL if output.optical_available else MISSING_MODALITY
        if output.p_fused is not None:
            term = power_jaccard(output.p_fused, label, config)
            return LossReport(case, term, supervised_fused=term)
        term = power_jaccard(output.p_sar_path, label, config)
        return LossReport(case, term, supervised_sar_path=term)

    if (output.p_fused is None) != (output.f_s2 is None):
        raise RuntimeError("inconsistent forward output: p_fused and f_s2 must be jointly present or absent")
    if output.p_sar_path is None or output.f_s2_hat is None:
        raise RuntimeError("proposed forward output lacks the reconstructed-feature path")
    sar_term = power_jaccard(output.p_sar_path, label, config)
    if output.p_fused is None:
        return LossReport(MISSING_MODALITY, sar_term, supervised_sar_path=sar_term)
    fused_term = power_jaccard(output.p_fused, label, config)
    sim = feature_similarity(output.f_s2, output.f_s2_hat, config.similarity_detach_target,
                             config.similarity_reduction)
    total = fused_term + sar_term + config.phi * sim
    return LossReport(MULTI_MODAL, total, supervised_sar_path=sar_term, supervised_fused=fused_term, similarity=sim)


def batch_loss(reports: Sequence[LossReport]) -> torch.Tensor:
    """Sum of per-sample totals, left to right in the given order."""
    if not reports:
        raise ValueError("batch_loss needs at least one report")
    total = reports[0].total
    for r in reports[1:]:
        total = total + r.total
    return total
