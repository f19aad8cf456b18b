"""Soft Dice losses, the consistency ramp-up and the combined training objective.

Probability maps here are torch tensors laid out ``(N, C, H, W)`` with
``C = 2`` (background, foreground).
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
import torch
import torch.nn.functional as F

from .segnet import l2_penalty

DICE_EPS = 1e-5


@dataclass(frozen=True)
class RampSchedule:
    ramp_length: int = 1000
    lambda_max: float = 0.1

    def __post_init__(self):
        if self.ramp_length < 1:
            raise ValueError(f"ramp_length must be >= 1, got {self.ramp_length}")
        if self.lambda_max < 0:
            raise ValueError(f"lambda_max must be >= 0, got {self.lambda_max}")


@dataclass(frozen=True)
class LossReport:
    supervised: float
    consistency: float
    l2: float
    total: float
    lambda_used: float


def _check_pair(a: torch.Tensor, b: torch.Tensor) -> None:
    if a.shape != b.shape:
        raise ValueError(f"shape mismatch: {tuple(a.shape)} vs {tuple(b.shape)}")
    if a.ndim < 2:
        raise ValueError("expected (N, C, ...) probability maps")


def soft_dice_loss(
    pred: torch.Tensor, target: torch.Tensor, eps: float = DICE_EPS, squared: bool = True
) -> torch.Tensor:
    """Two-class soft Dice loss, averaged over classes and then batch items.

    Per item and class the Dice term is ``(2 sum(p t) + eps) / (S + eps)``
    where ``S = sum(p^2) + sum(t^2)`` (``sum(p) + sum(t)`` when
    ``squared=False``). The loss is one minus the mean term.
    """
    _check_pair(pred, target)
    dims = tuple(range(2, pred.ndim))
    inter = (pred * target).sum(dim=dims)
    if squared:
        denom = (pred * pred).sum(dim=dims) + (target * target).sum(dim=dims)
    else:
        denom = pred.sum(dim=dims) + target.sum(dim=dims)
    dice = (2 * inter + eps) / (denom + eps)
    return 1 - dice.mean()


def soft_dice_loss_grad(
    pred: np.ndarray, target: np.ndarray, eps: float = DICE_EPS, squared: bool = True
) -> np.ndarray:
    """Closed-form gradient of :func:`soft_dice_loss` with respect to ``pred``."""
    pred = np.asarray(pred, dtype=np.float64)
    target = np.asarray(target, dtype=np.float64)
    n, c = pred.shape[:2]
    axes = tuple(range(2, pred.ndim))
    expand = (slice(None), slice(None)) + (None,) * len(axes)
    num = (2 * (pred * target).sum(axis=axes) + eps)[expand]
    if squared:
        den = ((pred**2).sum(axis=axes) + (target**2).sum(axis=axes) + eps)[expand]
        d_den = 2 * pred
    else:
        den = (pred.sum(axis=axes) + target.sum(axis=axes) + eps)[expand]
        d_den = 1.0
    d_dice = (2 * target * den - num * d_den) / den**2
    return -d_dice / (n * c)


def one_hot(mask: torch.Tensor, num_classes: int = 2) -> torch.Tensor:
    """``(N, H, W)`` integer mask to ``(N, C, H, W)`` float one-hot."""
    return F.one_hot(mask.long(), num_classes).permute(0, 3, 1, 2).float()


def supervised_loss(pred_l: torch.Tensor, y_l: torch.Tensor, **dice_kw) -> torch.Tensor:
    """Soft Dice between labelled predictions ``(N, 2, H, W)`` and binary masks ``(N, H, W)``."""
    if y_l.shape[0] == 0:
        raise ValueError("supervised loss needs at least one labelled item")
    if y_l.ndim != 3 or pred_l.shape[0] != y_l.shape[0] or pred_l.shape[2:] != y_l.shape[1:]:
        raise ValueError(f"label shape {tuple(y_l.shape)} does not match prediction {tuple(pred_l.shape)}")
    if ((y_l != 0) & (y_l != 1)).any():
        raise ValueError("labels must be binary")
    return soft_dice_loss(pred_l, one_hot(y_l, pred_l.shape[1]).to(pred_l.dtype), **dice_kw)


def consistency_loss(student_pred_warped: torch.Tensor, teacher_pred: torch.Tensor, **dice_kw) -> torch.Tensor:
    """Soft Dice discrepancy; the teacher side is treated as a constant."""
    return soft_dice_loss(student_pred_warped, teacher_pred.detach(), **dice_kw)


def ramp_weight(step: int, sched: RampSchedule) -> float:
    """Consistency weight ``lambda_max * exp(-5 * max(1 - S/L, 0)**2)``."""
    if step < 0:
        raise ValueError(f"step must be >= 0, got {step}")
    gap = max(1.0 - step / sched.ramp_length, 0.0)
    return sched.lambda_max * math.exp(-5.0 * gap * gap)


def total_loss(
    pred_l: torch.Tensor,
    y_l: torch.Tensor,
    student_pred_warped: torch.Tensor | None,
    teacher_pred: torch.Tensor | None,
    model: torch.nn.Module,
    step: int,
    sched: RampSchedule,
    l2_weight: float = 1e-5,
    **dice_kw,
) -> tuple[torch.Tensor, LossReport]:
    """Differentiable ``L_l + lambda * L_u + l2_weight * ||w||^2`` and its breakdown.

    Passing ``None`` for the student/teacher maps drops the consistency term
    (supervised baseline).
    """
    if l2_weight < 0:
        raise ValueError(f"l2_weight must be >= 0, got {l2_weight}")
    sup = supervised_loss(pred_l, y_l, **dice_kw)
    if student_pred_warped is None:
        lam = 0.0
        cons = torch.zeros((), dtype=sup.dtype)
    else:
        lam = ramp_weight(step, sched)
        cons = consistency_loss(student_pred_warped, teacher_pred, **dice_kw)
    l2 = l2_penalty(model)
    total = sup + lam * cons + l2_weight * l2
    sup_f, cons_f, l2_f = sup.item(), cons.item(), l2.item()
    # reported total is recomposed in float64 so the breakdown adds up exactly
    report = LossReport(
        supervised=sup_f,
        consistency=cons_f,
        l2=l2_f,
        total=sup_f + lam * cons_f + l2_weight * l2_f,
        lambda_used=lam,
    )
    return total, report
