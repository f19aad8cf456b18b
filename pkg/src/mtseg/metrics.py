"""Evaluation: mask post-processing, Dice, 95th-percentile Hausdorff distance
and the two-sided Wilcoxon signed-rank test.

Distances are in pixels of the evaluation grid.
"""

from __future__ import annotations

import csv
import math
import sys
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np
from scipy import ndimage
from scipy.stats import rankdata

from .dataio import resize_bilinear

EVAL_SIZE = (1660, 540)  # width, height
CROSS = ndimage.generate_binary_structure(2, 1)
EXACT_MAX_N = 25

METRIC_FIELDS = ["run_id", "fold", "frame", "dice", "hd95", "hd95_defined"]


@dataclass(frozen=True)
class MetricRecord:
    run_id: str
    fold: int
    frame: str  # "<group>/<frame_id>"
    dice: float
    hd95: float | None  # None when undefined (an empty mask)

    def __post_init__(self):
        if not 0.0 <= self.dice <= 1.0:
            raise ValueError(f"dice must be in [0, 1], got {self.dice}")
        if self.hd95 is not None and self.hd95 < 0:
            raise ValueError(f"hd95 must be >= 0, got {self.hd95}")

    @property
    def group(self) -> str:
        return self.frame.split("/", 1)[0]

    def row(self) -> dict:
        return {
            "run_id": self.run_id,
            "fold": self.fold,
            "frame": self.frame,
            "dice": repr(float(self.dice)),
            "hd95": "" if self.hd95 is None else repr(float(self.hd95)),
            "hd95_defined": int(self.hd95 is not None),
        }


def write_records(records: Iterable[MetricRecord], path: str | Path) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = path.with_name(path.name + ".tmp")
    with open(tmp, "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=METRIC_FIELDS)
        w.writeheader()
        w.writerows(r.row() for r in records)
    tmp.replace(path)


def read_records(path: str | Path) -> list[MetricRecord]:
    with open(path, newline="") as fh:
        return [
            MetricRecord(
                run_id=row["run_id"],
                fold=int(row["fold"]),
                frame=row["frame"],
                dice=float(row["dice"]),
                hd95=float(row["hd95"]) if int(row["hd95_defined"]) else None,
            )
            for row in csv.DictReader(fh)
        ]


def _as_mask(m) -> np.ndarray:
    m = np.asarray(m)
    if m.ndim != 2 or m.size == 0:
        raise ValueError(f"expected a non-empty 2-D mask, got shape {m.shape}")
    return m.astype(bool)


def _check_same(a: np.ndarray, b: np.ndarray) -> None:
    if a.shape != b.shape:
        raise ValueError(f"mask shape mismatch: {a.shape} vs {b.shape}")


def fill_holes(mask) -> np.ndarray:
    """Background regions not 4-connected to the grid border become foreground."""
    return ndimage.binary_fill_holes(_as_mask(mask), structure=CROSS)


def postprocess(pred: np.ndarray, target_size: tuple[int, int] = EVAL_SIZE) -> np.ndarray:
    """Resample the foreground probability to ``target_size`` (width, height), threshold, fill holes.

    ``pred`` is an ``(H, W, 2)`` probability map or an ``(H, W)`` foreground map.
    """
    pred = np.asarray(pred, dtype=np.float32)
    fg = pred[..., 1] if pred.ndim == 3 else pred
    width, height = target_size
    if fg.shape != (height, width):
        fg = resize_bilinear(fg, (height, width))
    return fill_holes(fg > 0.5)


def dice_score(pred, gt) -> float:
    a, b = _as_mask(pred), _as_mask(gt)
    _check_same(a, b)
    total = int(a.sum()) + int(b.sum())
    if total == 0:
        return 1.0
    return 2.0 * int(np.logical_and(a, b).sum()) / total


def boundary(mask) -> np.ndarray:
    """Foreground pixels with a background 4-neighbour or lying on the grid border."""
    m = _as_mask(mask)
    interior = ndimage.binary_erosion(m, structure=CROSS, border_value=0)
    return m & ~interior


def nearest_rank(values: np.ndarray, q: float = 95.0) -> float:
    v = np.sort(np.asarray(values, dtype=np.float64).ravel())
    k = max(1, math.ceil(q / 100.0 * len(v)))
    return float(v[k - 1])


def _directed(src: np.ndarray, dst: np.ndarray) -> np.ndarray:
    # distance from every src boundary pixel to the nearest dst boundary pixel
    return ndimage.distance_transform_edt(~dst)[src]


def hausdorff95(pred, gt) -> float | None:
    """Symmetric 95th-percentile boundary distance; ``None`` if either mask is empty."""
    a, b = _as_mask(pred), _as_mask(gt)
    _check_same(a, b)
    if not a.any() or not b.any():
        return None
    ba, bb = boundary(a), boundary(b)
    return max(nearest_rank(_directed(ba, bb)), nearest_rank(_directed(bb, ba)))


def evaluate_frame(prob: np.ndarray, gt, target_size: tuple[int, int] | None = None) -> tuple[float, float | None]:
    """Dice and HD95 of a predicted probability map against a ground-truth mask.

    The prediction is post-processed at ``target_size`` (defaults to the
    ground-truth size); the ground truth is resampled with nearest neighbour
    if its size differs.
    """
    gt = _as_mask(gt)
    if target_size is None:
        target_size = (gt.shape[1], gt.shape[0])
    mask = postprocess(prob, target_size)
    if gt.shape != mask.shape:
        rows = (np.arange(mask.shape[0]) * gt.shape[0] // mask.shape[0])
        cols = (np.arange(mask.shape[1]) * gt.shape[1] // mask.shape[1])
        gt = gt[np.ix_(rows, cols)]
    return dice_score(mask, gt), hausdorff95(mask, gt)


def _exact_tails(ranks: np.ndarray, w_plus: float) -> tuple[float, float]:
    """``P(W+ <= w)`` and ``P(W+ >= w)`` under the null, by dynamic programming."""
    r2 = np.rint(2 * ranks).astype(np.int64)  # average ranks are multiples of 1/2
    total = int(r2.sum())
    counts = np.zeros(total + 1, dtype=np.float64)
    counts[0] = 1.0
    for r in r2:
        shifted = np.zeros_like(counts)
        shifted[r:] = counts[: total + 1 - r]
        counts = counts + shifted
    probs = counts / counts.sum()
    w2 = int(round(2 * w_plus))
    return float(probs[: w2 + 1].sum()), float(probs[w2:].sum())


def wilcoxon_signed_rank(a: Sequence[float], b: Sequence[float], exact_max_n: int = EXACT_MAX_N) -> float:
    """Two-sided p-value of the paired Wilcoxon signed-rank test.

    Zero differences are dropped and tied ranks averaged. Exact null
    distribution for up to ``exact_max_n`` non-zero pairs, otherwise a normal
    approximation with tie-corrected variance (no continuity correction).
    """
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape or a.ndim != 1:
        raise ValueError(f"paired samples must be 1-D of equal length, got {a.shape} and {b.shape}")
    d = a - b
    d = d[d != 0]
    n = len(d)
    if n == 0:
        return 1.0
    if n < 5:
        raise ValueError(f"need at least 5 non-zero differences, got {n}")
    ranks = rankdata(np.abs(d))
    w_plus = float(ranks[d > 0].sum())
    if n <= exact_max_n:
        lower, upper = _exact_tails(ranks, w_plus)
        return min(1.0, 2.0 * min(lower, upper))
    _, ties = np.unique(np.abs(d), return_counts=True)
    mean = n * (n + 1) / 4.0
    var = n * (n + 1) * (2 * n + 1) / 24.0 - float((ties**3 - ties).sum()) / 48.0
    if var <= 0:
        return 1.0
    z = (w_plus - mean) / math.sqrt(var)
    # keep p strictly positive even when the tail underflows
    return min(1.0, max(math.erfc(abs(z) / math.sqrt(2.0)), sys.float_info.min))
