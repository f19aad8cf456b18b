"""Leave-one-group-out cross-validation, labelled x unlabelled sweeps,
paired comparisons and report emission."""

from __future__ import annotations

import json
import logging
import os
import traceback
import zlib
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from .dataio import GroupedDataset, SampleSpec, sample_fractions, standardize
from .mean_teacher import TrainConfig, train
from .metrics import MetricRecord, evaluate_frame, read_records, wilcoxon_signed_rank, write_records
from .segnet import SegNet, predict

log = logging.getLogger(__name__)

LABELLED_FRACTIONS = (0.02, 0.10, 0.25, 0.50, 1.00)
UNLABELLED_FRACTIONS = (0.0, 0.0625, 0.25, 1.00)
TABLE_COLUMNS = ("Metric", "Method", "Median", "Mean", "Std", "Wilcoxon")
PAIRINGS = {"frame": "per test frame, pooled across folds", "fold": "per-fold means"}
HD_CONVENTION = "symmetric max of directed nearest-rank 95th percentiles, 4-connected boundaries, pixels"


@dataclass(frozen=True)
class FoldPlan:
    fold: int
    test_group: str
    train_groups: tuple[str, ...]

    def __post_init__(self):
        if self.test_group in self.train_groups:
            raise ValueError(f"fold {self.fold}: test group {self.test_group!r} is also a training group")


@dataclass(frozen=True)
class Cell:
    mode: str
    labelled_fraction: float
    unlabelled_fraction: float = 0.0

    def __post_init__(self):
        if self.mode not in ("SL", "MT"):
            raise ValueError(f"mode must be 'SL' or 'MT', got {self.mode!r}")
        if self.mode == "SL":
            # the baseline never sees unlabelled frames
            object.__setattr__(self, "unlabelled_fraction", 0.0)
        SampleSpec(self.labelled_fraction, self.unlabelled_fraction)

    @property
    def cell_id(self) -> str:
        return f"{self.mode}_l{self.labelled_fraction:g}_u{self.unlabelled_fraction:g}"

    @property
    def label(self) -> str:
        return f"{self.mode}({self.labelled_fraction:.0%})"


def make_grid(
    labelled: Sequence[float] = LABELLED_FRACTIONS,
    unlabelled: Sequence[float] = UNLABELLED_FRACTIONS,
    include_sl: bool = True,
) -> list[Cell]:
    cells = [Cell("SL", lf) for lf in labelled] if include_sl else []
    cells += [Cell("MT", lf, uf) for lf in labelled for uf in unlabelled]
    return cells


def derive_seed(*parts) -> int:
    return zlib.crc32("|".join(str(p) for p in parts).encode())


def make_folds(ds: GroupedDataset) -> list[FoldPlan]:
    groups = sorted(ds.group_ids)
    if len(groups) < 2:
        raise ValueError(f"leave-one-group-out needs at least 2 groups, got {len(groups)}")
    return [
        FoldPlan(k, g, tuple(x for x in groups if x != g)) for k, g in enumerate(groups)
    ]


def evaluate_network(
    net: SegNet,
    frames: Sequence,
    run_id: str,
    fold: int,
    target_size: tuple[int, int] | None = None,
) -> list[MetricRecord]:
    """Dice/HD95 records for every labelled frame in ``frames``."""
    frames = [f for f in frames if f.labelled]
    if not frames:
        return []
    probs = predict(net, np.stack([standardize(f.image) for f in frames]))
    records = []
    for f, p in zip(frames, probs):
        dice, hd = evaluate_frame(p, f.mask, target_size)
        records.append(MetricRecord(run_id, fold, f"{f.group}/{f.frame_id}", dice, hd))
    return records


def training_split(ds: GroupedDataset, plan: FoldPlan, cell: Cell, base_seed: int) -> GroupedDataset:
    """Sampled training frames for one fold; the sample depends on the fold only, so
    fractions nest and SL/MT cells train on the same labelled frames."""
    spec = SampleSpec(cell.labelled_fraction, cell.unlabelled_fraction, derive_seed("sample", plan.fold, base_seed))
    train_ds = sample_fractions(ds.subset(plan.train_groups), spec)
    if any(f.group == plan.test_group for f in train_ds.frames):
        raise AssertionError(f"fold {plan.fold}: test group {plan.test_group} leaked into training")
    return train_ds


def run_fold(
    ds: GroupedDataset,
    plan: FoldPlan,
    cell: Cell,
    cfg: TrainConfig,
    outdir: str | Path | None = None,
    target_size: tuple[int, int] | None = None,
) -> list[MetricRecord]:
    """Train one cell on the fold's training groups and score the held-out group."""
    train_ds = training_split(ds, plan, cell, cfg.seed)
    run_cfg = replace(cfg, mode=cell.mode, seed=derive_seed(cell.cell_id, plan.fold, cfg.seed))
    try:
        state, _ = train(train_ds, run_cfg, outdir)
    except Exception as exc:
        raise RuntimeError(f"fold {plan.fold} ({cell.cell_id}) failed: {exc}") from exc
    net = state.eval_network(cfg.eval_model)
    return evaluate_network(net, ds.group(plan.test_group), cell.cell_id, plan.fold, target_size)


# -- sweeps --------------------------------------------------------------------


@dataclass
class SweepResult:
    cells: list[Cell]
    records: dict[str, list[MetricRecord]] = field(default_factory=dict)
    failures: list[tuple[str, int, str]] = field(default_factory=list)

    def cell(self, cell_id: str) -> Cell:
        for c in self.cells:
            if c.cell_id == cell_id:
                return c
        raise KeyError(cell_id)

    def aggregates(self) -> list[dict]:
        rows = []
        for c in self.cells:
            recs = self.records.get(c.cell_id, [])
            if not recs:
                continue
            dice = np.array([r.dice for r in recs])
            hd = np.array([r.hd95 for r in recs if r.hd95 is not None])
            rows.append(
                {
                    "cell": c.cell_id,
                    "mode": c.mode,
                    "labelled_fraction": c.labelled_fraction,
                    "unlabelled_fraction": c.unlabelled_fraction,
                    "n_frames": len(recs),
                    "dice_median": float(np.median(dice)),
                    "dice_mean": float(np.mean(dice)),
                    "dice_std": float(np.std(dice)),
                    "hd95_median": float(np.median(hd)) if len(hd) else float("nan"),
                    "hd95_mean": float(np.mean(hd)) if len(hd) else float("nan"),
                    "hd95_std": float(np.std(hd)) if len(hd) else float("nan"),
                    "hd95_excluded": int(len(recs) - len(hd)),
                }
            )
        return rows


def _fold_dir(root: Path, cell: Cell, fold: int) -> Path:
    return root / cell.cell_id / f"fold{fold}"


def _job(args):
    ds, plan, cell, cfg, run_dir, target_size = args
    try:
        recs = run_fold(ds, plan, cell, cfg, run_dir, target_size)
    except Exception:
        return cell.cell_id, plan.fold, None, traceback.format_exc()
    write_records(recs, run_dir / "metrics.csv")
    return cell.cell_id, plan.fold, recs, None


def run_sweep(
    ds: GroupedDataset,
    cells: Sequence[Cell],
    cfg: TrainConfig,
    outdir: str | Path,
    folds: Iterable[int] | None = None,
    workers: int = 1,
    target_size: tuple[int, int] | None = None,
) -> SweepResult:
    """Run every (cell, fold) job, skipping those whose ``metrics.csv`` already exists."""
    root = Path(outdir)
    root.mkdir(parents=True, exist_ok=True)
    plans = make_folds(ds)
    if folds is not None:
        wanted = set(folds)
        plans = [p for p in plans if p.fold in wanted]
    result = SweepResult(list(cells))
    done: dict[tuple[str, int], list[MetricRecord]] = {}
    jobs = []
    for cell in cells:
        cdir = root / cell.cell_id
        cdir.mkdir(parents=True, exist_ok=True)
        _atomic_write(cdir / "cell.json", json.dumps(asdict(cell), sort_keys=True))
        for plan in plans:
            run_dir = _fold_dir(root, cell, plan.fold)
            if (run_dir / "metrics.csv").exists():
                done[(cell.cell_id, plan.fold)] = read_records(run_dir / "metrics.csv")
            else:
                jobs.append((ds, plan, cell, cfg, run_dir, target_size))

    if workers > 1 and len(jobs) > 1:
        with ProcessPoolExecutor(max_workers=workers) as pool:
            outcomes = list(pool.map(_job, jobs))
    else:
        outcomes = [_job(j) for j in jobs]
    for cell_id, fold, recs, err in outcomes:
        if err is not None:
            log.error("cell %s fold %d failed:\n%s", cell_id, fold, err)
            result.failures.append((cell_id, fold, err.strip().splitlines()[-1]))
        else:
            done[(cell_id, fold)] = recs
    for cell in cells:
        result.records[cell.cell_id] = [
            r for p in plans for r in done.get((cell.cell_id, p.fold), [])
        ]
    return result


def load_sweep(indir: str | Path) -> SweepResult:
    """Rebuild a :class:`SweepResult` from a runs directory."""
    root = Path(indir)
    cells, records = [], {}
    for cfile in sorted(root.glob("*/cell.json")):
        cell = Cell(**json.loads(cfile.read_text()))
        cells.append(cell)
        recs = []
        for mfile in sorted(cfile.parent.glob("fold*/metrics.csv"), key=lambda p: int(p.parent.name[4:])):
            recs.extend(read_records(mfile))
        records[cell.cell_id] = recs
    if not cells:
        raise ValueError(f"no sweep cells found under {root}")
    return SweepResult(cells, records)


# -- comparison & reporting ---------------------------------------------------


def _paired(a: Sequence[MetricRecord], b: Sequence[MetricRecord]):
    ka = {(r.fold, r.frame): r for r in a}
    kb = {(r.fold, r.frame): r for r in b}
    if set(ka) != set(kb) or len(ka) != len(a) or len(kb) != len(b):
        raise ValueError("results are not paired: frame sets differ")
    keys = sorted(ka)
    return [ka[k] for k in keys], [kb[k] for k in keys]


def _summary(x: np.ndarray) -> tuple[float, float, float]:
    if len(x) == 0:
        return (float("nan"),) * 3
    return float(np.median(x)), float(np.mean(x)), float(np.std(x))


def _fold_means(recs: Sequence[MetricRecord], values: np.ndarray) -> np.ndarray:
    folds = sorted({r.fold for r in recs})
    idx = np.array([r.fold for r in recs])
    return np.array([values[idx == k].mean() for k in folds if np.any(idx == k)])


def compare(
    res_a: Sequence[MetricRecord],
    res_b: Sequence[MetricRecord],
    name_a: str = "SL",
    name_b: str = "MT",
    pairing: str = "frame",
) -> list[dict]:
    """Table rows (Dice and HD95, one row per method) with a paired two-sided Wilcoxon p.

    ``pairing="frame"`` pairs test frames pooled across folds; ``"fold"`` pairs
    per-fold means instead. HD95 pairs where either side is undefined are dropped.
    """
    if pairing not in ("frame", "fold"):
        raise ValueError(f"pairing must be 'frame' or 'fold', got {pairing!r}")
    pa, pb = _paired(res_a, res_b)
    rows = []
    dice_a = np.array([r.dice for r in pa])
    dice_b = np.array([r.dice for r in pb])
    hd_keep = [(x, y) for x, y in zip(pa, pb) if x.hd95 is not None and y.hd95 is not None]
    hd_a = np.array([x.hd95 for x, _ in hd_keep], dtype=float)
    hd_b = np.array([y.hd95 for _, y in hd_keep], dtype=float)
    for metric, xa, xb, recs in (
        ("Dice Score", dice_a, dice_b, pa),
        ("Hausdorff Distance", hd_a, hd_b, [x for x, _ in hd_keep]),
    ):
        ta, tb = (_fold_means(recs, xa), _fold_means(recs, xb)) if pairing == "fold" else (xa, xb)
        try:
            p = wilcoxon_signed_rank(ta, tb)
        except ValueError:
            p = float("nan")  # fewer than 5 non-zero differences
        for name, x in ((name_a, xa), (name_b, xb)):
            med, mean, std = _summary(x)
            rows.append({"Metric": metric, "Method": name, "Median": med, "Mean": mean, "Std": std, "Wilcoxon": p})
    return rows


def format_table(rows: Sequence[dict]) -> str:
    """Fixed-width text rendering of :func:`compare` rows."""

    def fmt(row, col):
        v = row[col]
        if col in ("Metric", "Method"):
            return str(v)
        if col == "Wilcoxon":
            return "nan" if v != v else f"{v:.2e}"
        digits = 4 if row["Metric"].startswith("Dice") else 2
        return f"{v:.{digits}f}"

    cells = [list(TABLE_COLUMNS)] + [[fmt(r, c) for c in TABLE_COLUMNS] for r in rows]
    widths = [max(len(line[i]) for line in cells) for i in range(len(TABLE_COLUMNS))]
    lines = [" | ".join(s.ljust(w) for s, w in zip(line, widths)).rstrip() for line in cells]
    lines.insert(1, "-+-".join("-" * w for w in widths))
    return "\n".join(lines) + "\n"


def _atomic_write(path: Path, text: str) -> None:
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_text(text)
    os.replace(tmp, path)


def _csv_text(rows: Sequence[dict]) -> str:
    if not rows:
        return ""
    cols = list(rows[0])
    out = [",".join(cols)]
    for r in rows:
        out.append(",".join(repr(v) if isinstance(v, float) else str(v) for v in (r[c] for c in cols)))
    return "\n".join(out) + "\n"


def _comparisons(sweep: SweepResult) -> list[tuple[Cell, Cell]]:
    """SL cell paired with each MT cell at the same labelled fraction."""
    pairs = []
    for sl in (c for c in sweep.cells if c.mode == "SL"):
        for mt in (c for c in sweep.cells if c.mode == "MT"):
            if mt.labelled_fraction == sl.labelled_fraction:
                pairs.append((sl, mt))
    return pairs


def _save_fig(fig, path: Path) -> None:
    tmp = path.with_name(path.stem + ".tmp" + path.suffix)
    fig.savefig(tmp, format="png", dpi=100, metadata={"Software": None})
    os.replace(tmp, path)


def report(sweep: SweepResult, outdir: str | Path, pairing: str = "frame") -> list[Path]:
    """Write aggregate CSVs, comparison tables and the two sweep figures."""
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    if pairing not in PAIRINGS:
        raise ValueError(f"pairing must be one of {sorted(PAIRINGS)}, got {pairing!r}")
    out = Path(outdir)
    out.mkdir(parents=True, exist_ok=True)
    agg = sweep.aggregates()
    if not agg:
        raise ValueError("sweep has no records to report")
    written = []

    p = out / "aggregates.csv"
    _atomic_write(p, _csv_text(agg))
    written.append(p)

    for sl, mt in _comparisons(sweep):
        ra, rb = sweep.records.get(sl.cell_id), sweep.records.get(mt.cell_id)
        if not ra or not rb:
            continue
        try:
            rows = compare(ra, rb, sl.label, f"{mt.label} u={mt.unlabelled_fraction:g}", pairing)
        except ValueError as exc:
            log.warning("skipping %s vs %s: %s", sl.cell_id, mt.cell_id, exc)
            continue
        p = out / f"table_{sl.cell_id}_vs_{mt.cell_id}.txt"
        _atomic_write(p, format_table(rows))
        written.append(p)

    meta = {
        "pairing": PAIRINGS[pairing],
        "hd95": HD_CONVENTION,
        "hd95_excluded": {a["cell"]: a["hd95_excluded"] for a in agg},
        "failures": [list(f) for f in sweep.failures],
    }
    p = out / "metadata.json"
    _atomic_write(p, json.dumps(meta, indent=2, sort_keys=True) + "\n")
    written.append(p)

    # median Dice / HD95 against labelled fraction, SL and MT at the largest unlabelled fraction
    sl_rows = sorted((a for a in agg if a["mode"] == "SL"), key=lambda a: a["labelled_fraction"])
    mt_rows = [a for a in agg if a["mode"] == "MT"]
    top_u = max((a["unlabelled_fraction"] for a in mt_rows), default=None)
    mt_top = sorted((a for a in mt_rows if a["unlabelled_fraction"] == top_u), key=lambda a: a["labelled_fraction"])
    fig, axes = plt.subplots(1, 2, figsize=(9, 3.5))
    for ax, key, ylabel in ((axes[0], "dice_median", "median Dice"), (axes[1], "hd95_median", "median HD95 (px)")):
        if sl_rows:
            ax.plot([a["labelled_fraction"] for a in sl_rows], [a[key] for a in sl_rows], "o-", label="SL")
        if mt_top:
            ax.plot(
                [a["labelled_fraction"] for a in mt_top], [a[key] for a in mt_top], "s-", label=f"MT (u={top_u:g})"
            )
        ax.set_xscale("log")
        ax.set_xlabel("labelled fraction")
        ax.set_ylabel(ylabel)
        ax.legend()
    fig.tight_layout()
    p = out / "labelled_fraction.png"
    _save_fig(fig, p)
    plt.close(fig)
    written.append(p)

    fig, ax = plt.subplots(figsize=(5, 3.5))
    for lf in sorted({a["labelled_fraction"] for a in mt_rows}):
        series = sorted((a for a in mt_rows if a["labelled_fraction"] == lf), key=lambda a: a["unlabelled_fraction"])
        ax.plot(
            [a["unlabelled_fraction"] for a in series],
            [a["dice_median"] for a in series],
            "o-",
            label=f"MT ({lf:.0%})",
        )
    for a in sl_rows:
        ax.axhline(a["dice_median"], ls=":", lw=0.8, color="gray")
    ax.set_xlabel("unlabelled fraction")
    ax.set_ylabel("median Dice")
    if mt_rows:
        ax.legend()
    fig.tight_layout()
    p = out / "unlabelled_fraction.png"
    _save_fig(fig, p)
    plt.close(fig)
    written.append(p)
    return written
