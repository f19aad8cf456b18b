"""Student/teacher training with composed affine consistency noise.

One training step:

1. draw two independent transforms ``t1`` and ``t2`` per batch item;
2. the student sees ``warp(x, t1)``; labels are warped by ``t1`` (nearest);
3. the teacher sees ``warp(x, compose(t2, t1))``;
4. the supervised Dice loss uses the labelled part of the student output;
   the consistency loss compares ``warp(student_output, t2)`` with the
   teacher output over the whole mixed batch;
5. Adam updates the student on the combined loss, then the teacher becomes an
   exponential moving average of the student.

The supervised baseline ("SL") trains the student alone, without noise,
teacher or consistency term.
"""

from __future__ import annotations

import copy
import csv
import logging
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np
import torch

from . import geometry
from .dataio import AugmentConfig, Frame, GroupedDataset, augment, standardize
from .losses import DICE_EPS, LossReport, RampSchedule, total_loss
from .segnet import ModelParams, NetConfig, SegNet, build, save_checkpoint

log = logging.getLogger(__name__)

LOSS_FIELDS = ["step", "L_l", "L_u", "lambda", "l2", "total"]


@dataclass(frozen=True)
class EmaSchedule:
    alpha_rampup: float = 0.99
    alpha_after: float = 0.999
    switch_step: int = 1000

    def __post_init__(self):
        for a in (self.alpha_rampup, self.alpha_after):
            if not 0.0 <= a < 1.0:
                raise ValueError(f"EMA decay must satisfy 0 <= alpha < 1, got {a}")
        if self.switch_step < 0:
            raise ValueError("switch_step must be >= 0")


@dataclass(frozen=True)
class TrainConfig:
    mode: str = "MT"  # "MT" mean teacher or "SL" supervised baseline
    iterations: int = 10_000
    batch_size: int = 32
    labelled_per_batch: int | None = None  # default: half the batch
    lr: float = 1e-4
    l2_weight: float = 1e-5
    net: NetConfig = field(default_factory=NetConfig)
    noise: geometry.AffineNoiseConfig = field(default_factory=geometry.AffineNoiseConfig)
    ramp: RampSchedule = field(default_factory=RampSchedule)
    ema: EmaSchedule = field(default_factory=EmaSchedule)
    augment: AugmentConfig | None = field(default_factory=AugmentConfig)
    dice_eps: float = DICE_EPS
    dice_squared: bool = True
    # batch-norm uses batch statistics during training steps when True
    train_forward_mode: bool = True
    eval_model: str = "student"  # network checkpointed and scored after training
    checkpoint_every: int = 0
    seed: int = 0

    def __post_init__(self):
        if self.mode not in ("MT", "SL"):
            raise ValueError(f"mode must be 'MT' or 'SL', got {self.mode!r}")
        if self.iterations < 0:
            raise ValueError("iterations must be >= 0")
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")
        if self.labelled_per_batch is not None and not 1 <= self.labelled_per_batch <= self.batch_size:
            raise ValueError("labelled_per_batch must be in [1, batch_size]")
        if self.eval_model not in ("teacher", "student"):
            raise ValueError(f"eval_model must be 'teacher' or 'student', got {self.eval_model!r}")

    @property
    def dice_kw(self) -> dict:
        return {"eps": self.dice_eps, "squared": self.dice_squared}


@dataclass
class MixedBatch:
    """Images ``x_m = [x_l; x_u]`` (labelled first) with masks for the labelled part."""

    images: np.ndarray  # (N, H, W, C) float32
    labelled_flags: np.ndarray  # (N,) bool
    labels: np.ndarray  # (n_labelled, H, W) uint8

    def __post_init__(self):
        flags = np.asarray(self.labelled_flags, dtype=bool)
        if flags.shape != (len(self.images),):
            raise ValueError("labelled_flags must have one entry per image")
        if not flags.any():
            raise ValueError("a mixed batch needs at least one labelled item")
        if self.labels.shape != (int(flags.sum()),) + self.images.shape[1:3]:
            raise ValueError(
                f"labels shape {self.labels.shape} does not match {int(flags.sum())} labelled images "
                f"of size {self.images.shape[1:3]}"
            )
        self.labelled_flags = flags


@dataclass
class TrainState:
    student: SegNet
    teacher: SegNet | None
    optimizer: torch.optim.Optimizer
    rng: np.random.Generator
    step: int = 0
    history: list[LossReport] = field(default_factory=list)

    @property
    def optimizer_state(self) -> dict:
        return self.optimizer.state_dict()

    def eval_network(self, which: str = "teacher") -> SegNet:
        """Network to checkpoint or score. The teacher first takes the student's
        normalisation running statistics, which are not part of the EMA."""
        if which == "teacher" and self.teacher is not None:
            with torch.no_grad():
                t_bufs = dict(self.teacher.named_buffers())
                for k, b in self.student.named_buffers():
                    t_bufs[k].copy_(b)
            return self.teacher
        return self.student


def init_teacher(student: SegNet) -> SegNet:
    """Independent value copy of the student; never receives gradients."""
    teacher = copy.deepcopy(student)
    for p in teacher.parameters():
        p.requires_grad_(False)
    return teacher


def alpha_schedule(step: int, sched: EmaSchedule) -> float:
    if step < 0:
        raise ValueError(f"step must be >= 0, got {step}")
    return sched.alpha_rampup if step < sched.switch_step else sched.alpha_after


def _blend(t: torch.Tensor, s: torch.Tensor, alpha: float) -> torch.Tensor:
    return alpha * t + (1.0 - alpha) * s


def ema_update(teacher: ModelParams, student: ModelParams, alpha: float) -> ModelParams:
    """Elementwise ``alpha * teacher + (1 - alpha) * student`` for every floating array.

    Integer entries (batch-norm step counters) are kept from the teacher.
    """
    if not 0.0 <= alpha < 1.0:
        raise ValueError(f"EMA decay must satisfy 0 <= alpha < 1, got {alpha}")
    if set(teacher) != set(student):
        raise ValueError(f"key mismatch: {sorted(set(teacher) ^ set(student))}")
    out = {}
    for k, t in teacher.items():
        s = student[k]
        if t.shape != s.shape:
            raise ValueError(f"shape mismatch for {k}: {tuple(t.shape)} vs {tuple(s.shape)}")
        out[k] = _blend(t, s, alpha) if t.is_floating_point() else t.clone()
    return out


def _ema_into(teacher: SegNet, student: SegNet, alpha: float) -> None:
    with torch.no_grad():
        t_params = dict(teacher.named_parameters())
        blended = ema_update(
            {k: p.detach() for k, p in t_params.items()},
            {k: p.detach() for k, p in student.named_parameters()},
            alpha,
        )
        for k, v in blended.items():
            t_params[k].copy_(v)


class BatchStream:
    """Endless mixed batches drawn by walking shuffled epochs of each pool."""

    def __init__(
        self,
        labelled_pool: Sequence[Frame],
        unlabelled_pool: Sequence[Frame],
        batch_size: int,
        labelled_per_batch: int | None,
        rng: np.random.Generator,
        augment_cfg: AugmentConfig | None = None,
    ):
        if not labelled_pool:
            raise ValueError("labelled pool is empty")
        self.labelled = list(labelled_pool)
        self.unlabelled = list(unlabelled_pool)
        if labelled_per_batch is None:
            labelled_per_batch = max(1, batch_size // 2)
        if labelled_per_batch < 1:
            raise ValueError("labelled_per_batch must be >= 1")
        # without unlabelled frames the whole batch is labelled
        self.n_labelled = batch_size if not self.unlabelled else min(labelled_per_batch, batch_size)
        self.n_unlabelled = batch_size - self.n_labelled
        self.rng = rng
        self.augment_cfg = augment_cfg
        self._queues = {"l": [], "u": []}

    def _take(self, which: str, pool_size: int, k: int) -> list[int]:
        q = self._queues[which]
        while len(q) < k:
            q.extend(self.rng.permutation(pool_size).tolist())
        out, self._queues[which] = q[:k], q[k:]
        return out

    def _prep(self, f: Frame) -> np.ndarray:
        if self.augment_cfg is None:
            return standardize(f.image)
        return augment(f.image, self.rng, self.augment_cfg)

    def next(self) -> MixedBatch:
        lab = [self.labelled[i] for i in self._take("l", len(self.labelled), self.n_labelled)]
        unl = [self.unlabelled[i] for i in self._take("u", len(self.unlabelled), self.n_unlabelled)] if self.n_unlabelled else []
        frames = lab + unl
        images = np.stack([self._prep(f) for f in frames]).astype(np.float32)
        flags = np.array([True] * len(lab) + [False] * len(unl))
        labels = np.stack([f.mask for f in lab]).astype(np.uint8)
        return MixedBatch(images, flags, labels)


def make_mixed_batch(
    labelled_pool: Sequence[Frame],
    unlabelled_pool: Sequence[Frame],
    batch_size: int,
    labelled_per_batch: int | None,
    rng: np.random.Generator,
    augment_cfg: AugmentConfig | None = None,
) -> MixedBatch:
    return BatchStream(labelled_pool, unlabelled_pool, batch_size, labelled_per_batch, rng, augment_cfg).next()


def init_state(cfg: TrainConfig) -> TrainState:
    student = build(cfg.net, seed=cfg.seed)
    teacher = init_teacher(student) if cfg.mode == "MT" else None
    opt = torch.optim.Adam(student.parameters(), lr=cfg.lr)
    return TrainState(student, teacher, opt, np.random.default_rng(cfg.seed))


def _check_finite(report: LossReport, step: int) -> None:
    for name in ("supervised", "consistency", "l2", "total"):
        v = getattr(report, name)
        if not math.isfinite(v):
            raise FloatingPointError(f"non-finite {name} loss ({v}) at step {step}")


def train_step(
    state: TrainState,
    batch: MixedBatch,
    cfg: TrainConfig,
    transforms: tuple[Sequence[geometry.AffineTransform], Sequence[geometry.AffineTransform]] | None = None,
) -> TrainState:
    """Advance ``state`` by one optimisation step (mutates and returns it).

    ``transforms`` optionally fixes the per-item ``(t1, t2)`` lists instead of
    sampling them; it is ignored in SL mode.
    """
    x = torch.from_numpy(batch.images).permute(0, 3, 1, 2).contiguous()
    y = torch.from_numpy(batch.labels.astype(np.int64))
    flags = torch.from_numpy(batch.labelled_flags)
    n, _, h, w = x.shape
    student = state.student
    student.train(cfg.train_forward_mode)

    if state.teacher is None:
        pred = student(x)
        loss, report = total_loss(
            pred[flags], y, None, None, student, state.step, cfg.ramp, cfg.l2_weight, **cfg.dice_kw
        )
    else:
        if transforms is None:
            t1 = [geometry.sample_affine(state.rng, cfg.noise, (h, w)) for _ in range(n)]
            t2 = [geometry.sample_affine(state.rng, cfg.noise, (h, w)) for _ in range(n)]
        else:
            t1, t2 = list(transforms[0]), list(transforms[1])
            if len(t1) != n or len(t2) != n:
                raise ValueError(f"need {n} transforms per list, got {len(t1)} and {len(t2)}")
        t21 = [geometry.compose(b, a) for a, b in zip(t1, t2)]
        fill = cfg.noise.fill_value
        x_s = geometry.warp_tensor(x, t1, "bilinear", fill)
        x_t = geometry.warp_tensor(x, t21, "bilinear", fill)
        lab_t1 = [t for t, f in zip(t1, batch.labelled_flags) if f]
        y_s = geometry.warp_tensor(y[:, None].double(), lab_t1, "nearest", 0.0)[:, 0].round().long()

        p_s = student(x_s)
        state.teacher.train(cfg.train_forward_mode)
        with torch.no_grad():
            p_t = state.teacher(x_t)
        p_s_warped = geometry.warp_probmap_tensor(p_s, t2)
        loss, report = total_loss(
            p_s[flags], y_s, p_s_warped, p_t, student, state.step, cfg.ramp, cfg.l2_weight, **cfg.dice_kw
        )

    _check_finite(report, state.step)
    state.optimizer.zero_grad(set_to_none=True)
    loss.backward()
    state.optimizer.step()
    if state.teacher is not None:
        _ema_into(state.teacher, student, alpha_schedule(state.step, cfg.ema))
    state.step += 1
    state.history.append(report)
    return state


def write_loss_history(history: Sequence[LossReport], path: str | Path) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = path.with_name(path.name + ".tmp")
    with open(tmp, "w", newline="") as fh:
        wr = csv.writer(fh)
        wr.writerow(LOSS_FIELDS)
        for i, r in enumerate(history):
            wr.writerow([i, repr(r.supervised), repr(r.consistency), repr(r.lambda_used), repr(r.l2), repr(r.total)])
    tmp.replace(path)


def train(
    ds: GroupedDataset, cfg: TrainConfig, outdir: str | Path | None = None
) -> tuple[TrainState, Path | None]:
    """Train on every frame of ``ds`` (already restricted to training groups).

    Labelled frames feed the supervised loss; in MT mode unlabelled frames
    join the mixed batches. With ``outdir`` set, checkpoints of the evaluation
    network and ``losses.csv`` are written there.
    """
    labelled, unlabelled = ds.labelled(), ds.unlabelled()
    if not labelled:
        raise ValueError("training set has no labelled frames")
    state = init_state(cfg)
    if cfg.mode == "SL":
        stream = BatchStream(labelled, [], cfg.batch_size, cfg.batch_size, state.rng, cfg.augment)
    else:
        stream = BatchStream(labelled, unlabelled, cfg.batch_size, cfg.labelled_per_batch, state.rng, cfg.augment)

    out = Path(outdir) if outdir is not None else None
    ckpt = out / "checkpoint.npz" if out is not None else None
    for _ in range(cfg.iterations):
        train_step(state, stream.next(), cfg)
        if out is not None and cfg.checkpoint_every and state.step % cfg.checkpoint_every == 0:
            save_checkpoint(out / f"checkpoint_{state.step:06d}.npz", state.eval_network(cfg.eval_model), state.step)
        if state.step % 100 == 0:
            r = state.history[-1]
            log.debug("step %d: L_l=%.4f L_u=%.4f lambda=%.4g", state.step, r.supervised, r.consistency, r.lambda_used)
    if out is not None:
        save_checkpoint(ckpt, state.eval_network(cfg.eval_model), state.step, {"mode": cfg.mode})
        write_loss_history(state.history, out / "losses.csv")
    return state, ckpt
