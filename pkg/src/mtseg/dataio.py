"""Grouped datasets: frame preprocessing, augmentation, fraction sampling, I/O
and a synthetic generator standing in for per-patient video frames."""

from __future__ import annotations

import csv
import math
import zlib
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable

import numpy as np
import torch
import torch.nn.functional as F
from PIL import Image

RAW_SIZE = (540, 1920)  # height, width
CROP_WIDTH = 1660
NET_SIZE = (128, 384)
STD_FLOOR = 1e-6


@dataclass(frozen=True, eq=False)
class Frame:
    group: str
    frame_id: str
    image: np.ndarray  # (H, W, 3) float32 in [0, 1]
    mask: np.ndarray | None = None  # (H, W) uint8 in {0, 1}
    meta: dict | None = field(default=None, compare=False, repr=False)

    @property
    def labelled(self) -> bool:
        return self.mask is not None

    @property
    def key(self) -> tuple[str, str]:
        return (self.group, self.frame_id)


@dataclass(frozen=True)
class GroupedDataset:
    """Frames partitioned by group; immutable once built."""

    frames: tuple[Frame, ...]
    _by_group: dict = field(init=False, repr=False, compare=False)

    def __post_init__(self):
        by_group: dict[str, list[Frame]] = {}
        seen = set()
        for f in self.frames:
            if f.key in seen:
                raise ValueError(f"duplicate frame {f.group}/{f.frame_id}")
            seen.add(f.key)
            by_group.setdefault(f.group, []).append(f)
        object.__setattr__(self, "_by_group", {g: tuple(v) for g, v in by_group.items()})

    @property
    def group_ids(self) -> list[str]:
        return list(self._by_group)

    def group(self, gid: str) -> tuple[Frame, ...]:
        return self._by_group.get(gid, ())

    def labelled(self, gid: str | None = None) -> list[Frame]:
        src = self.frames if gid is None else self.group(gid)
        return [f for f in src if f.labelled]

    def unlabelled(self, gid: str | None = None) -> list[Frame]:
        src = self.frames if gid is None else self.group(gid)
        return [f for f in src if not f.labelled]

    def subset(self, groups: Iterable[str]) -> "GroupedDataset":
        keep = set(groups)
        return GroupedDataset(tuple(f for f in self.frames if f.group in keep))

    def manifest(self) -> list[dict]:
        return [
            {"group_id": g, "n_frames": len(fs), "n_labelled": sum(f.labelled for f in fs)}
            for g, fs in self._by_group.items()
        ]

    def __len__(self) -> int:
        return len(self.frames)


@dataclass(frozen=True)
class SampleSpec:
    labelled_fraction: float = 1.0
    unlabelled_fraction: float = 1.0
    seed: int = 0

    def __post_init__(self):
        if not 0.0 < self.labelled_fraction <= 1.0:
            raise ValueError(f"labelled_fraction must be in (0, 1], got {self.labelled_fraction}")
        if not 0.0 <= self.unlabelled_fraction <= 1.0:
            raise ValueError(f"unlabelled_fraction must be in [0, 1], got {self.unlabelled_fraction}")


@dataclass(frozen=True)
class AugmentConfig:
    contrast: tuple[float, float] = (0.8, 1.2)
    brightness: tuple[float, float] = (-0.1, 0.1)


# -- preprocessing -----------------------------------------------------------


def to_unit_range(img: np.ndarray) -> np.ndarray:
    img = np.asarray(img)
    if np.issubdtype(img.dtype, np.integer):
        return (img / np.iinfo(img.dtype).max).astype(np.float32)
    return img.astype(np.float32)


def resize_bilinear(img: np.ndarray, size: tuple[int, int]) -> np.ndarray:
    """Bilinear resample of an ``(H, W)`` or ``(H, W, C)`` array to ``size = (height, width)``."""
    a = np.asarray(img, dtype=np.float32)
    x = torch.from_numpy(np.ascontiguousarray(a))
    x = x[None, None] if a.ndim == 2 else x.permute(2, 0, 1)[None]
    y = F.interpolate(x, size=tuple(size), mode="bilinear", align_corners=False)[0]
    return (y[0] if a.ndim == 2 else y.permute(1, 2, 0)).numpy()


def preprocess_frame(raw: np.ndarray, crop_width: int = CROP_WIDTH, size: tuple[int, int] = NET_SIZE) -> np.ndarray:
    """Crop the black side borders of a 540x1920 RGB frame and resample to 128x384."""
    raw = np.asarray(raw)
    if raw.shape != RAW_SIZE + (3,):
        raise ValueError(f"expected a {RAW_SIZE[0]}x{RAW_SIZE[1]}x3 frame, got {raw.shape}")
    border = (raw.shape[1] - crop_width) // 2
    cropped = to_unit_range(raw[:, border : border + crop_width])
    return resize_bilinear(cropped, size)


def standardize(img: np.ndarray) -> np.ndarray:
    x = np.asarray(img, dtype=np.float64)
    return ((x - x.mean()) / max(x.std(), STD_FLOOR)).astype(np.float32)


def augment(img: np.ndarray, rng: np.random.Generator | None, cfg: AugmentConfig | None = None) -> np.ndarray:
    """Random contrast/brightness, then per-image standardization.

    Contrast scales about the image mean and the result is clipped back to
    ``[0, 1]``; without the clip the adjustment would be undone by the
    standardization. ``rng=None`` applies standardization only.
    """
    x = np.asarray(img, dtype=np.float64)
    if rng is not None:
        cfg = cfg or AugmentConfig()
        c = rng.uniform(*cfg.contrast)
        b = rng.uniform(*cfg.brightness)
        if c != 1.0 or b != 0.0:
            mu = x.mean()
            x = np.clip((x - mu) * c + mu + b, 0.0, 1.0)
    return standardize(x)


# -- fraction sampling --------------------------------------------------------


def round_half_up(x: float) -> int:
    return int(math.floor(x + 0.5))


def _group_rng(seed: int, gid: str, stream: str) -> np.random.Generator:
    return np.random.default_rng([int(seed), zlib.crc32(gid.encode()), zlib.crc32(stream.encode())])


def sample_counts(n_labelled: int, n_unlabelled: int, spec: SampleSpec) -> tuple[int, int]:
    k_l = max(1, round_half_up(spec.labelled_fraction * n_labelled))
    k_u = round_half_up(spec.unlabelled_fraction * n_unlabelled)
    return min(k_l, n_labelled), k_u


def sample_fractions(ds: GroupedDataset, spec: SampleSpec) -> GroupedDataset:
    """Per group, keep a prefix of a seeded permutation of its labelled and unlabelled frames.

    Larger fractions at the same seed give supersets of smaller ones.
    """
    kept: list[Frame] = []
    for gid in ds.group_ids:
        lab, unl = ds.labelled(gid), ds.unlabelled(gid)
        if not lab:
            raise ValueError(f"group {gid!r} has no labelled frames to sample")
        k_l, k_u = sample_counts(len(lab), len(unl), spec)
        perm_l = _group_rng(spec.seed, gid, "labelled").permutation(len(lab))
        perm_u = _group_rng(spec.seed, gid, "unlabelled").permutation(len(unl))
        kept.extend(lab[i] for i in perm_l[:k_l])
        kept.extend(unl[i] for i in perm_u[:k_u])
    return GroupedDataset(tuple(kept))


# -- on-disk layout -----------------------------------------------------------


def save_dataset(ds: GroupedDataset, root: str | Path) -> Path:
    """Write ``root/<group>/{frames,labels}/<frame>.png`` plus ``root/manifest.csv``."""
    root = Path(root)
    for f in ds.frames:
        fdir = root / f.group / "frames"
        fdir.mkdir(parents=True, exist_ok=True)
        rgb = np.clip(np.round(f.image * 255.0), 0, 255).astype(np.uint8)
        Image.fromarray(rgb, mode="RGB").save(fdir / f"{f.frame_id}.png")
        if f.labelled:
            ldir = root / f.group / "labels"
            ldir.mkdir(parents=True, exist_ok=True)
            Image.fromarray((f.mask > 0).astype(np.uint8) * 255, mode="L").save(ldir / f"{f.frame_id}.png")
    with open(root / "manifest.csv", "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=["group_id", "n_frames", "n_labelled"])
        w.writeheader()
        w.writerows(ds.manifest())
    return root


def load_dataset(root: str | Path) -> GroupedDataset:
    """Read the directory layout written by :func:`save_dataset`, validating the manifest."""
    root = Path(root)
    if not root.is_dir():
        raise FileNotFoundError(f"dataset root {root} does not exist")
    manifest_path = root / "manifest.csv"
    manifest = {}
    if manifest_path.exists():
        with open(manifest_path, newline="") as fh:
            for row in csv.DictReader(fh):
                manifest[row["group_id"]] = (int(row["n_frames"]), int(row["n_labelled"]))

    frames: list[Frame] = []
    group_dirs = sorted(p for p in root.iterdir() if p.is_dir())
    for gdir in group_dirs:
        gid = gdir.name
        frame_files = {p.stem: p for p in sorted((gdir / "frames").glob("*.png"))}
        label_files = {p.stem: p for p in sorted((gdir / "labels").glob("*.png"))}
        if not frame_files:
            raise ValueError(f"empty group: {gdir / 'frames'} contains no frames")
        for stem, lpath in label_files.items():
            if stem not in frame_files:
                raise ValueError(f"label without matching frame: {lpath}")
        for stem, fpath in frame_files.items():
            image = to_unit_range(np.asarray(Image.open(fpath).convert("RGB")))
            mask = None
            if stem in label_files:
                lab = np.asarray(Image.open(label_files[stem]).convert("L"))
                if lab.shape != image.shape[:2]:
                    raise ValueError(f"size mismatch: {label_files[stem]} is {lab.shape}, frame is {image.shape[:2]}")
                mask = (lab > 127).astype(np.uint8)
            frames.append(Frame(gid, stem, image, mask))
        if gid in manifest:
            n_frames, n_lab = manifest[gid]
            if (n_frames, n_lab) != (len(frame_files), len(label_files)):
                raise ValueError(
                    f"manifest mismatch for {gdir}: manifest says {n_frames} frames/{n_lab} labelled, "
                    f"found {len(frame_files)}/{len(label_files)}"
                )
    missing = set(manifest) - {p.name for p in group_dirs}
    if missing:
        raise ValueError(f"manifest lists groups with no directory under {root}: {sorted(missing)}")
    return GroupedDataset(tuple(frames))


# -- synthetic data -----------------------------------------------------------


@dataclass(frozen=True)
class SynthConfig:
    groups: int = 8
    frames: int = 100
    labelled: int = 20
    height: int = 64
    width: int = 64
    harmonics: int = 4

    def __post_init__(self):
        if self.groups < 1 or self.frames < 1:
            raise ValueError("groups and frames must be >= 1")
        if not 0 <= self.labelled <= self.frames:
            raise ValueError(f"labelled must be in [0, frames], got {self.labelled}")


def _smooth_noise(rng: np.random.Generator, shape: tuple[int, int], cells: int) -> np.ndarray:
    coarse = rng.standard_normal((cells, cells)).astype(np.float32)
    return resize_bilinear(coarse, shape)


def _shape_radius(theta: np.ndarray, base_r: float, amps: np.ndarray, phases: np.ndarray) -> np.ndarray:
    k = np.arange(2, 2 + len(amps))
    return base_r * (1.0 + (amps[:, None, None] * np.cos(k[:, None, None] * theta + phases[:, None, None])).sum(0))


def shape_mask(cfg: SynthConfig, center, base_r, amps, phases) -> np.ndarray:
    """Exact rasterization of a star-shaped closed curve sampled at pixel centers."""
    yy, xx = np.mgrid[0 : cfg.height, 0 : cfg.width].astype(np.float64)
    dx, dy = xx - center[0], yy - center[1]
    theta = np.arctan2(dy, dx)
    return (np.hypot(dx, dy) < _shape_radius(theta, base_r, amps, phases)).astype(np.uint8)


def synth_generate(cfg: SynthConfig, seed: int = 0) -> GroupedDataset:
    """Render grouped "organ" frames with exact ground-truth masks.

    Each group fixes a base outline, organ and background colors, and texture
    statistics; each frame deforms the outline and adds a lighting gradient,
    specular highlights, distractor blobs and sensor noise.
    """
    rng = np.random.default_rng(seed)
    h, w = cfg.height, cfg.width
    side = min(h, w)
    yy, xx = np.mgrid[0:h, 0:w].astype(np.float64)
    frames: list[Frame] = []
    for g in range(cfg.groups):
        gid = f"g{g:02d}"
        base_r = side * rng.uniform(0.24, 0.32)
        amps = rng.uniform(0.02, 0.12, cfg.harmonics) / np.arange(1, cfg.harmonics + 1)
        phases = rng.uniform(0, 2 * np.pi, cfg.harmonics)
        organ_rgb = np.array([rng.uniform(0.45, 0.75), rng.uniform(0.18, 0.35), rng.uniform(0.15, 0.3)])
        tissue_rgb = np.array([rng.uniform(0.6, 0.9), rng.uniform(0.35, 0.6), rng.uniform(0.35, 0.55)])
        texture_amp = rng.uniform(0.04, 0.1)
        labelled_idx = set(rng.permutation(cfg.frames)[: cfg.labelled].tolist())
        for i in range(cfg.frames):
            center = (w / 2 + rng.uniform(-0.15, 0.15) * w, h / 2 + rng.uniform(-0.15, 0.15) * h)
            f_amps = amps * rng.uniform(0.7, 1.3, cfg.harmonics)
            f_phases = phases + rng.normal(0, 0.25, cfg.harmonics)
            r = base_r * rng.uniform(0.85, 1.15)
            mask = shape_mask(cfg, center, r, f_amps, f_phases)

            bg = tissue_rgb[None, None] * (1 + texture_amp * _smooth_noise(rng, (h, w), 6)[..., None])
            organ = organ_rgb[None, None] * (1 + texture_amp * _smooth_noise(rng, (h, w), 10)[..., None])
            img = np.where(mask[..., None] > 0, organ, bg)
            for _ in range(rng.integers(1, 4)):
                # distractor blobs with organ-like color outside the mask
                cx, cy = rng.uniform(0, w), rng.uniform(0, h)
                rad = side * rng.uniform(0.04, 0.1)
                blob = np.exp(-((xx - cx) ** 2 + (yy - cy) ** 2) / (2 * rad**2))[..., None]
                img = img * (1 - 0.6 * blob) + 0.6 * blob * organ_rgb[None, None]
            angle = rng.uniform(0, 2 * np.pi)
            ramp = (np.cos(angle) * (xx / w - 0.5) + np.sin(angle) * (yy / h - 0.5))[..., None]
            img = img * (1 + rng.uniform(0.2, 0.6) * ramp)
            for _ in range(rng.integers(0, 4)):
                cx, cy = rng.uniform(0, w), rng.uniform(0, h)
                rad = side * rng.uniform(0.01, 0.03)
                img = img + 0.8 * np.exp(-((xx - cx) ** 2 + (yy - cy) ** 2) / (2 * rad**2))[..., None]
            img = img + rng.normal(0, 0.03, img.shape)
            img = np.clip(img, 0, 1).astype(np.float32)
            meta = {"center": center, "radius": r, "amps": f_amps, "phases": f_phases}
            frames.append(Frame(gid, f"f{i:04d}", img, mask if i in labelled_idx else None, meta))
    return GroupedDataset(tuple(frames))
