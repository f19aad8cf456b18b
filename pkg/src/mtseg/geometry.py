"""Random affine noise: sampling, composition and warping.

A transform is a 2x3 matrix acting on homogeneous ``(x, y, 1)`` pixel
coordinates (``x`` = column, ``y`` = row) that maps *output* pixels to the
*input* location they are sampled from. With that convention::

    warp(warp(img, t1), t2) == warp(img, compose(t2, t1))

The numpy-facing functions take channels-last arrays; ``warp_tensor`` is the
batched, differentiable torch kernel they share with the training loop.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Sequence, Union

import numpy as np
import torch

__all__ = [
    "AffineTransform",
    "AffineNoiseConfig",
    "identity",
    "translation",
    "rotation",
    "sample_affine",
    "decompose",
    "compose",
    "warp_tensor",
    "warp_image",
    "warp_mask",
    "warp_probmap",
    "warp_probmap_tensor",
]


@dataclass(frozen=True, eq=False)
class AffineTransform:
    matrix: np.ndarray

    def __post_init__(self):
        m = np.array(self.matrix, dtype=np.float64)
        if m.shape != (2, 3):
            raise ValueError(f"affine matrix must be 2x3, got shape {m.shape}")
        if not np.all(np.isfinite(m)):
            raise ValueError("affine matrix has non-finite entries")
        if abs(np.linalg.det(m[:, :2])) < 1e-12:
            raise ValueError("affine matrix is not invertible (zero determinant)")
        m.setflags(write=False)
        object.__setattr__(self, "matrix", m)

    def homogeneous(self) -> np.ndarray:
        return np.vstack([self.matrix, [0.0, 0.0, 1.0]])

    def inverse(self) -> "AffineTransform":
        return AffineTransform(np.linalg.inv(self.homogeneous())[:2])

    def __eq__(self, other):
        if not isinstance(other, AffineTransform):
            return NotImplemented
        return bool(np.array_equal(self.matrix, other.matrix))

    def allclose(self, other: "AffineTransform", atol: float = 1e-10) -> bool:
        return bool(np.allclose(self.matrix, other.matrix, rtol=0.0, atol=atol))


@dataclass(frozen=True)
class AffineNoiseConfig:
    """Symmetric parameter ranges for random affine noise.

    Angles are in degrees, translation is a fraction of the image side and
    ``scale_range`` is a ``(low, high)`` interval containing 1.
    """

    rotation_range: float = 15.0
    scale_range: tuple[float, float] = (0.9, 1.1)
    shear_range: float = 5.0
    translation_range: float = 0.1
    fill_value: float = 0.0

    def __post_init__(self):
        lo, hi = self.scale_range
        if self.rotation_range < 0 or self.shear_range < 0 or self.translation_range < 0:
            raise ValueError("rotation, shear and translation ranges must be >= 0")
        if not (0 < lo <= 1.0 <= hi):
            raise ValueError(f"scale_range must be a positive interval containing 1, got {self.scale_range}")
        if self.shear_range >= 90:
            raise ValueError("shear_range must be below 90 degrees")

    @classmethod
    def none(cls) -> "AffineNoiseConfig":
        """Degenerate ranges: every sample is the identity."""
        return cls(rotation_range=0.0, scale_range=(1.0, 1.0), shear_range=0.0, translation_range=0.0)


def identity() -> AffineTransform:
    return AffineTransform(np.array([[1.0, 0.0, 0.0], [0.0, 1.0, 0.0]]))


def translation(dx: float, dy: float) -> AffineTransform:
    """Shift content by ``(dx, dy)`` pixels: output ``(x, y)`` reads input ``(x - dx, y - dy)``."""
    return AffineTransform(np.array([[1.0, 0.0, -dx], [0.0, 1.0, -dy]]))


def _about_center(linear: np.ndarray, shape: tuple[int, int], shift=(0.0, 0.0)) -> AffineTransform:
    h, w = shape
    c = np.array([(w - 1) / 2.0, (h - 1) / 2.0])
    offset = c - linear @ c + np.asarray(shift, dtype=np.float64)
    return AffineTransform(np.column_stack([linear, offset]))


def rotation(degrees: float, shape: tuple[int, int]) -> AffineTransform:
    """Rotation of the sampling grid about the image center."""
    a = math.radians(degrees)
    lin = np.array([[math.cos(a), -math.sin(a)], [math.sin(a), math.cos(a)]])
    return _about_center(lin, shape)


def _linear_part(angle: float, scale: float, shear: float) -> np.ndarray:
    # scale * R(angle) @ [[1, tan(shear)], [0, 1]]
    c, s = math.cos(angle), math.sin(angle)
    rot = np.array([[c, -s], [s, c]])
    sh = np.array([[1.0, math.tan(shear)], [0.0, 1.0]])
    return scale * rot @ sh


def sample_affine(rng: np.random.Generator, cfg: AffineNoiseConfig, shape: tuple[int, int]) -> AffineTransform:
    """Draw one transform with parameters uniform over the ranges in ``cfg``.

    ``shape`` is the ``(height, width)`` of the images the transform will act
    on; it fixes the rotation center and the pixel size of translations.
    """
    h, w = shape
    angle = math.radians(rng.uniform(-cfg.rotation_range, cfg.rotation_range))
    scale = rng.uniform(*cfg.scale_range)
    shear = math.radians(rng.uniform(-cfg.shear_range, cfg.shear_range))
    tx = rng.uniform(-cfg.translation_range, cfg.translation_range) * w
    ty = rng.uniform(-cfg.translation_range, cfg.translation_range) * h
    return _about_center(_linear_part(angle, scale, shear), shape, (tx, ty))


def decompose(t: AffineTransform) -> dict[str, float]:
    """Recover ``angle``/``shear`` (degrees), ``scale`` and the offset of a sampled transform."""
    lin = t.matrix[:, :2]
    scale = math.hypot(lin[0, 0], lin[1, 0])
    angle = math.atan2(lin[1, 0], lin[0, 0])
    # rotate back; remaining upper-triangular part is scale * [[1, tan(shear)], [0, 1]]
    c, s = math.cos(angle), math.sin(angle)
    upper = np.array([[c, s], [-s, c]]) @ lin / scale
    return {
        "angle": math.degrees(angle),
        "scale": scale,
        "shear": math.degrees(math.atan(upper[0, 1])),
        "tx": float(t.matrix[0, 2]),
        "ty": float(t.matrix[1, 2]),
    }


def compose(outer: AffineTransform, inner: AffineTransform) -> AffineTransform:
    """Transform equivalent to warping with ``inner`` and then with ``outer``."""
    # output->input maps chain in reverse: the outer warp samples the inner result
    return AffineTransform((inner.homogeneous() @ outer.homogeneous())[:2])


Transforms = Union[AffineTransform, Sequence[AffineTransform], np.ndarray, torch.Tensor]


def _as_matrices(t: Transforms, n: int) -> torch.Tensor:
    if isinstance(t, AffineTransform):
        mats = np.broadcast_to(t.matrix, (n, 2, 3))
    elif isinstance(t, torch.Tensor):
        mats = t.detach().cpu().numpy()
    elif isinstance(t, np.ndarray):
        mats = t
    else:
        mats = np.stack([tt.matrix if isinstance(tt, AffineTransform) else AffineTransform(tt).matrix for tt in t])
    mats = np.asarray(mats, dtype=np.float64)
    if mats.shape == (2, 3):
        mats = np.broadcast_to(mats, (n, 2, 3))
    if mats.shape != (n, 2, 3):
        raise ValueError(f"expected {n} transforms of shape 2x3, got array of shape {mats.shape}")
    if not np.all(np.isfinite(mats)):
        raise ValueError("affine matrix has non-finite entries")
    if np.any(np.abs(np.linalg.det(mats[:, :, :2])) < 1e-12):
        raise ValueError("affine matrix is not invertible (zero determinant)")
    return torch.from_numpy(np.array(mats, dtype=np.float64, order="C"))


def warp_tensor(
    x: torch.Tensor,
    transforms: Transforms,
    mode: str = "bilinear",
    fill: float | Sequence[float] = 0.0,
) -> torch.Tensor:
    """Warp a ``(N, C, H, W)`` tensor with one transform per item.

    ``fill`` is used for samples outside the input, either a scalar or one
    value per channel. Bilinear taps falling outside the input contribute
    ``fill``, so outputs stay within ``[min(x, fill), max(x, fill)]``. The
    result is differentiable with respect to ``x``.
    """
    if x.ndim != 4:
        raise ValueError(f"expected a (N, C, H, W) tensor, got shape {tuple(x.shape)}")
    if mode not in ("bilinear", "nearest"):
        raise ValueError(f"unknown interpolation mode {mode!r}")
    n, c, h, w = x.shape
    mats = _as_matrices(transforms, n)

    ys, xs = torch.meshgrid(
        torch.arange(h, dtype=torch.float64), torch.arange(w, dtype=torch.float64), indexing="ij"
    )
    xs, ys = xs.reshape(1, -1), ys.reshape(1, -1)
    src_x = mats[:, 0, 0:1] * xs + mats[:, 0, 1:2] * ys + mats[:, 0, 2:3]
    src_y = mats[:, 1, 0:1] * xs + mats[:, 1, 1:2] * ys + mats[:, 1, 2:3]

    fill_t = torch.as_tensor(fill, dtype=x.dtype).reshape(-1)
    if fill_t.numel() not in (1, c):
        raise ValueError(f"fill must be a scalar or have {c} entries")
    fill_t = fill_t.reshape(1, -1, 1).expand(1, c, 1)
    flat = x.reshape(n, c, h * w)

    def tap(ix: torch.Tensor, iy: torch.Tensor) -> torch.Tensor:
        valid = (ix >= 0) & (ix < w) & (iy >= 0) & (iy < h)
        idx = (iy.clamp(0, h - 1) * w + ix.clamp(0, w - 1)).long()
        vals = torch.gather(flat, 2, idx.unsqueeze(1).expand(n, c, -1))
        return torch.where(valid.unsqueeze(1), vals, fill_t)

    if mode == "nearest":
        out = tap(torch.floor(src_x + 0.5), torch.floor(src_y + 0.5))
    else:
        x0, y0 = torch.floor(src_x), torch.floor(src_y)
        wx = (src_x - x0).to(x.dtype).unsqueeze(1)
        wy = (src_y - y0).to(x.dtype).unsqueeze(1)
        out = (
            tap(x0, y0) * ((1 - wx) * (1 - wy))
            + tap(x0 + 1, y0) * (wx * (1 - wy))
            + tap(x0, y0 + 1) * ((1 - wx) * wy)
            + tap(x0 + 1, y0 + 1) * (wx * wy)
        )
    return out.reshape(n, c, h, w)


def _to_nchw(arr: np.ndarray) -> tuple[torch.Tensor, int]:
    a = np.asarray(arr)
    if a.ndim not in (2, 3, 4):
        raise ValueError(f"expected HW, HWC or NHWC array, got {a.ndim} dims")
    if not np.all(np.isfinite(a)):
        raise ValueError("image contains non-finite values")
    ndim = a.ndim
    if ndim == 2:
        a = a[None, :, :, None]
    elif ndim == 3:
        a = a[None]
    return torch.from_numpy(np.ascontiguousarray(a, dtype=np.float64)).permute(0, 3, 1, 2), ndim


def _from_nchw(t: torch.Tensor, ndim: int) -> np.ndarray:
    a = t.permute(0, 2, 3, 1).numpy()
    if ndim == 2:
        return a[0, :, :, 0]
    if ndim == 3:
        return a[0]
    return a


def warp_image(img: np.ndarray, t: Transforms, mode: str = "bilinear", fill: float = 0.0) -> np.ndarray:
    """Warp a channels-last image (HW, HWC or NHWC); same shape and float dtype out."""
    x, ndim = _to_nchw(img)
    out = _from_nchw(warp_tensor(x, t, mode=mode, fill=fill), ndim)
    dtype = img.dtype if np.issubdtype(np.asarray(img).dtype, np.floating) else np.float64
    return out.astype(dtype, copy=False)


def warp_mask(mask: np.ndarray, t: Transforms) -> np.ndarray:
    """Nearest-neighbour warp of a hard mask; out-of-frame pixels become background."""
    m = np.asarray(mask)
    out = warp_image(m.astype(np.float64), t, mode="nearest", fill=0.0)
    return out.astype(m.dtype)


def warp_probmap_tensor(p: torch.Tensor, transforms: Transforms) -> torch.Tensor:
    """Warp ``(N, 2, H, W)`` class probabilities; outside the frame is certain background."""
    fill = [1.0] + [0.0] * (p.shape[1] - 1)
    out = warp_tensor(p, transforms, mode="bilinear", fill=fill)
    return out / out.sum(dim=1, keepdim=True)


def warp_probmap(p: np.ndarray, t: Transforms) -> np.ndarray:
    """Channels-last counterpart of :func:`warp_probmap_tensor` (HWC or NHWC)."""
    x, ndim = _to_nchw(p)
    out = _from_nchw(warp_probmap_tensor(x, t), ndim)
    return out.astype(p.dtype if np.issubdtype(p.dtype, np.floating) else np.float64, copy=False)
