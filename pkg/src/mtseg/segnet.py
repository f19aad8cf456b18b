"""U-Net with a multi-scale input pyramid.

Encoder level ``k`` works at ``1/2**k`` resolution with ``base_filters * 2**k``
channels. Levels ``1 .. depth-2`` additionally receive the input image
downsampled to their resolution, passed through a 3x3 convolution and
concatenated with the pooled features. The bottom level gets no pyramid
input. The decoder upsamples bilinearly, reduces channels with a 1x1
convolution and concatenates the encoder skip.

Model parameters ("ModelParams") are the module's ``state_dict``: an ordered
mapping from layer path to tensor, fully determined by :class:`NetConfig`.
"""

from __future__ import annotations

import json
import math
import os
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

ModelParams = dict[str, torch.Tensor]


@dataclass(frozen=True)
class NetConfig:
    depth: int = 4
    base_filters: int = 16
    in_channels: int = 3
    num_classes: int = 2

    def __post_init__(self):
        if self.depth < 2:
            raise ValueError(f"depth must be >= 2, got {self.depth}")
        if self.base_filters < 1:
            raise ValueError(f"base_filters must be >= 1, got {self.base_filters}")
        if self.in_channels < 1:
            raise ValueError(f"in_channels must be >= 1, got {self.in_channels}")
        if self.num_classes != 2:
            raise ValueError(f"num_classes must be 2, got {self.num_classes}")

    @property
    def divisor(self) -> int:
        return 2 ** (self.depth - 1)

    def check_input(self, height: int, width: int) -> None:
        if height % self.divisor or width % self.divisor:
            raise ValueError(
                f"input {height}x{width} not divisible by 2**(depth-1) = {self.divisor}"
            )


def image_pyramid(img: torch.Tensor, depth: int) -> list[torch.Tensor]:
    """Return ``depth - 1`` images; level ``k`` is ``img`` average-pooled by ``2**k``.

    Accepts ``(N, C, H, W)`` tensors or channels-last numpy arrays (``HWC`` /
    ``NHWC``), returning the same kind.
    """
    if depth < 2:
        raise ValueError(f"depth must be >= 2, got {depth}")
    as_numpy = isinstance(img, np.ndarray)
    if as_numpy:
        arr = img[None] if img.ndim == 3 else img
        x = torch.from_numpy(np.ascontiguousarray(arr)).permute(0, 3, 1, 2)
    else:
        x = img
    h, w = x.shape[-2:]
    div = 2 ** (depth - 1)
    if h % div or w % div:
        raise ValueError(f"spatial size {h}x{w} not divisible by 2**(depth-1) = {div}")
    levels = [x]
    for _ in range(depth - 2):
        levels.append(F.avg_pool2d(levels[-1], 2))
    if as_numpy:
        levels = [lv.permute(0, 2, 3, 1).numpy() for lv in levels]
        if img.ndim == 3:
            levels = [lv[0] for lv in levels]
    return levels


class ConvBlock(nn.Sequential):
    def __init__(self, cin: int, cout: int):
        super().__init__(
            nn.Conv2d(cin, cout, 3, padding=1, bias=False),
            nn.BatchNorm2d(cout),
            nn.ReLU(inplace=True),
            nn.Conv2d(cout, cout, 3, padding=1, bias=False),
            nn.BatchNorm2d(cout),
            nn.ReLU(inplace=True),
        )


class SegNet(nn.Module):
    def __init__(self, cfg: NetConfig):
        super().__init__()
        self.cfg = cfg
        f = [cfg.base_filters * 2**k for k in range(cfg.depth)]
        self.encoders = nn.ModuleList()
        self.pyramid = nn.ModuleDict()
        for k in range(cfg.depth):
            if k == 0:
                cin = cfg.in_channels
            elif k < cfg.depth - 1:
                self.pyramid[str(k)] = nn.Conv2d(cfg.in_channels, f[k - 1], 3, padding=1)
                cin = 2 * f[k - 1]
            else:
                cin = f[k - 1]
            self.encoders.append(ConvBlock(cin, f[k]))
        self.reducers = nn.ModuleList(nn.Conv2d(f[k + 1], f[k], 1) for k in range(cfg.depth - 1))
        self.decoders = nn.ModuleList(ConvBlock(2 * f[k], f[k]) for k in range(cfg.depth - 1))
        self.head = nn.Conv2d(f[0], cfg.num_classes, 1)

    def logits(self, x: torch.Tensor) -> torch.Tensor:
        if x.ndim != 4 or x.shape[1] != self.cfg.in_channels:
            raise ValueError(
                f"expected input (N, {self.cfg.in_channels}, H, W), got {tuple(x.shape)}"
            )
        self.cfg.check_input(*x.shape[-2:])
        pyr = image_pyramid(x, self.cfg.depth)
        skips = []
        h = self.encoders[0](x)
        for k in range(1, self.cfg.depth):
            h_in = F.max_pool2d(h, 2)
            if k < self.cfg.depth - 1:
                h_in = torch.cat([h_in, self.pyramid[str(k)](pyr[k])], dim=1)
            skips.append(h)
            h = self.encoders[k](h_in)
        for k in reversed(range(self.cfg.depth - 1)):
            up = F.interpolate(h, scale_factor=2, mode="bilinear", align_corners=False)
            h = self.decoders[k](torch.cat([self.reducers[k](up), skips[k]], dim=1))
        return self.head(h)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        """Per-pixel class probabilities, ``(N, 2, H, W)``."""
        return torch.softmax(self.logits(x), dim=1)


def _init_weights(model: SegNet, gen: torch.Generator) -> None:
    for m in model.modules():
        if isinstance(m, nn.Conv2d):
            fan_in = m.in_channels * m.kernel_size[0] * m.kernel_size[1]
            bound = math.sqrt(6.0 / fan_in)
            with torch.no_grad():
                m.weight.uniform_(-bound, bound, generator=gen)
                if m.bias is not None:
                    m.bias.zero_()


def build(cfg: NetConfig, seed: int = 0) -> SegNet:
    """Fresh network with fan-in scaled uniform weights drawn from ``seed``."""
    model = SegNet(cfg)
    gen = torch.Generator().manual_seed(int(seed))
    _init_weights(model, gen)
    return model


def params(model: nn.Module) -> ModelParams:
    """Value copy of all named weights and normalization buffers."""
    return {k: v.detach().clone() for k, v in model.state_dict().items()}


def parameter_count(cfg: NetConfig) -> int:
    return sum(p.numel() for p in SegNet(cfg).parameters())


def l2_penalty(model: nn.Module) -> torch.Tensor:
    """Sum of squared convolution weights and biases; normalization scale/shift excluded."""
    total = None
    for m in model.modules():
        if isinstance(m, nn.Conv2d):
            for p in (m.weight, m.bias):
                if p is not None:
                    sq = p.pow(2).sum()
                    total = sq if total is None else total + sq
    return total


def predict(model: SegNet, images: np.ndarray, batch_size: int = 32) -> np.ndarray:
    """Eval-mode probabilities for a channels-last image batch; returns ``(N, H, W, 2)``."""
    was_training = model.training
    model.eval()
    out = []
    try:
        with torch.no_grad():
            for i in range(0, len(images), batch_size):
                x = torch.from_numpy(np.ascontiguousarray(images[i : i + batch_size], dtype=np.float32))
                out.append(model(x.permute(0, 3, 1, 2)).permute(0, 2, 3, 1).numpy())
    finally:
        model.train(was_training)
    return np.concatenate(out) if out else np.zeros((0,) + images.shape[1:3] + (2,), np.float32)


def save_checkpoint(path: str | os.PathLike, model: SegNet, step: int, extra: dict | None = None) -> None:
    """Write named arrays plus a JSON header (config, step) to an ``.npz`` archive.

    The archive is written to a temporary file and renamed into place.
    """
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    header = {"net_config": asdict(model.cfg), "step": int(step), **(extra or {})}
    arrays = {f"param/{k}": v.detach().cpu().numpy() for k, v in model.state_dict().items()}
    tmp = path.with_name(path.name + ".tmp")
    with open(tmp, "wb") as fh:
        np.savez(fh, __header__=np.array(json.dumps(header, sort_keys=True)), **arrays)
    os.replace(tmp, path)


def load_checkpoint(path: str | os.PathLike) -> tuple[SegNet, dict]:
    """Rebuild a network from a checkpoint, validating key set and shapes."""
    with np.load(path, allow_pickle=False) as data:
        header = json.loads(str(data["__header__"]))
        stored = {k[len("param/"):]: data[k] for k in data.files if k.startswith("param/")}
    model = SegNet(NetConfig(**header["net_config"]))
    expected = model.state_dict()
    if set(stored) != set(expected):
        missing = sorted(set(expected) - set(stored))
        unexpected = sorted(set(stored) - set(expected))
        raise ValueError(f"checkpoint {path}: key mismatch, missing={missing} unexpected={unexpected}")
    for k, v in expected.items():
        if tuple(stored[k].shape) != tuple(v.shape):
            raise ValueError(f"checkpoint {path}: shape mismatch for {k}: {stored[k].shape} vs {tuple(v.shape)}")
    model.load_state_dict({k: torch.from_numpy(np.array(stored[k])) for k in expected})
    return model, header
