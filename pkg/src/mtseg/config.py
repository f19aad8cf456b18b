"""Flat ``key = value`` run configuration.

Keys are grouped by dotted prefix, e.g.::

    iterations = 800
    net.depth = 3
    noise.rotation_range = 15
    sweep.labelled_fractions = 0.1, 0.5, 1.0

Unprefixed keys map onto :class:`~mtseg.mean_teacher.TrainConfig` fields.
"""

from __future__ import annotations

import configparser
from dataclasses import fields, replace
from pathlib import Path

from .dataio import AugmentConfig
from .geometry import AffineNoiseConfig
from .losses import RampSchedule
from .mean_teacher import EmaSchedule, TrainConfig
from .segnet import NetConfig

_SECTIONS = {
    "net": ("net", NetConfig),
    "noise": ("noise", AffineNoiseConfig),
    "ramp": ("ramp", RampSchedule),
    "ema": ("ema", EmaSchedule),
    "augment": ("augment", AugmentConfig),
}
_RESERVED = ("sweep", "data", "eval", "synth")


def desk_profile(**overrides) -> TrainConfig:
    """Small CPU profile: 64x64 frames, depth 3, 8 base filters, 800 steps of batch 8."""
    cfg = TrainConfig(iterations=800, batch_size=8, net=NetConfig(depth=3, base_filters=8))
    return replace(cfg, **overrides)


def read_config(path: str | Path) -> dict[str, str]:
    text = Path(path).read_text()
    parser = configparser.ConfigParser(interpolation=None, inline_comment_prefixes=("#",))
    parser.optionxform = str
    try:
        parser.read_string("[root]\n" + text, source=str(path))
    except configparser.Error as exc:
        raise ValueError(f"bad config file {path}: {exc}") from exc
    return dict(parser["root"])


def convert_value(raw: str, current):
    raw = raw.strip()
    if isinstance(current, bool):
        low = raw.lower()
        if low in ("1", "true", "yes", "on"):
            return True
        if low in ("0", "false", "no", "off"):
            return False
        raise ValueError(f"expected a boolean, got {raw!r}")
    if isinstance(current, int):
        return int(raw)
    if isinstance(current, float):
        return float(raw)
    if isinstance(current, tuple):
        return tuple(float(x) for x in raw.split(","))
    if current is None:
        if raw.lower() in ("", "none"):
            return None
        try:
            return int(raw)
        except ValueError:
            return raw
    return raw


def apply_fields(obj, values: dict[str, str], where: str):
    names = {f.name for f in fields(obj)}
    updates = {}
    for k, v in values.items():
        if k not in names:
            raise ValueError(f"unknown config key {where}{k!r}")
        updates[k] = convert_value(v, getattr(obj, k))
    return replace(obj, **updates) if updates else obj


def apply_config(cfg: TrainConfig, values: dict[str, str]) -> TrainConfig:
    """Return ``cfg`` updated with the training-related keys of ``values``."""
    top: dict[str, str] = {}
    nested: dict[str, dict[str, str]] = {}
    for key, v in values.items():
        prefix, _, rest = key.partition(".")
        if rest and prefix in _SECTIONS:
            nested.setdefault(prefix, {})[rest] = v
        elif rest and prefix in _RESERVED:
            continue
        elif rest:
            raise ValueError(f"unknown config section {prefix!r} in key {key!r}")
        else:
            top[key] = v
    updates = {}
    for prefix, vals in nested.items():
        attr, _ = _SECTIONS[prefix]
        sub = getattr(cfg, attr) or AugmentConfig()
        updates[attr] = apply_fields(sub, vals, prefix + ".")
    cfg = replace(cfg, **updates) if updates else cfg
    return apply_fields(cfg, top, "")


def section(values: dict[str, str], prefix: str) -> dict[str, str]:
    p = prefix + "."
    return {k[len(p):]: v for k, v in values.items() if k.startswith(p)}


def float_list(raw: str) -> list[float]:
    return [float(x) for x in raw.split(",") if x.strip()]
