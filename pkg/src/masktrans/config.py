"""Run configuration: a strict, versioned JSON document.

Every section and key is listed in :data:`SCHEMA` with its default, type
and allowed range.  Unknown keys and out-of-range values raise
:class:`UnknownKey` / :class:`RangeError` carrying the 1-based line of the
offending key in the source text.
"""

from __future__ import annotations

import json
import re
from dataclasses import dataclass
from pathlib import Path
from typing import Any

from .errors import ConfigError, RangeError, UnknownKey
from .objectives import LossWeights
from .sampling import SamplerConfig
from .training import TrainConfig

SCHEMA_VERSION = 1


@dataclass(frozen=True)
class Field:
    default: Any
    kind: type
    help: str
    lo: float | None = None
    hi: float | None = None
    lo_open: bool = False
    hi_open: bool = False
    choices: tuple | None = None
    nullable: bool = False

    def check(self, key: str, value, line: int | None):
        if value is None and self.nullable:
            return None
        if self.kind is float and isinstance(value, int) and not isinstance(value, bool):
            value = float(value)
        if self.kind is int and isinstance(value, float) and value.is_integer():
            value = int(value)
        if not isinstance(value, self.kind) or (self.kind is not bool and isinstance(value, bool)):
            raise ConfigError(f"{key} must be {self.kind.__name__}, got {type(value).__name__}", line)
        if self.choices is not None and value not in self.choices:
            raise RangeError(f"{key} must be one of {list(self.choices)}, got {value!r}", line)
        if self.lo is not None and (value < self.lo or (self.lo_open and value == self.lo)):
            raise RangeError(f"{key}={value} below {'(' if self.lo_open else '['}{self.lo}", line)
        if self.hi is not None and (value > self.hi or (self.hi_open and value == self.hi)):
            raise RangeError(f"{key}={value} above {self.hi}{')' if self.hi_open else ']'}", line)
        return value


SCHEMA: dict[str, dict[str, Field]] = {
    "sampler": {
        "global_crop": Field(352, int, "square crop side for the global discriminator", lo=8),
        "threshold": Field(0.5, float, "min fraction of agreeing labels (strict) for a crop pair", lo=0, hi=1, hi_open=True),
        "local_ratio": Field(1 / 8, float, "local patch side as a fraction of the crop", lo=0, hi=1, lo_open=True),
        "local_batch": Field(32, int, "patches per step for the local discriminator", lo=1),
        "max_retries": Field(100, int, "rejection draws before a pair is skipped", lo=1),
        "base_height": Field(526, int, "image height after resizing", lo=8),
    },
    "train": {
        "steps": Field(1000, int, "training steps (one D and one G update each)", lo=1),
        "seed": Field(0, int, "master seed", lo=0),
        "lr0": Field(0.0001, float, "initial learning rate", lo=0, lo_open=True),
        "lr_floor": Field(0.0000125, float, "learning rate floor", lo=0),
        "decay_every": Field(3, int, "halve the learning rate every this many epochs", lo=1),
        "width_multiplier": Field(1 / 16, float, "channel width multiplier", lo=0, hi=1, lo_open=True),
        "denorm": Field("fate", str, "denormalization: fate or fade", choices=("fate", "fade")),
        "mask_discriminator": Field(True, bool, "mask global discriminator inputs"),
        "use_local_discriminator": Field(True, bool, "train the local patch discriminator"),
        "sampling": Field("similarity", str, "crop sampling: similarity or random", choices=("similarity", "random")),
        "dtype": Field("float32", str, "float32 or float64 (bitwise-reproducible mode)", choices=("float32", "float64")),
        "checkpoint_every": Field(1000, int, "steps between checkpoints", lo=1),
        "perceptual_seed": Field(1234, int, "seed of the frozen perceptual feature network", lo=0),
    },
    "loss": {
        "global_adv": Field(1.0, float, "weight of the masked global adversarial loss", lo=0),
        "local_adv": Field(1.0, float, "weight of the local adversarial loss", lo=0),
        "perceptual": Field(1.0, float, "weight of the perceptual loss", lo=0),
        "r1": Field(0.03, float, "weight of the R1 penalty", lo=0),
    },
    "metrics": {
        "crop_ratio": Field(1 / 8, float, "sKVD/cKVD crop side as a fraction of image height", lo=0, hi=1, lo_open=True),
        "threshold": Field(0.5, float, "sKVD/cKVD overlap threshold (strict)", lo=0, hi=1, hi_open=True),
        "pixel_threshold": Field(0.05, float, "cKVD min class pixel fraction (strict)", lo=0, hi=1, hi_open=True),
        "n_pairs": Field(64, int, "crop pairs per metric", lo=2),
        "seed": Field(0, int, "metric sampling seed", lo=0),
        "features": Field("toy", str, "feature provider: toy or ftc1:DIR"),
    },
    "paths": {
        "data": Field(None, str, "dataset root with domainA/ and domainB/", nullable=True),
        "out": Field(None, str, "output directory", nullable=True),
    },
}


@dataclass
class RunConfig:
    schema_version: int
    sampler: dict
    train: dict
    loss: dict
    metrics: dict
    paths: dict

    def sampler_config(self) -> SamplerConfig:
        return SamplerConfig(**self.sampler)

    def loss_weights(self) -> LossWeights:
        return LossWeights(**self.loss)

    def train_config(self) -> TrainConfig:
        return TrainConfig(sampler=self.sampler_config(), weights=self.loss_weights(), **self.train)

    def to_dict(self) -> dict:
        return {"schema_version": self.schema_version, **{s: dict(getattr(self, s)) for s in SCHEMA}}

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), sort_keys=True, indent=2)


def defaults() -> dict:
    return {"schema_version": SCHEMA_VERSION, **{s: {k: f.default for k, f in fs.items()} for s, fs in SCHEMA.items()}}


def _key_lines(text: str) -> dict[tuple[str, ...], int]:
    """Map (section, key) paths to the line of their first occurrence."""
    lines: dict[tuple[str, ...], int] = {}
    section = None
    depth = 0
    key_re = re.compile(r'"((?:[^"\\]|\\.)*)"\s*:')
    for lineno, line in enumerate(text.splitlines(), 1):
        pos = 0
        while pos < len(line):
            ch = line[pos]
            if ch == '"':
                m = key_re.match(line, pos)
                if m:
                    key = json.loads(f'"{m.group(1)}"')
                    path = (key,) if depth == 1 else (section, key)
                    lines.setdefault(path, lineno)
                    if depth == 1:
                        section = key
                    pos = m.end()
                    continue
                end = pos + 1
                while end < len(line) and line[end] != '"':
                    end += 2 if line[end] == "\\" else 1
                pos = end + 1
                continue
            if ch in "{[":
                depth += 1
            elif ch in "}]":
                depth -= 1
            pos += 1
    return lines


def parse_config_text(text: str) -> RunConfig:
    try:
        raw = json.loads(text)
    except json.JSONDecodeError as exc:
        raise ConfigError(f"invalid JSON: {exc.msg}", exc.lineno) from exc
    if not isinstance(raw, dict):
        raise ConfigError("top level must be a JSON object", 1)
    lines = _key_lines(text)
    version = raw.get("schema_version")
    if version is None:
        raise ConfigError("missing schema_version", 1)
    if version != SCHEMA_VERSION:
        raise ConfigError(f"unsupported schema_version {version!r} (expected {SCHEMA_VERSION})",
                          lines.get(("schema_version",)))
    out = defaults()
    for section, body in raw.items():
        if section == "schema_version":
            continue
        if section not in SCHEMA:
            raise UnknownKey(section, lines.get((section,)))
        if not isinstance(body, dict):
            raise ConfigError(f"section {section} must be an object", lines.get((section,)))
        for key, value in body.items():
            line = lines.get((section, key))
            if key not in SCHEMA[section]:
                raise UnknownKey(f"{section}.{key}", line)
            out[section][key] = SCHEMA[section][key].check(f"{section}.{key}", value, line)
    if out["train"]["lr0"] < out["train"]["lr_floor"]:
        raise RangeError("train.lr0 must be >= train.lr_floor", lines.get(("train", "lr0")))
    if out["sampler"]["global_crop"] * out["sampler"]["local_ratio"] < 4:
        raise RangeError("local patches must be at least 4 pixels wide", lines.get(("sampler", "local_ratio")))
    return RunConfig(**out)


def parse_config(path) -> RunConfig:
    return parse_config_text(Path(path).read_text())


def schema_table() -> list[tuple[str, Any, str]]:
    """(dotted key, default, help) for every field, in schema order."""
    return [(f"{s}.{k}", f.default, f.help) for s, fs in SCHEMA.items() for k, f in fs.items()]
