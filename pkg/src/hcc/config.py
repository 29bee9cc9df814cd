"""Unified run configuration: one JSON document drives every subcommand.

Sections (all optional, defaults follow the trained-at-16kHz setup):
``dataset`` (synth corpus or wav ingestion), ``model``, ``train``,
``probes`` (list of probe specs), ``quantizer``, ``out_dir``. Unknown
keys anywhere are rejected by name.
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass, fields
from pathlib import Path

from .dataset import DataError, SynthConfig
from .model import ModelConfig, ModelError
from .probes import ProbeError, ProbeSpec
from .trainer import TrainConfig, TrainerError


class ConfigError(Exception):
    pass


@dataclass(frozen=True)
class WavDataConfig:
    paths: tuple
    window_samples: int = 20480
    sample_rate: int = 16000
    stride: int | None = None

    def validate(self):
        if not self.paths:
            raise ConfigError("dataset.paths must list at least one wav file")
        if self.window_samples < 1:
            raise ConfigError("window_samples must be >= 1")
        return self


@dataclass(frozen=True)
class QuantizerOptions:
    source: str = "c_l"

    def validate(self):
        base = self.source[:-3] if self.source.endswith("+dm") else self.source
        if base not in ("z_s", "c_s", "z_l", "c_l", "c_s&c_l"):
            raise ConfigError(f"quantizer.source {self.source!r} unknown")
        return self


DEFAULT_PROBES = (
    ProbeSpec("c_l", "long_attr"), ProbeSpec("c_l", "long_attr2"),
    ProbeSpec("c_l", "short_attr"), ProbeSpec("c_s", "long_attr"),
    ProbeSpec("c_s", "long_attr2"), ProbeSpec("c_s", "short_attr"),
    ProbeSpec("c_s&c_l", "long_attr"), ProbeSpec("c_s&c_l", "long_attr2"),
)


@dataclass
class RunConfig:
    dataset: SynthConfig | WavDataConfig
    model: ModelConfig
    train: TrainConfig
    probes: tuple
    quantizer: QuantizerOptions
    out_dir: str
    raw: dict

    def config_hash(self):
        canon = json.dumps(self.raw, sort_keys=True, separators=(",", ":"))
        return hashlib.sha256(canon.encode()).hexdigest()


def _check_keys(section, d, allowed):
    unknown = set(d) - set(allowed)
    if unknown:
        where = f" in {section}" if section else ""
        raise ConfigError(f"unknown key {sorted(unknown)[0]!r}{where}")


def _dataset_from_dict(d):
    d = dict(d)
    kind = d.pop("kind", "synth")
    if kind == "synth":
        _check_keys("dataset", d, [f.name for f in fields(SynthConfig)])
        try:
            return SynthConfig(**_as_tuples(d, ("segment_ms",))).validate()
        except DataError as e:
            raise ConfigError(f"dataset: {e}") from e
    if kind == "wav":
        _check_keys("dataset", d, [f.name for f in fields(WavDataConfig)])
        if "paths" in d:
            d["paths"] = tuple(d["paths"])
        return WavDataConfig(**d).validate()
    raise ConfigError(f"dataset.kind must be 'synth' or 'wav', got {kind!r}")


def _as_tuples(d, keys):
    d = dict(d)
    for k in keys:
        if k in d:
            d[k] = tuple(d[k])
    return d


def _probes_from_list(items):
    specs = []
    for i, item in enumerate(items):
        if not isinstance(item, dict):
            raise ConfigError(f"probes[{i}] must be an object")
        _check_keys(f"probes[{i}]", item, [f.name for f in fields(ProbeSpec)])
        try:
            specs.append(ProbeSpec(**item).validate())
        except ProbeError as e:
            raise ConfigError(f"probes[{i}]: {e}") from e
    return tuple(specs)


def config_from_dict(doc: dict) -> RunConfig:
    if not isinstance(doc, dict):
        raise ConfigError("config document must be a JSON object")
    _check_keys("", doc, ["dataset", "model", "train", "probes", "quantizer", "out_dir"])
    dataset = _dataset_from_dict(doc.get("dataset", {}))
    try:
        model = ModelConfig.from_dict(_as_tuples(
            doc.get("model", {}),
            ("short_filters", "short_strides", "long_filters", "long_strides")))
    except ModelError as e:
        raise ConfigError(f"model: {e}") from e
    try:
        train = TrainConfig.from_dict(doc.get("train", {}))
    except TrainerError as e:
        raise ConfigError(f"train: {e}") from e
    probes = (_probes_from_list(doc["probes"]) if "probes" in doc else DEFAULT_PROBES)
    qopts = doc.get("quantizer", {})
    _check_keys("quantizer", qopts, [f.name for f in fields(QuantizerOptions)])
    quantizer = QuantizerOptions(**qopts).validate()
    out_dir = doc.get("out_dir", "runs/default")
    if not isinstance(out_dir, str):
        raise ConfigError("out_dir must be a string")
    return RunConfig(dataset=dataset, model=model, train=train, probes=probes,
                     quantizer=quantizer, out_dir=out_dir, raw=doc)


def parse_config(path) -> RunConfig:
    """Load, validate and default-fill a JSON run configuration."""
    p = Path(path)
    if not p.exists():
        raise ConfigError(f"config file not found: {p}")
    try:
        doc = json.loads(p.read_text())
    except json.JSONDecodeError as e:
        raise ConfigError(f"parse error at line {e.lineno}, column {e.colno}: {e.msg}") from e
    return config_from_dict(doc)
