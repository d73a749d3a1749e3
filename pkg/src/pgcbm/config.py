"""Run configuration: one JSON document covering every pipeline stage.

Each section maps onto one of the package's config dataclasses.  Unknown
keys are rejected with the offending path, and loading always yields a
fully resolved document (defaults filled in) suitable for echoing beside
run outputs.
"""

from __future__ import annotations

import dataclasses
import json
from dataclasses import dataclass, field, fields

from . import data as dm
from . import loss as ls
from . import model as md
from . import train as tr


class ConfigError(ValueError):
    pass


@dataclass
class EvalOptions:
    n_bins: int = 5
    variants: tuple = ("pgcbm", "vanilla", "blackbox")

    def validate(self):
        if self.n_bins < 3:
            raise ValueError("n_bins must be at least 3")
        bad = [v for v in self.variants if v not in ("pgcbm", "vanilla", "blackbox")]
        if bad:
            raise ValueError(f"unknown variants: {', '.join(bad)}")


SECTIONS = {
    "synth": dm.SynthConfig,
    "process": dm.ProcessSpec,
    "model": md.SubModelConfig,
    "loss": ls.LossWeights,
    "train": tr.TrainConfig,
    "eval": EvalOptions,
}


@dataclass
class RunConfig:
    synth: dm.SynthConfig = field(default_factory=dm.SynthConfig)
    process: dm.ProcessSpec = field(default_factory=dm.ProcessSpec)
    model: md.SubModelConfig = field(default_factory=md.SubModelConfig)
    loss: ls.LossWeights = field(default_factory=ls.LossWeights)
    train: tr.TrainConfig = field(default_factory=tr.TrainConfig)
    eval: EvalOptions = field(default_factory=EvalOptions)
    out_dir: str = "runs/default"
    seed: int = 0

    def validate(self):
        self.synth.validate()
        self.process.validate()
        self.model.validate()
        self.loss.validate()
        self.train.validate()
        self.eval.validate()

    def with_seed(self, seed: int) -> "RunConfig":
        """Propagate one run seed into every seeded stage."""
        return dataclasses.replace(
            self, seed=seed,
            synth=dataclasses.replace(self.synth, seed=seed),
            train=dataclasses.replace(self.train, seed=seed),
        )

    def to_dict(self) -> dict:
        doc = {name: dataclasses.asdict(getattr(self, name)) for name in SECTIONS}
        doc["out_dir"] = self.out_dir
        doc["seed"] = self.seed
        return _tuples_to_lists(doc)


def _tuples_to_lists(obj):
    if isinstance(obj, dict):
        return {k: _tuples_to_lists(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_tuples_to_lists(v) for v in obj]
    return obj


def _build_section(cls, payload: dict, path: str):
    if not isinstance(payload, dict):
        raise ConfigError(f"section '{path}' must be a JSON object")
    known = {f.name: f for f in fields(cls)}
    unknown = sorted(set(payload) - set(known))
    if unknown:
        raise ConfigError(f"unknown keys under '{path}': {', '.join(unknown)}")
    kwargs = {}
    for key, value in payload.items():
        default = known[key].default
        if default is dataclasses.MISSING and known[key].default_factory is not dataclasses.MISSING:
            default = known[key].default_factory()
        if isinstance(default, tuple) and isinstance(value, list):
            value = tuple(tuple(v) if isinstance(v, list) else v for v in value)
        kwargs[key] = value
    try:
        return cls(**kwargs)
    except TypeError as exc:
        raise ConfigError(f"bad values under '{path}': {exc}") from exc


def from_dict(doc: dict) -> RunConfig:
    if not isinstance(doc, dict):
        raise ConfigError("top-level config must be a JSON object")
    known = set(SECTIONS) | {"out_dir", "seed"}
    unknown = sorted(set(doc) - known)
    if unknown:
        raise ConfigError(f"unknown top-level keys: {', '.join(unknown)}")
    kwargs = {}
    for name, cls in SECTIONS.items():
        if name in doc:
            kwargs[name] = _build_section(cls, doc[name], name)
    if "out_dir" in doc:
        if not isinstance(doc["out_dir"], str):
            raise ConfigError("out_dir must be a string")
        kwargs["out_dir"] = doc["out_dir"]
    if "seed" in doc:
        if not isinstance(doc["seed"], int) or isinstance(doc["seed"], bool):
            raise ConfigError("seed must be an integer")
        kwargs["seed"] = doc["seed"]
    cfg = RunConfig(**kwargs)
    if "seed" in doc:
        cfg = cfg.with_seed(doc["seed"])
    try:
        cfg.validate()
    except ValueError as exc:
        raise ConfigError(str(exc)) from exc
    return cfg


def load(path) -> RunConfig:
    try:
        with open(path) as f:
            text = f.read()
    except OSError as exc:
        raise ConfigError(f"cannot read config: {exc}") from exc
    try:
        doc = json.loads(text)
    except json.JSONDecodeError as exc:
        raise ConfigError(
            f"malformed JSON at line {exc.lineno}, column {exc.colno}: {exc.msg}"
        ) from exc
    return from_dict(doc)


def echo(cfg: RunConfig, path) -> None:
    """Write the fully resolved configuration next to a run's outputs."""
    with open(path, "w") as f:
        json.dump(cfg.to_dict(), f, indent=2, sort_keys=True)
        f.write("\n")
