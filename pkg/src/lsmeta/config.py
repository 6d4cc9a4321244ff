"""Pipeline configuration: a JSON document whose values flags may override.

Schema (all sections optional except ``regions`` and ``seed``)::

    {
      "seed": 0,
      "output_dir": "out",
      "regions": [{"name": "r1", "bands": {"slope": "r1/slope.asc", ...},
                   "samples": "r1/samples.csv"}],
      "slic": {"n_blocks": 64, "compactness": 1.0, "iterations": 5,
               "feature_weights": null, "distance_mode": "verbatim_eq2"},
      "pretrain": {"hidden": [32, 64, 32], "rbm_epochs": 20, "rbm_lr": 0.001,
                   "dae_epochs": 20, "dae_lr": 1e-05, "corruption_rate": 0.2,
                   "batch_size": 32},
      "meta": {"alpha": 0.1, "inner_steps": 5, "meta_lr": 0.0001,
               "meta_epochs": 5000, "task_batch_size": 4,
               "grad_mode": "second_order", "weighting": "softmax"},
      "supervised": {"epochs": 300, "lr": 0.01, "batch_size": 64},
      "k_shot": 5, "mode": "A", "repeats": 10, "split_fraction": 0.6,
      "min_task_size": 10, "min_per_class": 1, "threshold": 0.5
    }

Relative paths are resolved against the config file's directory.
"""
from __future__ import annotations

import hashlib
import json
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

from .errors import ConfigError
from .metadata import HALF
from .metalearn import MetaConfig, SupervisedConfig
from .pretrain import PretrainConfig
from .segmentation import SlicConfig

SECTIONS = {
    "slic": SlicConfig,
    "pretrain": PretrainConfig,
    "meta": MetaConfig,
    "supervised": SupervisedConfig,
}


@dataclass
class RegionConfig:
    name: str
    bands: dict  # band name -> path, in stacking order
    samples: str


@dataclass
class PipelineConfig:
    regions: list
    seed: int
    output_dir: str = "out"
    slic: SlicConfig = field(default_factory=SlicConfig)
    pretrain: PretrainConfig = field(default_factory=PretrainConfig)
    meta: MetaConfig = field(default_factory=MetaConfig)
    supervised: SupervisedConfig = field(default_factory=SupervisedConfig)
    k_shot: object = 5
    mode: str = "A"
    repeats: int = 10
    split_fraction: float = 0.6
    min_task_size: int = 10
    min_per_class: int = 1
    threshold: float = 0.5

    def to_dict(self):
        d = asdict(self)
        d["pretrain"]["hidden"] = list(self.pretrain.hidden)
        return d

    def validate(self, check_files=True):
        problems = []
        if not self.regions:
            problems.append("at least one region is required")
        names = [r.name for r in self.regions]
        if len(set(names)) != len(names):
            problems.append(f"region names must be unique: {names}")
        if check_files:
            for r in self.regions:
                for band, p in r.bands.items():
                    if not Path(p).is_file():
                        problems.append(f"region {r.name}: band {band} file {p} does not exist")
                if not Path(r.samples).is_file():
                    problems.append(f"region {r.name}: samples file {r.samples} does not exist")
        if self.k_shot != HALF and (not isinstance(self.k_shot, int) or self.k_shot < 1):
            problems.append(f"k_shot must be a positive integer or {HALF!r}")
        if self.mode not in ("A", "B", "C", "D"):
            problems.append(f"unknown experiment mode {self.mode!r}")
        if self.repeats < 1:
            problems.append("repeats must be >= 1")
        if not 0.0 < self.split_fraction < 1.0:
            problems.append("split_fraction must be in (0, 1)")
        if len(self.pretrain.hidden) != 3:
            problems.append("pretrain.hidden needs three sizes (rbm1, rbm2, dae)")
        for label, check in (("meta", self.meta.validate), ("slic", self.slic.validate)):
            try:
                check()
            except ConfigError as exc:
                problems.append(f"{label}: {exc}")
        if problems:
            raise ConfigError("invalid pipeline config: " + "; ".join(problems))
        return self

    def hash(self):
        """Short digest of every setting that affects results."""
        d = self.to_dict()
        d.pop("output_dir")
        return digest(d)


def digest(obj):
    text = json.dumps(obj, sort_keys=True, separators=(",", ":"), default=str)
    return hashlib.sha256(text.encode("utf-8")).hexdigest()[:16]


def _section(cls, d, name):
    if d is None:
        return cls()
    if not isinstance(d, dict):
        raise ConfigError(f"section {name!r} must be an object")
    known = {f.name for f in fields(cls)}
    unknown = set(d) - known
    if unknown:
        raise ConfigError(f"unknown keys in section {name!r}: {sorted(unknown)}")
    d = dict(d)
    if cls is PretrainConfig and "hidden" in d:
        d["hidden"] = tuple(d["hidden"])
    return cls(**d)


def _resolve(base, p):
    p = Path(p)
    return str(p if p.is_absolute() or base is None else Path(base) / p)


def _k_shot(v):
    if v == HALF or v is None:
        return v
    try:
        return int(v)
    except (TypeError, ValueError):
        raise ConfigError(f"k_shot must be an integer or {HALF!r}, got {v!r}") from None


def from_dict(d, base_dir=None):
    if not isinstance(d, dict):
        raise ConfigError("config must be a JSON object")
    if "seed" not in d or d["seed"] is None:
        raise ConfigError("config needs an explicit integer 'seed'")
    top = {f.name for f in fields(PipelineConfig)}
    unknown = set(d) - top
    if unknown:
        raise ConfigError(f"unknown config keys: {sorted(unknown)}")
    regions = []
    for i, r in enumerate(d.get("regions") or []):
        try:
            regions.append(RegionConfig(
                str(r["name"]),
                {str(k): _resolve(base_dir, v) for k, v in r["bands"].items()},
                _resolve(base_dir, r["samples"]),
            ))
        except (KeyError, TypeError, AttributeError) as exc:
            raise ConfigError(f"region {i}: needs 'name', 'bands' and 'samples' ({exc})") from None
    kwargs = {k: v for k, v in d.items() if k not in SECTIONS and k != "regions"}
    for name, cls in SECTIONS.items():
        kwargs[name] = _section(cls, d.get(name), name)
    kwargs["seed"] = int(kwargs["seed"])
    kwargs["k_shot"] = _k_shot(kwargs.get("k_shot", 5))
    if "output_dir" in kwargs:
        kwargs["output_dir"] = _resolve(base_dir, kwargs["output_dir"])
    return PipelineConfig(regions=regions, **kwargs)


def load_config(path, overrides=None):
    """Read a JSON config file and apply ``{"section.key": value}`` overrides."""
    path = Path(path)
    if not path.is_file():
        raise ConfigError(f"config file {path} does not exist")
    try:
        d = json.loads(path.read_text(encoding="utf-8"))
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{path}: invalid JSON ({exc})") from exc
    overrides = dict(overrides or {})
    out_dir = overrides.pop("output_dir", None)
    apply_overrides(d, overrides)
    cfg = from_dict(d, path.parent)
    if out_dir is not None:
        cfg.output_dir = str(out_dir)  # flag paths are relative to the working directory
    return cfg


def apply_overrides(d, overrides):
    for key, value in overrides.items():
        if value is None:
            continue
        parts = key.split(".")
        node = d
        for p in parts[:-1]:
            node = node.setdefault(p, {})
        node[parts[-1]] = value
    return d
