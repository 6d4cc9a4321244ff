"""JSON checkpoints for MLP parameters (pretrained, meta-trained or adapted).

Floats are written with ``repr`` precision, so a save/load round trip is
exact and reruns produce identical files.
"""
from __future__ import annotations

import json
from pathlib import Path

from .coremath import MlpParams
from .errors import ConfigError, DataError

FORMAT = "lsmeta-checkpoint/1"


def model_doc(params, kind, seed=None, log=None, extra=None):
    doc = {
        "format": FORMAT,
        "kind": kind,
        "layer_sizes": params.dims,
        "model": params.to_dict(),
        "seed": seed,
        "log": log or {},
    }
    if extra:
        doc.update(extra)
    return doc


def dump(doc):
    return json.dumps(doc, indent=1, sort_keys=True) + "\n"


def save_model(path, params, kind, seed=None, log=None, extra=None):
    Path(path).write_text(dump(model_doc(params, kind, seed, log, extra)), encoding="utf-8")


def read_doc(path):
    path = Path(path)
    if not path.exists():
        raise ConfigError(f"checkpoint {path} does not exist")
    try:
        doc = json.loads(path.read_text(encoding="utf-8"))
    except json.JSONDecodeError as exc:
        raise DataError(f"{path}: not a valid checkpoint ({exc})") from exc
    if doc.get("format") != FORMAT:
        raise DataError(f"{path}: unknown checkpoint format {doc.get('format')!r}")
    return doc


def load_model(path):
    """Returns ``(MlpParams, document)``."""
    doc = read_doc(path)
    return MlpParams.from_dict(doc["model"]), doc


def save_block_models(path, models, fallback, seed=None, extra=None):
    """Adapted per-block models plus the fallback used for blocks without one."""
    doc = {
        "format": FORMAT,
        "kind": "adapted",
        "layer_sizes": fallback.dims,
        "fallback": fallback.to_dict(),
        "blocks": {str(k): m.to_dict() for k, m in sorted(models.items())},
        "seed": seed,
    }
    if extra:
        doc.update(extra)
    Path(path).write_text(dump(doc), encoding="utf-8")


def load_block_models(path):
    doc = read_doc(path)
    if doc.get("kind") != "adapted":
        raise DataError(f"{path}: expected adapted block models, found {doc.get('kind')!r}")
    models = {int(k): MlpParams.from_dict(v) for k, v in doc["blocks"].items()}
    return models, MlpParams.from_dict(doc["fallback"]), doc
