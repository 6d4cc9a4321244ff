"""End-to-end pipeline stages with file artifacts and resumable execution.

Layout of ``output_dir``::

    manifest.json                 config hash, seed and per-stage input digests
    <region>/blocks.asc           block id per cell (nodata -1)
    <region>/segmentation.json    block report and excluded samples
    tasks.json                    train/test tasks with support/query sample ids
    f0.json                       pretrained base classifier
    intermediate.json             meta-trained initialisation
    metatrain_log.csv             epoch, weighted meta-loss, task ids
    <region>/adapted.json         per-block adapted models
    <region>/lsm.asc              susceptibility probabilities
    <region>/levels.asc           susceptibility levels 1-4
    <region>/levels.pgm           quick-look image of the levels
    metrics.csv, roc.csv          test-query evaluation

Each stage reads only its predecessors' files, so any stage can be rerun on
its own.  A stage is skipped under ``resume`` when its recorded input
digest matches and all of its outputs exist.
"""
from __future__ import annotations

import hashlib
import json
import logging
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from . import checkpoint
from .config import PipelineConfig, digest
from .errors import LsmError, PipelineError
from .evaluate import (
    confusion,
    derive_seed,
    mode_split,
    predict_lsm,
    roc_auc,
    write_levels_pgm,
    write_metrics_csv,
    write_roc_csv,
)
from .geodata import (
    featurize_all_cells,
    featurize_samples,
    load_ascii_grid,
    load_stack,
    read_samples_csv,
    write_ascii_grid,
)
from .metadata import MetaTask, build_tasks, split_all
from .metalearn import MetaConfig, few_shot_adapt, meta_train, write_log_csv
from .pretrain import greedy_pretrain
from .segmentation import block_raster, group_samples, segment

log = logging.getLogger(__name__)

STAGES = ("segment", "pretrain", "metatrain", "adapt", "predict", "evaluate")

# stage seeds are derived from the master seed and these fixed stream ids
SEED_SPLIT, SEED_PRETRAIN, SEED_META = 1, 2, 3


@dataclass
class PreparedRegion:
    """A region's stack, labelled samples, segmentation and meta-tasks."""

    name: str
    stack: object
    samples: object
    seg: object
    tasks: list
    excluded: list = field(default_factory=list)


def prepare_region(name, stack, points, slic_config, min_per_class=1):
    samples = featurize_samples(stack, points)
    seg = segment(stack, slic_config)
    group_samples(seg, samples)
    built = build_tasks(seg, samples, min_per_class, region=name)
    return PreparedRegion(name, stack, samples, seg, built.tasks, built.excluded)


# -- bookkeeping -----------------------------------------------------------


def file_digest(path):
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()[:16]


class Run:
    """A pipeline invocation over one output directory."""

    def __init__(self, config: PipelineConfig, resume=False):
        self.config = config
        self.out = Path(config.output_dir)
        self.resume = resume
        self.config_hash = config.hash()
        self.manifest_path = self.out / "manifest.json"
        self.manifest = {"config_hash": self.config_hash, "seed": config.seed, "stages": {}}
        if self.manifest_path.exists():
            try:
                old = json.loads(self.manifest_path.read_text(encoding="utf-8"))
                self.manifest["stages"] = old.get("stages", {})
            except json.JSONDecodeError:
                pass
        self._stacks = {}
        self._samples = {}

    # inputs --------------------------------------------------------------

    def region_config(self, name):
        for r in self.config.regions:
            if r.name == name:
                return r
        raise PipelineError(f"unknown region {name!r}")

    def stack(self, name):
        if name not in self._stacks:
            self._stacks[name] = load_stack(self.region_config(name).bands)
        return self._stacks[name]

    def samples(self, name):
        if name not in self._samples:
            pts = read_samples_csv(self.region_config(name).samples)
            self._samples[name] = featurize_samples(self.stack(name), pts)
        return self._samples[name]

    def region_digest(self):
        return [
            {
                "name": r.name,
                "bands": {b: file_digest(p) for b, p in r.bands.items()},
                "samples": file_digest(r.samples),
            }
            for r in self.config.regions
        ]

    def path(self, *parts):
        p = self.out.joinpath(*parts)
        p.parent.mkdir(parents=True, exist_ok=True)
        return p

    # stage control -------------------------------------------------------

    def _outputs(self, stage):
        names = [r.name for r in self.config.regions]
        per_region = {
            "segment": ["blocks.asc", "segmentation.json"],
            "adapt": ["adapted.json"],
            "predict": ["lsm.asc", "levels.asc", "levels.pgm"],
        }
        shared = {
            "segment": ["tasks.json"],
            "pretrain": ["f0.json"],
            "metatrain": ["intermediate.json", "metatrain_log.csv"],
            "evaluate": ["metrics.csv", "roc.csv"],
        }
        out = [self.out / f for f in shared.get(stage, [])]
        out += [self.out / n / f for n in names for f in per_region.get(stage, [])]
        return out

    def _inputs(self, stage):
        c = self.config
        upstream = {
            s: self.manifest["stages"].get(s, {}).get("digest")
            for s in STAGES[: STAGES.index(stage)]
        }
        common = {"regions": self.region_digest(), "seed": c.seed, "upstream": upstream}
        specific = {
            "segment": {"slic": asdict(c.slic), "min_per_class": c.min_per_class, "mode": c.mode,
                        "split_fraction": c.split_fraction, "k_shot": c.k_shot},
            "pretrain": {"pretrain": c.to_dict()["pretrain"]},
            "metatrain": {"meta": asdict(c.meta)},
            "adapt": {"alpha": c.meta.alpha, "steps": c.meta.inner_steps},
            "predict": {},
            "evaluate": {"threshold": c.threshold},
        }[stage]
        return digest({**common, **specific})

    def run_stage(self, stage):
        fn = getattr(self, f"stage_{stage}")
        key = self._inputs(stage)
        rec = self.manifest["stages"].get(stage)
        if self.resume and rec and rec.get("digest") == key and all(p.exists() for p in self._outputs(stage)):
            log.info("stage %s is up to date; skipped", stage)
            return False
        try:
            fn()
        except LsmError as exc:
            exc.args = (f"stage {stage}: {exc}",) + exc.args[1:]
            raise
        self.manifest["stages"][stage] = {
            "digest": key,
            "outputs": {str(p.relative_to(self.out)): file_digest(p) for p in self._outputs(stage)},
        }
        self.write_manifest()
        return True

    def write_manifest(self):
        self.out.mkdir(parents=True, exist_ok=True)
        self.manifest["config_hash"] = self.config_hash
        self.manifest["config"] = self.config.to_dict()
        self.manifest_path.write_text(json.dumps(self.manifest, indent=2, sort_keys=True) + "\n", encoding="utf-8")

    def run(self, stages=STAGES):
        done = []
        for s in stages:
            if self.run_stage(s):
                done.append(s)
        return done

    def _stamp(self):
        return {"config_hash": self.config_hash, "seed": self.config.seed}

    # stages --------------------------------------------------------------

    def stage_segment(self):
        c = self.config
        prepared = []
        for r in c.regions:
            stack = self.stack(r.name)
            samples = self.samples(r.name)
            seg = segment(stack, c.slic)
            group_samples(seg, samples)
            built = build_tasks(seg, samples, c.min_per_class, region=r.name)
            prepared.append(PreparedRegion(r.name, stack, samples, seg, built.tasks, built.excluded))
            write_ascii_grid(self.path(r.name, "blocks.asc"), block_raster(seg, stack.template))
            extra = {**self._stamp(), "excluded_blocks": built.excluded,
                     "excluded_points": samples.excluded}
            self.path(r.name, "segmentation.json").write_text(
                seg.report_json(samples.y, extra) + "\n", encoding="utf-8")
        split_seed = derive_seed(c.seed, SEED_SPLIT)
        train, test = mode_split(c.mode, prepared, c.split_fraction, split_seed)
        train = split_all(train, c.k_shot, derive_seed(split_seed, 3), skip_small=True)
        test = split_all(test, c.k_shot, derive_seed(split_seed, 4), skip_small=True)
        if not train:
            raise PipelineError(f"no training task is large enough for k_shot={c.k_shot}")
        # blocks of every region get an adaptation support set, even if not a test task
        seen = {t.task_id for t in train + test}
        rest = [t for p in prepared for t in p.tasks if t.task_id not in seen]
        rest = split_all(rest, c.k_shot, derive_seed(split_seed, 5), skip_small=True)
        doc = {**self._stamp(), "mode": c.mode, "k_shot": c.k_shot,
               "tasks": [_task_entry(t, "train") for t in train] + [_task_entry(t, "test") for t in test]
               + [_task_entry(t, "adapt_only") for t in rest]}
        self.path("tasks.json").write_text(json.dumps(doc, indent=1, sort_keys=True) + "\n", encoding="utf-8")

    def load_tasks(self, part=None):
        p = self.out / "tasks.json"
        if not p.exists():
            raise PipelineError("tasks.json is missing; run the segment stage first")
        doc = json.loads(p.read_text(encoding="utf-8"))
        out = []
        for e in doc["tasks"]:
            if part is not None and e["part"] not in part:
                continue
            s = self.samples(e["region"])
            idx = np.array(e["samples"], dtype=np.int64)
            pos = {int(v): i for i, v in enumerate(idx)}
            t = MetaTask(e["task"], e["block"], idx, s.X[idx], s.y[idx].copy(), e["region"],
                         np.array([pos[v] for v in e["support"]], dtype=np.int64),
                         np.array([pos[v] for v in e["query"]], dtype=np.int64))
            out.append((e["part"], t))
        return out

    def stage_pretrain(self):
        c = self.config
        cells = np.concatenate([featurize_all_cells(self.stack(r.name)).values for r in c.regions])
        seed = derive_seed(c.seed, SEED_PRETRAIN)
        stack, f0 = greedy_pretrain(cells, c.pretrain, seed)
        logs = {k: {"initial_error": v.initial_error, "epoch_errors": v.epoch_errors} for k, v in stack.logs.items()}
        checkpoint.save_model(self.path("f0.json"), f0, "pretrained", seed, logs, self._stamp())

    def stage_metatrain(self):
        c = self.config
        f0, _ = checkpoint.load_model(self.out / "f0.json")
        train = [t for part, t in self.load_tasks({"train"})]
        seed = derive_seed(c.seed, SEED_META)
        mc = MetaConfig(**{**asdict(c.meta), "seed": seed})
        inter = meta_train(f0, train, mc)
        write_log_csv(self.path("metatrain_log.csv"), inter.log)
        checkpoint.save_model(self.path("intermediate.json"), inter.params, "intermediate", seed,
                              {"final_meta_loss": inter.log[-1].meta_loss if inter.log else None},
                              self._stamp())

    def stage_adapt(self):
        c = self.config
        inter, _ = checkpoint.load_model(self.out / "intermediate.json")
        tasks = self.load_tasks()
        for r in c.regions:
            models = {}
            for _, t in tasks:
                if t.region == r.name:
                    models[t.block_id] = few_shot_adapt(inter, t.support_set(), c.meta.alpha, c.meta.inner_steps)
            checkpoint.save_block_models(self.path(r.name, "adapted.json"), models, inter, None, self._stamp())

    def stage_predict(self):
        for r in self.config.regions:
            models, fallback, _ = checkpoint.load_block_models(self.out / r.name / "adapted.json")
            blocks = load_ascii_grid(self.out / r.name / "blocks.asc")
            stack = self.stack(r.name)
            labels = blocks.values.astype(np.int64)
            lsm = predict_lsm(labels, models, fallback, stack.normalized_cube(), stack.valid_mask())
            tmpl = stack.template
            values = np.where(lsm.skip_mask, -9999.0, lsm.values)
            write_ascii_grid(self.path(r.name, "lsm.asc"), tmpl.like(values, -9999.0), ".6f")
            write_ascii_grid(self.path(r.name, "levels.asc"), tmpl.like(lsm.levels.astype(np.float64), 0.0))
            write_levels_pgm(self.path(r.name, "levels.pgm"), lsm.levels)

    def stage_evaluate(self):
        c = self.config
        test = [t for part, t in self.load_tasks({"test"}) if t.n >= c.min_task_size]
        adapted = {r.name: checkpoint.load_block_models(self.out / r.name / "adapted.json")[0]
                   for r in c.regions}
        from .coremath import predict_proba

        rows, scores, labels = [], [], []
        for t in test:
            Xq, yq = t.query_set()
            s = predict_proba(adapted[t.region][t.block_id], Xq)
            rows.append((t.task_id, confusion(s, yq, c.threshold)))
            scores.append(s)
            labels.append(yq)
        if not test:
            raise PipelineError(f"no test task with >= {c.min_task_size} samples to evaluate")
        s = np.concatenate(scores)
        y = np.concatenate(labels).astype(np.int64)
        write_metrics_csv(self.path("metrics.csv"), [("all", confusion(s, y, c.threshold))] + rows)
        curves = [(0, roc_auc(s, y))] if 0 < y.sum() < y.size else []
        write_roc_csv(self.path("roc.csv"), curves)


def _task_entry(t, part):
    return {
        "task": t.task_id, "block": int(t.block_id), "region": t.region, "part": part, "n": t.n,
        "samples": [int(v) for v in t.sample_idx],
        "support": [int(v) for v in t.sample_idx[t.support]],
        "query": [int(v) for v in t.sample_idx[t.query]],
        **t.class_counts(),
    }
