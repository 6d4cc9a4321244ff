"""Synthetic few-shot benchmark: two synthetic regions, one shared f_0.

Compares block-adapted meta-learned models with a global MLP, sweeps the
support size, contrasts softmax and uniform task weighting under label
noise, and compares single-region with joint meta-training (modes A, C).
"""
from __future__ import annotations

import logging
import time
from dataclasses import asdict, dataclass, field, replace

import numpy as np

from .evaluate import ExperimentConfig, derive_seed, run_experiment, write_runs_csv, write_stats_csv
from .geodata import build_stack, featurize_all_cells
from .metadata import HALF
from .metalearn import SOFTMAX, UNIFORM, MetaConfig, SupervisedConfig
from .pipeline import prepare_region
from .pretrain import PretrainConfig, greedy_pretrain
from .segmentation import SlicConfig
from .synth import SyntheticSpec, generate

log = logging.getLogger(__name__)


@dataclass
class BenchmarkConfig:
    seed: int = 0
    synth: SyntheticSpec = field(default_factory=SyntheticSpec)
    slic: SlicConfig = field(default_factory=lambda: SlicConfig(n_blocks=64))
    pretrain: PretrainConfig = field(default_factory=PretrainConfig)
    meta: MetaConfig = field(default_factory=lambda: MetaConfig(meta_epochs=500))
    supervised: SupervisedConfig = field(default_factory=SupervisedConfig)
    k_values: tuple = (1, 5, HALF)
    k_main: int = 5
    repeats: int = 20
    noise_repeats: int = 10
    label_noise: float = 0.1
    min_task_size: int = 10


@dataclass
class BenchmarkReport:
    results: dict  # name -> ExperimentResult
    seconds: float
    task_counts: dict

    def mean(self, name):
        return self.results[name].stats.mean

    def std(self, name):
        return self.results[name].stats.std

    def checks(self, k_values=(1, 5, HALF), k_main=5):
        ks = [self.mean(f"A_k{k}") for k in k_values]
        return {
            "7a": (self.mean(f"A_k{k_main}") - self.mean("A_global") >= 0.05,
                   f"adapted {self.mean(f'A_k{k_main}'):.4f} vs global MLP {self.mean('A_global'):.4f}"),
            "7b": (all(a <= b for a, b in zip(ks, ks[1:])),
                   "mean OA over K " + ", ".join(f"{k}: {v:.4f}" for k, v in zip(k_values, ks))),
            "7c": (self.std("noise_softmax") <= self.std("noise_uniform"),
                   f"OA std softmax {self.std('noise_softmax'):.4f} vs uniform {self.std('noise_uniform'):.4f}"),
            "7d": (self.mean(f"C_k{k_main}") >= self.mean(f"A_k{k_main}"),
                   f"mode C {self.mean(f'C_k{k_main}'):.4f} vs mode A {self.mean(f'A_k{k_main}'):.4f}"),
        }


def build_regions(config):
    """(region1, region2, noisy region1, f_0) for the benchmark."""
    specs = [replace(config.synth, seed=derive_seed(config.seed, 11)),
             replace(config.synth, seed=derive_seed(config.seed, 12))]
    noisy_spec = replace(specs[0], label_noise=config.label_noise)
    regions = []
    for name, spec in (("r1", specs[0]), ("r2", specs[1]), ("r1_noisy", noisy_spec)):
        syn = generate(spec)
        stack = build_stack(list(syn.bands.items()))
        regions.append(prepare_region(name, stack, syn.points, config.slic))
    cells = np.concatenate([featurize_all_cells(r.stack).values for r in regions[:2]])
    _, f0 = greedy_pretrain(cells, config.pretrain, derive_seed(config.seed, 13))
    return regions[0], regions[1], regions[2], f0


def run_benchmark(config=None, out_dir=None):
    config = config or BenchmarkConfig()
    t0 = time.perf_counter()
    r1, r2, r1n, f0 = build_regions(config)

    def exp(mode, regions, k, method="meta", weighting=SOFTMAX, repeats=config.repeats):
        ec = ExperimentConfig(method=method, meta=replace(config.meta, weighting=weighting),
                              supervised=config.supervised, min_task_size=config.min_task_size)
        return run_experiment(mode, regions, f0, k, repeats, derive_seed(config.seed, 20), ec)

    results = {}
    for k in config.k_values:
        results[f"A_k{k}"] = exp("A", [r1], k)
    results["A_global"] = exp("A", [r1], config.k_main, method="global_mlp")
    results[f"C_k{config.k_main}"] = exp("C", [r1, r2], config.k_main)
    results["noise_softmax"] = exp("A", [r1n], config.k_main, repeats=config.noise_repeats)
    results["noise_uniform"] = exp("A", [r1n], config.k_main, weighting=UNIFORM, repeats=config.noise_repeats)
    seconds = time.perf_counter() - t0
    report = BenchmarkReport(results, seconds, {r.name: len(r.tasks) for r in (r1, r2, r1n)})
    for name, res in results.items():
        log.info("%s: mean OA %.4f std %.4f", name, res.stats.mean, res.stats.std)
    if out_dir is not None:
        from pathlib import Path

        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        write_stats_csv(out / "benchmark_stats.csv", list(results.values()))
        for name, res in results.items():
            write_runs_csv(out / f"benchmark_{name}_runs.csv", res)
    return report


def config_dict(config):
    d = asdict(config)
    d["k_values"] = list(config.k_values)
    return d
