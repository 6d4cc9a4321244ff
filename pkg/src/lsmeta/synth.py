"""Synthetic study regions with known, spatially varying labelling rules.

A region is a stack of smooth random bands.  The area is cut into Voronoi
patches and each patch follows one rule ("band b above/below threshold"),
so no single global classifier can be exact.  Labelled points are drawn
with a smooth, uneven sampling intensity, which gives blocks very
different sample counts, and a fixed fraction of labels can be flipped.
"""
from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
from scipy.ndimage import gaussian_filter
from scipy.stats import rankdata

from .errors import ConfigError
from .geodata import RasterGrid, SamplePoint, write_ascii_grid, write_samples_csv

DEFAULT_RULES = (
    {"band": 0, "op": ">", "threshold": 0.6},
    {"band": 1, "op": "<", "threshold": 0.4},
)


@dataclass
class SyntheticSpec:
    rows: int = 128
    cols: int = 128
    n_bands: int = 8
    rules: list = field(default_factory=lambda: [dict(r) for r in DEFAULT_RULES])
    n_patches: int = 8
    n_positive: int = 200
    n_negative: int = 200
    label_noise: float = 0.0
    smoothness: float = 6.0  # gaussian sigma of the bands, in cells
    latent_factors: int = 3  # shared fields mixed into every band
    shared_weight: float = 0.6  # share of each band's variance from the shared fields
    intensity_gain: float = 0.5  # log-intensity spread of the sampling density
    cellsize: float = 30.0
    xll: float = 0.0
    yll: float = 0.0
    band_names: list | None = None
    seed: int = 0

    def violations(self):
        v = []
        if self.rows < 2 or self.cols < 2:
            v.append("grid must be at least 2x2")
        if self.n_bands < 1:
            v.append("n_bands must be >= 1")
        if not self.rules:
            v.append("at least one rule is required")
        for i, r in enumerate(self.rules):
            if not 0 <= int(r.get("band", -1)) < self.n_bands:
                v.append(f"rule {i} references band {r.get('band')} but there are {self.n_bands} bands")
            if r.get("op") not in (">", "<"):
                v.append(f"rule {i}: op must be '>' or '<'")
            if not 0.0 < float(r.get("threshold", -1)) < 1.0:
                v.append(f"rule {i}: threshold must be in (0, 1)")
        if not 0.0 <= self.label_noise < 0.5:
            v.append("label_noise must be in [0, 0.5)")
        if self.latent_factors < 0:
            v.append("latent_factors must be >= 0")
        if not 0.0 <= self.shared_weight <= 1.0:
            v.append("shared_weight must be in [0, 1]")
        if self.n_patches < 1:
            v.append("n_patches must be >= 1")
        if self.n_positive < 0 or self.n_negative < 0:
            v.append("sample counts must be non-negative")
        if self.band_names is not None and len(self.band_names) != self.n_bands:
            v.append("band_names length must equal n_bands")
        return v

    def validate(self):
        v = self.violations()
        if v:
            raise ConfigError("invalid synthetic spec: " + "; ".join(v))

    def names(self):
        if self.band_names:
            return list(self.band_names)
        base = ["slope", "drainage", "ndvi", "elevation", "aspect", "lithology", "landuse", "rainfall"]
        return [base[i] if i < len(base) else f"band{i}" for i in range(self.n_bands)]

    @classmethod
    def from_dict(cls, d):
        known = set(cls.__dataclass_fields__)
        unknown = set(d) - known
        if unknown:
            raise ConfigError(f"unknown synthetic spec keys: {sorted(unknown)}")
        return cls(**d)


@dataclass
class SyntheticRegion:
    spec: SyntheticSpec
    bands: dict  # name -> RasterGrid
    truth: RasterGrid  # 0/1 ground-truth labels
    patches: np.ndarray  # (rows, cols) rule index
    points: list  # SamplePoint list (labels possibly noisy)
    clean_labels: np.ndarray
    flipped: np.ndarray  # indices of flipped labels


def _smooth_field(rng, rows, cols, sigma):
    f = gaussian_filter(rng.standard_normal((rows, cols)), sigma, mode="reflect")
    return (f - f.mean()) / (f.std() + 1e-12)


def _to_uniform(field_):
    ranks = rankdata(field_.reshape(-1), method="ordinal").reshape(field_.shape)
    return (ranks - 0.5) / ranks.size


def _bands(spec, rng):
    """Correlated bands with uniform marginals: shared latent fields plus an own field each."""
    rows, cols = spec.rows, spec.cols
    own = [_smooth_field(rng, rows, cols, spec.smoothness) for _ in range(spec.n_bands)]
    if spec.latent_factors == 0 or spec.shared_weight == 0.0:
        return np.stack([_to_uniform(f) for f in own], -1)
    latent = np.stack([_smooth_field(rng, rows, cols, spec.smoothness) for _ in range(spec.latent_factors)], -1)
    mix = rng.standard_normal((spec.latent_factors, spec.n_bands))
    mix /= np.linalg.norm(mix, axis=0)
    shared = latent @ mix
    a, b = np.sqrt(spec.shared_weight), np.sqrt(1.0 - spec.shared_weight)
    return np.stack([_to_uniform(a * shared[..., i] + b * own[i]) for i in range(spec.n_bands)], -1)


def _apply_rule(rule, values):
    v = values[..., int(rule["band"])]
    if rule["op"] == ">":
        return v > rule["threshold"]
    return v < rule["threshold"]


def generate(spec):
    spec.validate()
    ss = np.random.SeedSequence(int(spec.seed))
    band_ss, patch_ss, dens_ss, draw_ss, noise_ss = ss.spawn(5)
    rows, cols = spec.rows, spec.cols

    brng = np.random.default_rng(band_ss)
    cube = np.round(_bands(spec, brng), 6)

    prng = np.random.default_rng(patch_ss)
    seeds = prng.uniform([0, 0], [rows, cols], size=(spec.n_patches, 2))
    rr, cc = np.mgrid[0:rows, 0:cols]
    d2 = (rr[..., None] + 0.5 - seeds[:, 0]) ** 2 + (cc[..., None] + 0.5 - seeds[:, 1]) ** 2
    owner = np.argmin(d2, axis=-1)
    patch_rule = np.arange(spec.n_patches) % len(spec.rules)
    prng.shuffle(patch_rule)
    patches = patch_rule[owner]

    truth = np.zeros((rows, cols), dtype=np.int64)
    for k, rule in enumerate(spec.rules):
        sel = patches == k
        truth[sel] = _apply_rule(rule, cube[sel]).astype(np.int64)

    drng = np.random.default_rng(dens_ss)
    dens = gaussian_filter(drng.standard_normal((rows, cols)), 2 * spec.smoothness, mode="reflect")
    dens = (dens - dens.mean()) / (dens.std() + 1e-12)
    intensity = np.exp(spec.intensity_gain * dens).reshape(-1)

    arng = np.random.default_rng(draw_ss)
    flat_truth = truth.reshape(-1)
    cells, labels = [], []
    for cls, count in ((1, spec.n_positive), (0, spec.n_negative)):
        pool = np.flatnonzero(flat_truth == cls)
        if count > pool.size:
            raise ConfigError(f"asked for {count} samples of class {cls} but only {pool.size} such cells exist")
        if count == 0:
            continue
        p = intensity[pool] / intensity[pool].sum()
        chosen = arng.choice(pool, size=count, replace=False, p=p)
        cells.extend(int(c) for c in chosen)
        labels.extend([cls] * count)
    order = np.argsort(np.array(cells, dtype=np.int64), kind="stable")
    cells = [cells[i] for i in order]
    clean = np.array([labels[i] for i in order], dtype=np.int64)

    nrng = np.random.default_rng(noise_ss)
    n_flip = int(np.floor(spec.label_noise * len(clean) + 0.5))
    flipped = np.sort(nrng.choice(len(clean), size=n_flip, replace=False)) if n_flip else np.array([], dtype=np.int64)
    noisy = clean.copy()
    noisy[flipped] = 1 - noisy[flipped]

    points = []
    for cell, lab in zip(cells, noisy):
        r, c = divmod(cell, cols)
        x = spec.xll + (c + 0.5) * spec.cellsize
        y = spec.yll + (rows - r - 0.5) * spec.cellsize
        points.append(SamplePoint(x, y, int(lab)))

    def grid(values):
        return RasterGrid(values, spec.xll, spec.yll, spec.cellsize, -9999.0)

    bands = {name: grid(cube[..., i]) for i, name in enumerate(spec.names())}
    return SyntheticRegion(spec, bands, grid(truth.astype(np.float64)), patches, points, clean, flipped)


def write_region(region, out_dir):
    """Write bands, samples.csv, truth.asc and region.json into ``out_dir``."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    band_files = {}
    for name, g in region.bands.items():
        fname = f"{name}.asc"
        write_ascii_grid(out / fname, g, ".6f")
        band_files[name] = fname
    write_samples_csv(out / "samples.csv", region.points, ".3f")
    write_ascii_grid(out / "truth.asc", region.truth)
    write_ascii_grid(out / "patches.asc", region.truth.like(region.patches.astype(np.float64)))
    meta = {
        "spec": asdict(region.spec),
        "bands": band_files,
        "samples": "samples.csv",
        "truth": "truth.asc",
        "n_flipped": int(len(region.flipped)),
    }
    (out / "region.json").write_text(json.dumps(meta, indent=2, sort_keys=True) + "\n", encoding="utf-8")
    return meta
