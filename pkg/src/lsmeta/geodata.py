"""Thematic rasters, sample points and feature extraction.

Rasters are ESRI ASCII grids.  Row 0 of ``RasterGrid.values`` is the
northernmost row, exactly as the file stores it; the linear ``pixel_index``
of cell (r, c) is ``r * cols + c``.
"""
from __future__ import annotations

import csv
import logging
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import AlignmentError, ConfigError, NoDataError, OutOfBoundsError, ParseError

log = logging.getLogger(__name__)

HEADER_KEYS = ("ncols", "nrows", "xllcorner", "yllcorner", "cellsize", "nodata_value")
DEFAULT_NODATA = -9999.0


@dataclass
class RasterGrid:
    values: np.ndarray  # (rows, cols) float64, row 0 = north
    xll: float
    yll: float
    cellsize: float
    nodata: float = DEFAULT_NODATA
    header: dict = field(default_factory=dict, compare=False, repr=False)

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=np.float64)
        if self.values.ndim != 2:
            raise ValueError("raster values must be 2-D")
        if not self.cellsize > 0:
            raise ValueError(f"cellsize must be positive, got {self.cellsize}")

    @property
    def rows(self):
        return self.values.shape[0]

    @property
    def cols(self):
        return self.values.shape[1]

    @property
    def shape(self):
        return self.values.shape

    def nodata_mask(self):
        return (self.values == self.nodata) | ~np.isfinite(self.values)

    def same_geometry(self, other):
        return (
            self.shape == other.shape
            and self.xll == other.xll
            and self.yll == other.yll
            and self.cellsize == other.cellsize
        )

    def like(self, values, nodata=None):
        """A grid with this georeferencing and new values."""
        return RasterGrid(np.asarray(values, dtype=np.float64), self.xll, self.yll,
                          self.cellsize, self.nodata if nodata is None else nodata)


def _parse_number(token, lineno, path):
    try:
        return float(token)
    except ValueError:
        raise ParseError(f"cannot parse number {token!r}", lineno, path) from None


def read_ascii_grid(text, path=None):
    """Parse ESRI ASCII grid text."""
    lines = text.splitlines()
    header = {}
    raw_header = {}
    i = 0
    while i < len(lines) and len(header) < len(HEADER_KEYS):
        parts = lines[i].split()
        if not parts:
            i += 1
            continue
        key = parts[0].lower()
        if key not in HEADER_KEYS:
            if key in ("xllcenter", "yllcenter"):
                raise ParseError(f"{parts[0]} headers are not supported; use xllcorner/yllcorner", i + 1, path)
            break
        if len(parts) != 2:
            raise ParseError(f"malformed header line {lines[i]!r}", i + 1, path)
        raw_header[key] = (parts[0], parts[1])
        header[key] = _parse_number(parts[1], i + 1, path)
        i += 1
    missing = [k for k in HEADER_KEYS if k not in header and k != "nodata_value"]
    if missing:
        raise ParseError(f"missing header keys: {', '.join(missing)}", i + 1, path)
    ncols, nrows = header["ncols"], header["nrows"]
    if ncols != int(ncols) or nrows != int(nrows) or ncols < 1 or nrows < 1:
        raise ParseError("ncols/nrows must be positive integers", None, path)
    ncols, nrows = int(ncols), int(nrows)
    expected = ncols * nrows
    values = []
    for lineno in range(i, len(lines)):
        for tok in lines[lineno].split():
            values.append(_parse_number(tok, lineno + 1, path))
    if len(values) != expected:
        raise ParseError(f"expected {expected} values, got {len(values)}", len(lines), path)
    if header["cellsize"] <= 0:
        raise ParseError("cellsize must be positive", None, path)
    return RasterGrid(
        np.array(values, dtype=np.float64).reshape(nrows, ncols),
        header["xllcorner"],
        header["yllcorner"],
        header["cellsize"],
        header.get("nodata_value", DEFAULT_NODATA),
        raw_header,
    )


def load_ascii_grid(path):
    path = Path(path)
    try:
        text = path.read_text(encoding="utf-8")
    except FileNotFoundError:
        raise ConfigError(f"raster file not found: {path}") from None
    return read_ascii_grid(text, path)


def _fmt_header_value(grid, key):
    if key in grid.header:
        return grid.header[key][1]
    v = {
        "ncols": grid.cols,
        "nrows": grid.rows,
        "xllcorner": grid.xll,
        "yllcorner": grid.yll,
        "cellsize": grid.cellsize,
        "nodata_value": grid.nodata,
    }[key]
    if isinstance(v, int):
        return str(v)
    return repr(float(v))


_HEADER_NAMES = {
    "ncols": "ncols",
    "nrows": "nrows",
    "xllcorner": "xllcorner",
    "yllcorner": "yllcorner",
    "cellsize": "cellsize",
    "nodata_value": "NODATA_value",
}


def format_ascii_grid(grid, fmt=None):
    """Render a grid as ESRI ASCII text.

    Header values read from a file are echoed verbatim.  ``fmt`` is a
    format spec for cell values; the default writes the shortest string that
    parses back to the identical float.
    """
    out = []
    for key in HEADER_KEYS:
        if key in ("ncols", "nrows"):
            value = str(grid.cols if key == "ncols" else grid.rows)
        else:
            value = _fmt_header_value(grid, key)
        name = grid.header[key][0] if key in grid.header else _HEADER_NAMES[key]
        out.append(f"{name} {value}")
    if fmt is None:
        conv = _short_float
    else:
        def conv(v):
            return format(v, fmt)
    for row in grid.values:
        out.append(" ".join(conv(float(v)) for v in row))
    return "\n".join(out) + "\n"


def _short_float(v):
    if v == int(v) and abs(v) < 1e15:
        return str(int(v))
    return repr(v)


def write_ascii_grid(path, grid, fmt=None):
    Path(path).write_text(format_ascii_grid(grid, fmt), encoding="utf-8")


# -- stacks ----------------------------------------------------------------


@dataclass
class RasterStack:
    """Co-registered bands with per-band (min, max) over valid cells."""

    names: list
    grids: list
    norm_stats: np.ndarray  # (M, 2)

    @property
    def n_bands(self):
        return len(self.grids)

    @property
    def rows(self):
        return self.grids[0].rows

    @property
    def cols(self):
        return self.grids[0].cols

    @property
    def template(self):
        return self.grids[0]

    def valid_mask(self):
        """True where no band is nodata."""
        bad = np.zeros(self.grids[0].shape, dtype=bool)
        for g in self.grids:
            bad |= g.nodata_mask()
        return ~bad

    def raw_cube(self):
        return np.stack([g.values for g in self.grids], axis=-1)

    def normalized_cube(self):
        """(rows, cols, M) array of normalised values; invalid cells hold NaN."""
        cube = normalize(self, self.raw_cube())
        cube[~self.valid_mask()] = np.nan
        return cube


def build_stack(grids):
    """Stack named grids after checking they share the same georeferencing."""
    grids = list(grids)
    if not grids:
        raise ConfigError("a raster stack needs at least one band")
    names = [n for n, _ in grids]
    rasters = [g for _, g in grids]
    ref = rasters[0]
    for name, g in zip(names[1:], rasters[1:]):
        if not ref.same_geometry(g):
            raise AlignmentError(f"band {name!r} is not aligned with band {names[0]!r}")
    stats = []
    for name, g in zip(names, rasters):
        valid = g.values[~g.nodata_mask()]
        if valid.size == 0:
            raise ConfigError(f"band {name!r} has no valid cells")
        lo, hi = float(valid.min()), float(valid.max())
        if not lo < hi:
            raise ConfigError(f"degenerate band {name!r}: min = max = {lo}")
        stats.append((lo, hi))
    return RasterStack(names, rasters, np.array(stats, dtype=np.float64))


def normalize(stack, raw):
    """Min-max scale raw band values to [0, 1] (clamped)."""
    raw = np.asarray(raw, dtype=np.float64)
    lo, hi = stack.norm_stats[:, 0], stack.norm_stats[:, 1]
    return np.clip((raw - lo) / (hi - lo), 0.0, 1.0)


# -- samples ---------------------------------------------------------------

UNLABELED = None


@dataclass(frozen=True)
class SamplePoint:
    x: float
    y: float
    label: int | None = None


@dataclass
class FeatureVector:
    values: np.ndarray
    label: int | None
    pixel_index: int
    block_id: int | None = None


@dataclass
class CellFeatures:
    """Feature vectors of every valid cell, in row-major order."""

    values: np.ndarray  # (n_valid, M)
    pixel_index: np.ndarray  # (n_valid,)
    skip_mask: np.ndarray  # (rows, cols) True where skipped

    def __len__(self):
        return len(self.pixel_index)


def cell_of(stack, x, y):
    """(row, col) of the cell containing world point (x, y).

    Columns come from floor((x - xll) / cellsize); a point on a shared edge
    goes to the cell with the higher index along that axis.  The far edges
    of the extent belong to the last cell.
    """
    g = stack.template
    fx = (x - g.xll) / g.cellsize
    fy = (y - g.yll) / g.cellsize
    if not (0 <= fx <= g.cols and 0 <= fy <= g.rows) or math.isnan(fx) or math.isnan(fy):
        raise OutOfBoundsError(f"point ({x}, {y}) lies outside the raster extent")
    col = min(int(math.floor(fx)), g.cols - 1)
    row_from_south = min(int(math.floor(fy)), g.rows - 1)
    return g.rows - 1 - row_from_south, col


def cell_center(stack, row, col):
    g = stack.template
    return g.xll + (col + 0.5) * g.cellsize, g.yll + (g.rows - row - 0.5) * g.cellsize


def featurize_point(stack, point):
    row, col = cell_of(stack, point.x, point.y)
    raw = np.array([g.values[row, col] for g in stack.grids])
    for name, g, v in zip(stack.names, stack.grids, raw):
        if v == g.nodata or not np.isfinite(v):
            raise NoDataError(f"point ({point.x}, {point.y}) falls on a nodata cell of band {name!r}")
    return FeatureVector(normalize(stack, raw), point.label, row * stack.cols + col)


def featurize_all_cells(stack):
    valid = stack.valid_mask()
    idx = np.flatnonzero(valid.reshape(-1))
    cube = normalize(stack, stack.raw_cube()).reshape(-1, stack.n_bands)
    if idx.size == 0:
        log.warning("no cell is valid in every band; nothing to featurize")
    return CellFeatures(cube[idx], idx, ~valid)


@dataclass
class SampleSet:
    """Labelled feature vectors as parallel arrays."""

    X: np.ndarray  # (n, M)
    y: np.ndarray  # (n,) int, -1 = unlabeled
    pixel_index: np.ndarray  # (n,)
    excluded: list = field(default_factory=list)

    def __len__(self):
        return len(self.y)

    def vectors(self):
        return [
            FeatureVector(self.X[i], None if self.y[i] < 0 else int(self.y[i]), int(self.pixel_index[i]))
            for i in range(len(self))
        ]


def featurize_samples(stack, points, skip_invalid=True):
    """Featurize many points; points off-grid or on nodata are reported, not fatal."""
    X, y, pix, excluded = [], [], [], []
    for i, p in enumerate(points):
        try:
            fv = featurize_point(stack, p)
        except (OutOfBoundsError, NoDataError) as exc:
            if not skip_invalid:
                raise
            excluded.append({"index": i, "x": p.x, "y": p.y, "reason": str(exc)})
            continue
        X.append(fv.values)
        y.append(-1 if fv.label is None else fv.label)
        pix.append(fv.pixel_index)
    M = stack.n_bands
    return SampleSet(
        np.array(X, dtype=np.float64).reshape(-1, M),
        np.array(y, dtype=np.int64),
        np.array(pix, dtype=np.int64),
        excluded,
    )


def read_samples_csv(path):
    """Read ``x,y,label`` rows; an empty label means unlabeled."""
    path = Path(path)
    try:
        fh = path.open(newline="", encoding="utf-8")
    except FileNotFoundError:
        raise ConfigError(f"samples file not found: {path}") from None
    points = []
    with fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header is None or [h.strip().lower() for h in header[:3]] != ["x", "y", "label"]:
            raise ParseError("header must be x,y,label", 1, path)
        for lineno, row in enumerate(reader, start=2):
            if not row or all(not c.strip() for c in row):
                continue
            if len(row) < 2:
                raise ParseError(f"expected 3 columns, got {len(row)}", lineno, path)
            x = _parse_number(row[0], lineno, path)
            yv = _parse_number(row[1], lineno, path)
            lab = row[2].strip() if len(row) > 2 else ""
            if lab == "":
                label = None
            elif lab in ("0", "1"):
                label = int(lab)
            else:
                raise ParseError(f"label must be 0, 1 or empty, got {lab!r}", lineno, path)
            points.append(SamplePoint(x, yv, label))
    return points


def write_samples_csv(path, points, fmt=".6f"):
    with Path(path).open("w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["x", "y", "label"])
        for p in points:
            w.writerow([format(p.x, fmt), format(p.y, fmt), "" if p.label is None else p.label])


def load_stack(band_paths):
    """Load ``{name: path}`` (ordered) into a RasterStack."""
    return build_stack([(name, load_ascii_grid(p)) for name, p in band_paths.items()])
