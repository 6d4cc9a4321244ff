import json

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from lsmeta.errors import ConfigError
from lsmeta.geodata import RasterGrid, SampleSet, build_stack
from lsmeta.segmentation import (
    EUCLIDEAN,
    VERBATIM,
    ClusterCenter,
    SlicConfig,
    assign_sweep,
    combined_distance,
    grid_step,
    group_samples,
    init_centers,
    lattice_labels,
    perturb_centers,
    repair_orphans,
    segment,
    segment_cube,
)


def cube_of(values):
    v = np.asarray(values, dtype=np.float64)
    return v[..., None] if v.ndim == 2 else v


def all_valid(shape):
    return np.ones(shape[:2], dtype=bool)


def random_cube(seed, rows=64, cols=64, bands=3):
    return np.random.default_rng(seed).random((rows, cols, bands))


def plateau_cube(rows=10, cols=20, bands=3):
    cube = np.zeros((rows, cols, bands))
    cube[:, cols // 2:] = 1.0
    return cube


# -- initialisation --------------------------------------------------------


def test_init_100x100_k100():
    cube = np.zeros((100, 100, 1))
    centers, S = init_centers(cube, all_valid(cube.shape), SlicConfig(n_blocks=100))
    assert S == 10
    assert len(centers) == 100
    pos = sorted((c.row, c.col) for c in centers)
    assert pos[0] == (5.0, 5.0) and pos[1] == (5.0, 15.0) and pos[-1] == (95.0, 95.0)


def test_init_100x100_k64_rounds_half_up():
    cube = np.zeros((100, 100, 1))
    centers, S = init_centers(cube, all_valid(cube.shape), SlicConfig(n_blocks=64))
    assert S == 13
    assert len(centers) == 64


def test_init_single_block_at_midpoint():
    cube = np.zeros((31, 31, 1))
    centers, S = init_centers(cube, all_valid(cube.shape), SlicConfig(n_blocks=1))
    assert len(centers) == 1
    assert (centers[0].row, centers[0].col) == (15.5, 15.5)


def test_init_reads_features():
    cube = random_cube(0, 20, 20, 2)
    centers, _ = init_centers(cube, all_valid(cube.shape), SlicConfig(n_blocks=4))
    for c in centers:
        assert np.array_equal(c.features, cube[int(c.row), int(c.col)])


def test_k_above_valid_count():
    with pytest.raises(ValueError):
        grid_step(10, 11)


def test_config_validation():
    with pytest.raises(ConfigError):
        SlicConfig(n_blocks=0).validate()
    with pytest.raises(ConfigError):
        SlicConfig(compactness=0.0).validate()
    with pytest.raises(ConfigError):
        SlicConfig(feature_weights=[0.0, 0.0]).validate()
    with pytest.raises(ConfigError):
        SlicConfig(feature_weights=[1.0, 1.0]).validate(n_bands=3)


# -- perturbation ----------------------------------------------------------


def test_perturb_constant_raster_goes_to_window_top_left():
    cube = np.ones((20, 20, 2))
    c = ClusterCenter(0, cube[10, 10], 10.5, 10.5)
    (moved,) = perturb_centers(cube, all_valid(cube.shape), [c])
    assert (moved.row, moved.col) == (8.5, 8.5)


def test_perturb_moves_off_spike():
    cube = np.zeros((20, 20, 1))
    cube[10, 10] = 5.0
    c = ClusterCenter(0, cube[10, 10], 10.5, 10.5)
    (moved,) = perturb_centers(cube, all_valid(cube.shape), [c])
    assert (moved.row, moved.col) != (10.5, 10.5)
    assert moved.features[0] == 0.0


def test_perturb_corner_uses_clamped_window():
    cube = np.ones((20, 20, 1))
    c = ClusterCenter(0, cube[0, 0], 0.5, 0.5)
    (moved,) = perturb_centers(cube, all_valid(cube.shape), [c])
    assert (moved.row, moved.col) == (0.5, 0.5)
    # the lowest gradient inside the clamped 3x3 window wins
    cube = np.arange(400, dtype=float).reshape(20, 20, 1) ** 2
    c = ClusterCenter(0, cube[19, 19], 19.5, 19.5)
    (moved,) = perturb_centers(cube, all_valid(cube.shape), [c])
    assert 17 <= moved.row <= 20 and 17 <= moved.col <= 20


# -- distance and assignment -----------------------------------------------


def test_distance_examples():
    assert combined_distance(0.0, 10.0, 10, 3.0) == pytest.approx(3.0, abs=1e-15)
    assert combined_distance(0.5**2, 0.0, 10, 1.0, VERBATIM) == pytest.approx(0.25, abs=1e-15)
    assert combined_distance(0.5**2, 0.0, 10, 1.0, EUCLIDEAN) == pytest.approx(0.5, abs=1e-15)


def test_plateau_boundary_recovered():
    cube = plateau_cube()
    seg = segment_cube(cube, all_valid(cube.shape), SlicConfig(n_blocks=2))
    left, right = seg.labels[:, :10], seg.labels[:, 10:]
    assert len(np.unique(left)) == 1 and len(np.unique(right)) == 1
    assert left[0, 0] != right[0, 0]


def test_plateau_labels_match_brute_force_nearest_center():
    cube = plateau_cube()
    valid = all_valid(cube.shape)
    cfg = SlicConfig(n_blocks=2, iterations=1)
    centers, S = init_centers(cube, valid, cfg)
    centers = perturb_centers(cube, valid, centers)
    labels, dist = assign_sweep(cube, valid, centers, S, cfg.compactness)
    for r in range(cube.shape[0]):
        for c in range(cube.shape[1]):
            best = None
            for k in centers:
                if abs(r + 0.5 - k.row) > S + 0.5 or abs(c + 0.5 - k.col) > S + 0.5:
                    continue
                if not (np.floor(k.row - S) <= r < np.ceil(k.row + S) and np.floor(k.col - S) <= c < np.ceil(k.col + S)):
                    continue
                fsq = float(((cube[r, c] - k.features) ** 2).sum())
                ds = np.hypot(r + 0.5 - k.row, c + 0.5 - k.col)
                D = np.sqrt(fsq**2 + (ds / S) ** 2 * cfg.compactness**2)
                if best is None or D < best[0]:
                    best = (D, k.id)
            if best is None:
                assert labels[r, c] == -1
            else:
                assert labels[r, c] == best[1]
                assert dist[r, c] == pytest.approx(best[0], rel=1e-12)


def test_sweep_distances_never_increase():
    cube = random_cube(3, 32, 32)
    valid = all_valid(cube.shape)
    centers, S = init_centers(cube, valid, SlicConfig(n_blocks=16))
    centers = perturb_centers(cube, valid, centers)
    snaps = []
    assign_sweep(cube, valid, centers, S, 1.0, on_update=lambda k, d: snaps.append(d.copy()))
    for a, b in zip(snaps, snaps[1:]):
        assert np.all(b <= a)


def test_pixels_within_window_of_their_center():
    cube = random_cube(4, 40, 40)
    valid = all_valid(cube.shape)
    centers, S = init_centers(cube, valid, SlicConfig(n_blocks=16))
    centers = perturb_centers(cube, valid, centers)
    labels, _ = assign_sweep(cube, valid, centers, S, 1.0)
    pos = {c.id: (c.row, c.col) for c in centers}
    rr, cc = np.nonzero(labels >= 0)
    for r, c in zip(rr, cc):
        kr, kc = pos[labels[r, c]]
        assert max(abs(r + 0.5 - kr), abs(c + 0.5 - kc)) <= 2 * S


def test_repair_attaches_orphans_to_nearest_center():
    labels = np.full((3, 5), -1)
    labels[:, 0] = 0
    centers = [ClusterCenter(0, np.zeros(1), 1.5, 0.5), ClusterCenter(1, np.zeros(1), 1.5, 4.5)]
    out = repair_orphans(labels, np.ones((3, 5), bool), centers)
    assert out[:, :3].tolist() == [[0, 0, 0]] * 3
    assert out[:, 3:].tolist() == [[1, 1]] * 3


# -- full segmentation -----------------------------------------------------


def check_partition(seg, valid):
    assert np.all(seg.labels[valid] >= 0)
    assert np.all(seg.labels[~valid] == -1)
    members = np.concatenate([b.member_pixels for b in seg.blocks])
    assert len(members) == len(np.unique(members)) == int(valid.sum())
    assert set(members.tolist()) == set(np.flatnonzero(valid.reshape(-1)).tolist())


@settings(max_examples=15)
@given(st.integers(0, 2**31 - 1), st.integers(1, 40), st.sampled_from([VERBATIM, EUCLIDEAN]))
def test_partition_and_determinism(seed, k, mode):
    rng = np.random.default_rng(seed)
    cube = rng.random((24, 24, 3))
    valid = rng.random((24, 24)) > 0.1
    cube[~valid] = np.nan
    cfg = SlicConfig(n_blocks=k, distance_mode=mode)
    a = segment_cube(cube, valid, cfg)
    b = segment_cube(cube, valid, cfg)
    check_partition(a, valid)
    assert np.array_equal(a.labels, b.labels)


def test_segment_stack_and_report():
    bands = [(f"b{i}", RasterGrid(random_cube(i, 16, 16, 1)[..., 0], 0.0, 0.0, 1.0, -9999.0)) for i in range(2)]
    stack = build_stack(bands)
    seg = segment(stack, SlicConfig(n_blocks=4))
    check_partition(seg, stack.valid_mask())
    doc = json.loads(seg.report_json())
    assert doc["n_blocks"] == len(seg.blocks)
    assert sum(b["pixels"] for b in doc["blocks"]) == 256


# -- sample grouping -------------------------------------------------------


def sample_set(pixels, labels):
    n = len(pixels)
    return SampleSet(np.zeros((n, 1)), np.asarray(labels), np.asarray(pixels), [])


def test_group_samples_membership_oracle():
    cube = plateau_cube()
    seg = segment_cube(cube, all_valid(cube.shape), SlicConfig(n_blocks=2))
    rng = np.random.default_rng(0)
    pixels = rng.choice(200, size=10, replace=False)
    group_samples(seg, sample_set(pixels, [1] * 10))
    for b in seg.blocks:
        expected = [i for i, p in enumerate(pixels) if seg.labels.reshape(-1)[p] == b.id]
        assert b.member_samples == expected
    assert sum(len(b.member_samples) for b in seg.blocks) == 10


def test_group_samples_center_pixel_and_empty():
    cube = plateau_cube()
    seg = segment_cube(cube, all_valid(cube.shape), SlicConfig(n_blocks=2))
    b = seg.blocks[1]
    pix = int(b.center.row) * 20 + int(b.center.col)
    group_samples(seg, sample_set([pix], [0]))
    assert b.member_samples == [0]
    group_samples(seg, sample_set([], []))
    assert all(blk.member_samples == [] for blk in seg.blocks)


def test_group_samples_reports_nodata_pixels():
    cube = plateau_cube()
    valid = all_valid(cube.shape)
    valid[0, 0] = False
    seg = segment_cube(cube, valid, SlicConfig(n_blocks=2))
    group_samples(seg, sample_set([0, 5], [1, 0]))
    assert [e["sample"] for e in seg.exclusions] == [0]
