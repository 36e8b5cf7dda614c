import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from u2ad.errors import DegenerateInputError
from u2ad.patching import (
    au_candidates,
    au_exclusion_plan,
    build_patch_grid,
    eu_guided_plan,
    eu_weights,
    mask_count,
    patch_eu_sum,
    random_mask_plan,
)

RATIOS = [0.35, 0.45, 0.55, 0.65, 0.75, 0.85, 0.95]


def lattice_scan(roi, P):
    H, W = roi.shape
    n = 0
    for r in range(0, H, P):
        for c in range(0, W, P):
            hit = False
            for y in range(r, r + P):
                for x in range(c, c + P):
                    hit = hit or bool(roi[y, x])
            n += hit
    return n


def test_grid_examples():
    roi = np.zeros((32, 32), dtype=np.uint8)
    roi[8:16, 16:24] = 1
    assert build_patch_grid(roi, 8).n == 1
    assert build_patch_grid(np.ones((256, 256)), 8).n == 1024
    with pytest.raises(DegenerateInputError):
        build_patch_grid(np.zeros((16, 16)), 8)
    with pytest.raises(ValueError):
        build_patch_grid(np.ones((20, 16)), 8)


def test_grid_matches_lattice_scan(small_site):
    from u2ad.phantom import generate_phantom

    for seed in range(40):
        case = generate_phantom(seed, small_site)
        grid = build_patch_grid(case.roi_mask, 8)
        assert grid.n == lattice_scan(case.roi_mask, 8)
        # row-major order
        keys = [tuple(o) for o in grid.origins]
        assert keys == sorted(keys)


@given(st.integers(0, 2**31 - 1), st.sampled_from([2, 4, 8]))
@settings(max_examples=60, deadline=None)
def test_grid_random_masks(seed, P):
    rng = np.random.default_rng(seed)
    roi = rng.random((16, 24)) < 0.05
    if not roi.any():
        return
    assert build_patch_grid(roi, P).n == lattice_scan(roi, P)


def test_extract_scatter_roundtrip(small_case, small_grid):
    x = small_case.image.astype(np.float64)
    patches = small_grid.extract(x)
    back = small_grid.scatter(patches, np.arange(small_grid.n), np.zeros_like(x))
    covered = back != 0
    assert np.array_equal(back[covered], x[covered])


@pytest.mark.parametrize("r", RATIOS)
def test_mask_size_exact(small_grid, r):
    rng = np.random.default_rng(0)
    for _ in range(50):
        plan = random_mask_plan(small_grid, r, rng)
        assert len(plan.masked) == int(np.floor(r * small_grid.n + 1e-9))
        assert np.array_equal(np.union1d(plan.masked, plan.visible), np.arange(small_grid.n))
        assert np.intersect1d(plan.masked, plan.visible).size == 0


def test_mask_count_examples():
    assert mask_count(100, 0.75) == 75
    assert mask_count(3, 0.2) == 0


def test_zero_mask_plan_all_visible():
    roi = np.zeros((16, 16))
    roi[:8, :] = 1
    grid = build_patch_grid(roi, 8)
    plan = random_mask_plan(grid, 0.4, np.random.default_rng(0))
    assert plan.masked.size == 0 and plan.visible.size == grid.n


def test_random_mask_uniform_frequency():
    roi = np.zeros((8, 64))
    roi[:, :] = 1
    grid = build_patch_grid(roi, 8)
    assert grid.n == 8
    rng = np.random.default_rng(0)
    counts = np.zeros(8)
    for _ in range(10_000):
        counts[random_mask_plan(grid, 0.5, rng).masked] += 1
    assert np.all(np.abs(counts / 10_000 - 0.5) <= 0.02)


def test_patch_eu_sum_examples(small_grid):
    assert patch_eu_sum(np.zeros(small_grid.image_shape), small_grid, 0) == 0.0
    full = np.ones((16, 16))
    g = build_patch_grid(full, 8)
    assert patch_eu_sum(np.ones((16, 16)), g, 3) == 64.0
    with pytest.raises(IndexError):
        patch_eu_sum(np.ones((16, 16)), g, 4)


def test_patch_eu_sum_loop_oracle(small_grid):
    rng = np.random.default_rng(0)
    eu = rng.random(small_grid.image_shape)
    roi = small_grid.roi_mask
    for i, (r0, c0) in enumerate(small_grid.origins):
        total = 0.0
        for y in range(r0, r0 + 8):
            for x in range(c0, c0 + 8):
                if roi[y, x]:
                    total += eu[y, x]
        assert abs(patch_eu_sum(eu, small_grid, i) - total) < 1e-9


def test_eu_weights_examples():
    assert np.allclose(eu_weights(np.full(5, 0.3), 1.0), 0.2)
    direct = np.exp([1.0, 2.0, 3.0]) / np.exp([1.0, 2.0, 3.0]).sum()
    w = eu_weights(np.array([1.0, 2.0, 3.0]), 1.0)
    assert np.allclose(w, direct, atol=1e-12, rtol=0)
    assert np.allclose(w, [0.0900, 0.2447, 0.6652], atol=5e-5)
    lim = eu_weights(np.array([0.0, 1.0]), 1e-3)
    assert lim[0] < 1e-12 and lim[1] == pytest.approx(1.0)
    with pytest.raises(ValueError):
        eu_weights(np.ones(2), 0.0)


def test_eu_weights_direct_oracle():
    rng = np.random.default_rng(0)
    for _ in range(200):
        s = rng.random(rng.integers(1, 40)) * 5
        tau = rng.uniform(0.1, 5)
        e = [np.exp(v / tau) for v in s]
        want = [v / sum(e) for v in e]
        assert np.allclose(eu_weights(s, tau), want, atol=1e-9, rtol=0)


@given(st.lists(st.floats(0, 10), min_size=1, max_size=30), st.floats(-5, 5), st.floats(0.05, 10))
@settings(max_examples=150, deadline=None)
def test_eu_weights_shift_invariance(values, shift, tau):
    s = np.array(values)
    a, b = eu_weights(s, tau), eu_weights(s + shift, tau)
    assert np.allclose(a, b, atol=1e-12)
    assert np.argmax(eu_weights(s, tau)) == np.argmax(eu_weights(s, tau * 3.7))


def _equal_patch_eu(grid, total=0.5):
    roi = grid.roi_mask.astype(float)
    per = grid.patch_sums(roi)
    vals = np.repeat((total / per)[:, None], grid.patch_size**2, axis=1)
    return grid.scatter(vals, np.arange(grid.n), np.zeros(grid.image_shape)) * roi


def test_eu_guided_uniform_equals_random(small_grid):
    eu = _equal_patch_eu(small_grid)
    assert np.allclose(eu_weights(small_grid.patch_sums(eu), 1.0), 1 / small_grid.n, atol=1e-15)
    for seed in range(20):
        a = eu_guided_plan(small_grid, eu, 1.0, 0.75, np.random.default_rng(seed))
        b = random_mask_plan(small_grid, 0.75, np.random.default_rng(seed))
        assert np.array_equal(a.masked, b.masked)


def test_eu_guided_large_temperature_matches_random_frequency(small_grid):
    rng = np.random.default_rng(1)
    eu = rng.random(small_grid.image_shape)
    counts = np.zeros(small_grid.n)
    draws = 10_000
    for _ in range(draws):
        counts[eu_guided_plan(small_grid, eu, 1e9, 0.75, rng).masked] += 1
    expected = mask_count(small_grid.n, 0.75) / small_grid.n
    assert np.all(np.abs(counts / draws - expected) <= 0.02)


def test_eu_guided_hot_patch_masked(small_grid):
    eu = np.zeros(small_grid.image_shape)
    r0, c0 = small_grid.origins[2]
    eu[r0:r0 + 8, c0:c0 + 8] = 10.0
    rng = np.random.default_rng(0)
    hits = sum(2 in eu_guided_plan(small_grid, eu, 0.5, 0.75, rng).masked for _ in range(10_000))
    assert hits >= 9900


def test_au_zero_no_exclusion(small_grid):
    au = np.zeros(small_grid.image_shape)
    a = au_exclusion_plan(small_grid, au, 0.75, np.random.default_rng(3))
    b = random_mask_plan(small_grid, 0.75, np.random.default_rng(3))
    assert a.forced_visible.size == 0 and np.array_equal(a.masked, b.masked)


def test_au_single_blob_never_masked(small_grid):
    roi = small_grid.roi_mask > 0
    au = np.zeros(small_grid.image_shape)
    ys, xs = np.nonzero(roi)
    k = len(ys) // 2
    au[ys[k] - 1:ys[k] + 2, xs[k]] = 1.0
    au[~roi] = 0
    touching = small_grid.patches_touching(au > 0)
    rng = np.random.default_rng(0)
    for _ in range(200):
        plan = au_exclusion_plan(small_grid, au, 0.75, rng, quantile=0.2)
        assert set(touching) <= set(plan.forced_visible)
        assert np.intersect1d(plan.masked, touching).size == 0


def test_au_five_blobs_top_three_excluded():
    roi = np.ones((16, 80))
    grid = build_patch_grid(roi, 8)
    au = np.zeros((16, 80))
    scores = [10, 8, 6, 4, 2]
    for i, s in enumerate(scores):
        au[3, 16 * i + 3] = s  # one pixel per blob, blobs in separate patches
    cand, top = au_candidates(grid, au, top_k=3, quantile=0.0)
    assert sorted(c.score for c in top) == [6, 8, 10]
    want = grid.patches_touching(np.isin(au, [10, 8, 6]))
    assert np.array_equal(np.sort(cand), np.sort(want))
    plan = au_exclusion_plan(grid, au, 0.5, np.random.default_rng(0), quantile=0.0)
    assert np.intersect1d(plan.masked, want).size == 0
