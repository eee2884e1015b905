from collections import deque

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from ruackit.postproc import connected_components, nearest_rank_percentile, unc_corr


def _flood_labels(mask, connectivity):
    """Breadth-first labeling in raster order of each component's first pixel."""
    h, w = mask.shape
    steps = [(-1, 0), (1, 0), (0, -1), (0, 1)]
    if connectivity == 8:
        steps += [(-1, -1), (-1, 1), (1, -1), (1, 1)]
    labels = np.zeros((h, w), int)
    n = 0
    for y in range(h):
        for x in range(w):
            if mask[y, x] and not labels[y, x]:
                n += 1
                labels[y, x] = n
                q = deque([(y, x)])
                while q:
                    cy, cx = q.popleft()
                    for dy, dx in steps:
                        ny, nx = cy + dy, cx + dx
                        if 0 <= ny < h and 0 <= nx < w and mask[ny, nx] and not labels[ny, nx]:
                            labels[ny, nx] = n
                            q.append((ny, nx))
    return labels, n


def _random_mask(seed, max_side=12):
    """Random mask whose components carry their own uncertainty level plus pixel noise."""
    rng = np.random.default_rng(seed)
    h, w = rng.integers(2, max_side + 1, size=2)
    m = rng.random((h, w)) < rng.uniform(0.15, 0.7)
    labels, n = _flood_labels(m, 4)
    level = np.concatenate([[rng.random()], rng.random(n) ** rng.uniform(0.3, 3.0)])
    u = np.clip(level[labels] + rng.normal(0, 0.1, size=(h, w)), 0, 1)
    return m, u


# --------------------------------------------------------------------------
# connected components


def test_component_examples():
    blob = np.zeros((6, 6))
    blob[1:5, 2:5] = 1
    assert connected_components(blob).n == 1
    checker = np.array([[1, 0], [0, 1]])
    assert connected_components(checker, 4).n == 2
    assert connected_components(checker, 8).n == 1
    empty = connected_components(np.zeros((3, 3)))
    assert empty.n == 0 and not empty.labels.any()
    with pytest.raises(ValueError):
        connected_components(blob, 6)


@pytest.mark.parametrize("connectivity", [4, 8])
def test_components_match_flood_fill(connectivity):
    for seed in range(200):
        m, u = _random_mask(seed)
        cs = connected_components(m, connectivity, u)
        labels, n = _flood_labels(m, connectivity)
        assert cs.n == n and np.array_equal(cs.labels, labels)
        assert cs.counts.sum() == m.sum() and np.all(cs.counts > 0)
        for i in range(n):
            assert cs.mean_unc[i] == pytest.approx(u[labels == i + 1].mean(), rel=1e-12)


def test_nearest_rank_percentile():
    v = np.arange(1, 21, dtype=float)
    assert nearest_rank_percentile(v, 95) == 19.0  # ceil(0.95 * 20) = 19th smallest
    assert nearest_rank_percentile([0.7], 95) == 0.7
    assert nearest_rank_percentile(v, 0) == 1.0 and nearest_rank_percentile(v, 100) == 20.0
    with pytest.raises(ValueError):
        nearest_rank_percentile([], 50)


# --------------------------------------------------------------------------
# UncCorr


def _blob_and_fragment(frag_unc):
    m = np.zeros((20, 20), bool)
    m[2:12, 2:12] = True
    m[16:18, 16:18] = True
    u = np.zeros((20, 20))
    u[2:12, 2:12] = 0.1
    u[2:4, 2:12] = 0.2  # P95 of the foreground lands on 0.2
    u[16:18, 16:18] = frag_unc
    return m, u


def test_fragment_removed_by_floor_threshold():
    m, u = _blob_and_fragment(0.95)
    assert nearest_rank_percentile(u[m], 95) == 0.2
    out, audit = unc_corr(m, u, audit=True)
    assert audit["threshold"] == 0.3
    assert not out[16:18, 16:18].any() and out[2:12, 2:12].all()
    assert [c["kept"] for c in audit["components"]] == [True, False]


def test_confident_fragment_kept():
    m, u = _blob_and_fragment(0.3)  # mean equals the floor, so not above it
    assert np.array_equal(unc_corr(m, u), m)


def test_p95_above_floor_sets_threshold():
    m = np.zeros((10, 10), bool)
    m[:, :6] = True
    m[0, 9] = True
    u = np.full((10, 10), 0.5)
    u[0, 9] = 0.6
    u[:, 5] = 0.7  # 10 of 61 pixels at 0.7 push the P95 up to 0.7
    out, audit = unc_corr(m, u, audit=True)
    assert audit["threshold"] == 0.7 and np.array_equal(out, m)


def test_single_component_unchanged_whatever_uncertainty():
    m = np.zeros((8, 8), bool)
    m[2:6, 1:7] = True
    for level in (0.0, 0.5, 1.0):
        assert np.array_equal(unc_corr(m, np.full((8, 8), level)), m)


def test_largest_tie_keeps_lowest_label():
    # two uncertain 2-pixel pairs tie for largest among 100 confident singletons
    m = np.zeros((24, 24), bool)
    m[0, 0:2] = True
    m[0, 6:8] = True
    m[4:24:2, 0:20:2] = True
    u = np.zeros((24, 24))
    u[0] = 1.0
    out, audit = unc_corr(m, u, audit=True)
    assert audit["threshold"] == 0.3
    assert out[0, 0:2].all() and not out[0, 6:8].any()
    assert out.sum() == m.sum() - 2


def test_empty_mask_and_validation():
    out, audit = unc_corr(np.zeros((4, 4)), np.zeros((4, 4)), audit=True)
    assert not out.any() and audit["components"] == []
    with pytest.raises(ValueError):
        unc_corr(np.ones((2, 2)), np.full((2, 2), 1.5))


def test_cascading_fragments_resolved_in_one_call():
    # dropping the noisiest fragment lowers the P95 and exposes the next one
    m = np.zeros((12, 40), bool)
    u = np.zeros((12, 40))
    m[0:10, 0:10] = True
    u[0:10, 0:10] = 0.1
    m[0:2, 14:16] = True
    u[0:2, 14:16] = 0.45
    m[0, 20:22] = True
    u[0, 20:22] = 0.9
    once, audit = unc_corr(m, u, audit=True)
    # first pass: P95 = 0.45 drops only the 0.9 pair; second pass: P95 = 0.1, floor 0.3
    assert audit["threshold"] == 0.45 and audit["final_threshold"] == 0.3
    assert not once[0:2, 14:16].any() and not once[0, 20:22].any()
    assert np.array_equal(unc_corr(once, u), once)


def test_fuzz_subset_largest_and_idempotent():
    dropped = 0
    for seed in range(1000):
        m, u = _random_mask(seed, 20)
        out = unc_corr(m, u)
        assert not np.any(out & ~m)
        if m.any():
            cs = connected_components(m, 8)
            assert out[cs.labels == int(np.argmax(cs.counts)) + 1].all()
        assert np.array_equal(unc_corr(out, u), out)
        dropped += int(out.sum() < m.sum())
    assert dropped > 100  # the fuzz actually exercises removal


@settings(max_examples=200, deadline=None)
@given(st.integers(0, 2**31), st.sampled_from([4, 8]))
def test_unc_corr_properties(seed, connectivity):
    m, u = _random_mask(seed, 16)
    out = unc_corr(m, u, connectivity)
    assert not np.any(out & ~m)
    assert out.any() == m.any()
    assert np.array_equal(unc_corr(out, u, connectivity), out)
