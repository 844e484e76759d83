import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from semsplat.semfeat import (average_features_per_mask, build_feature_bundle, build_target_map,
                              masks_from_stack, pca_fit, pca_project, pca_unproject,
                              reconstruction_error, resolve_mask_overlaps, sorted_mask_order,
                              upsample_nearest, view_features)

from oracles import average_per_mask_loop, resolve_masks_brute, svd_tail_energy, upsample_loop


# upsampling ----------------------------------------------------------------

def test_upsample_constant_fill():
    out = upsample_nearest(np.full((1, 1, 3), 2.0), 4, 4)
    assert out.shape == (4, 4, 3) and np.all(out == 2.0)


def test_upsample_exact_factor():
    src = np.arange(4.0).reshape(2, 2, 1)
    out = upsample_nearest(src, 4, 4)
    np.testing.assert_array_equal(out[:2, :2, 0], 0)
    np.testing.assert_array_equal(out[2:, 2:, 0], 3)


@pytest.mark.parametrize("shape", [(3, 3), (5, 2), (4, 7)])
def test_upsample_matches_index_formula(shape, rng):
    src = rng.normal(size=shape + (2,))
    np.testing.assert_array_equal(upsample_nearest(src, 8, 9), upsample_loop(src, 8, 9))


def test_upsample_errors():
    with pytest.raises(ValueError):
        upsample_nearest(np.zeros((0, 2, 1)), 4, 4)
    with pytest.raises(ValueError):
        upsample_nearest(np.zeros((5, 5, 1)), 4, 4)


# mask overlap resolution -----------------------------------------------------

def test_smaller_mask_wins():
    big = np.zeros((10, 10), bool)
    big[:, :] = True
    small = np.zeros((10, 10), bool)
    small[2:4, 2:7] = True
    labels = resolve_mask_overlaps(np.stack([big, small]))
    assert labels[3, 3] == 1  # the small mask sorts first
    assert labels[0, 0] == 2
    np.testing.assert_array_equal(sorted_mask_order(np.stack([big, small])), [1, 0])


def test_disjoint_masks_partition():
    m = np.zeros((3, 4, 4), bool)
    m[0, :2] = True
    m[1, 2:, :2] = True
    m[2, 2:, 2:] = True
    labels = resolve_mask_overlaps(m)
    assert set(np.unique(labels)) == {1, 2, 3}
    for i in range(3):
        assert len(np.unique(labels[m[i]])) == 1


def test_equal_areas_keep_original_order():
    m = np.zeros((2, 4, 4), bool)
    m[0, :2, :2] = True
    m[1, 1:3, 1:3] = True
    labels = resolve_mask_overlaps(m)
    assert labels[1, 1] == 1


@settings(max_examples=60, deadline=None)
@given(st.integers(1, 8), st.integers(0, 2**31 - 1))
def test_resolution_matches_brute_force(m, seed):
    rng = np.random.default_rng(seed)
    masks = rng.uniform(size=(m, 16, 16)) < rng.uniform(0.05, 0.6, size=(m, 1, 1))
    np.testing.assert_array_equal(resolve_mask_overlaps(masks), resolve_masks_brute(masks))


# per-mask averages -----------------------------------------------------------

def test_average_constant_map():
    labels = np.array([[1, 2], [2, 0]])
    out = average_features_per_mask(np.full((2, 2, 3), 0.5), labels, 2)
    np.testing.assert_allclose(out, 0.5)


def test_average_two_labels():
    f = np.zeros((2, 2, 2))
    f[0, :, 0] = 1
    f[1, :, 1] = 1
    labels = np.array([[1, 1], [2, 2]])
    np.testing.assert_allclose(average_features_per_mask(f, labels, 3), [[1, 0], [0, 1], [0, 0]])


def test_average_matches_loop(rng):
    f = rng.normal(size=(9, 11, 4))
    labels = rng.integers(0, 5, size=(9, 11))
    np.testing.assert_allclose(average_features_per_mask(f, labels, 6), average_per_mask_loop(f, labels, 6), atol=1e-12)


# PCA -----------------------------------------------------------------------------

def test_pca_exact_rank(rng):
    basis = rng.normal(size=(2, 6))
    rows = rng.normal(size=(40, 2)) @ basis + 3.0
    m = pca_fit(rows, 2)
    assert reconstruction_error(m, rows) < 1e-6
    np.testing.assert_allclose(m.basis @ m.basis.T, np.eye(2), atol=1e-10)


def test_pca_full_rank_identity(rng):
    rows = rng.normal(size=(30, 5))
    m = pca_fit(rows, 5)
    np.testing.assert_allclose(pca_unproject(m, pca_project(m, rows)), rows, atol=1e-10)


def test_pca_tail_energy(rng):
    rows = rng.normal(size=(100, 32))
    m = pca_fit(rows, 8)
    assert reconstruction_error(m, rows) == pytest.approx(svd_tail_energy(rows, 8), abs=1e-4)
    assert np.all(np.diff(m.explained_variance) <= 1e-12)


def test_pca_sign_convention(rng):
    m = pca_fit(rng.normal(size=(50, 6)), 4)
    idx = np.argmax(np.abs(m.basis), axis=1)
    assert np.all(m.basis[np.arange(4), idx] > 0)


def test_pca_error_non_increasing_in_k(rng):
    rows = rng.normal(size=(60, 10))
    errs = [reconstruction_error(pca_fit(rows, k), rows) for k in range(1, 11)]
    assert all(b <= a + 1e-9 for a, b in zip(errs, errs[1:]))


def test_pca_projection_properties(rng):
    rows = rng.normal(size=(20, 6))
    m = pca_fit(rows, 3)
    np.testing.assert_allclose(pca_project(m, m.mean), 0, atol=1e-12)
    x = rng.normal(size=6)
    assert np.linalg.norm(pca_project(m, x)) <= np.linalg.norm(x - m.mean) + 1e-12
    with pytest.raises(ValueError):
        pca_project(m, np.zeros(5))
    with pytest.raises(ValueError):
        pca_unproject(m, np.zeros(4))


def test_pca_rejects_large_k(rng):
    with pytest.raises(ValueError):
        pca_fit(rng.normal(size=(5, 10)), 6)
    with pytest.raises(ValueError):
        pca_fit(rng.normal(size=(50, 4)), 5)


# targets and bundle --------------------------------------------------------------

def test_target_map_lookup():
    labels = np.array([[0, 1], [2, 2]], dtype=np.uint32)
    comp = np.array([[1.0, 2.0], [3.0, 4.0]])
    tgt, mask = build_target_map(labels, comp)
    np.testing.assert_array_equal(tgt[0, 0], [0, 0])
    np.testing.assert_array_equal(tgt[0, 1], [1, 2])
    np.testing.assert_array_equal(tgt[1, 1], [3, 4])
    np.testing.assert_array_equal(mask, [[False, True], [True, True]])


def test_single_full_mask_gives_constant_target(rng):
    f = rng.normal(size=(6, 6, 4))
    v = view_features(f, np.ones((1, 6, 6), bool))
    np.testing.assert_allclose(v.mask_features[0], f.reshape(-1, 4).mean(axis=0))
    v.compressed = v.mask_features[:, :2]
    tgt, mask = v.target_map()
    assert np.all(mask) and np.all(tgt == tgt[0, 0])


def test_empty_mask_rejected():
    with pytest.raises(ValueError):
        view_features(np.zeros((4, 4, 2)), np.zeros((1, 4, 4), bool))


def test_feature_bundle_pipeline(rng):
    H = W = 8
    maps, mask_sets = [], []
    for v in range(2):
        m = np.zeros((3, H, W), bool)
        m[0, :4] = True
        m[1, 4:] = True
        m[2] = True  # swallowed completely by the two smaller masks
        maps.append(rng.normal(size=(4, 4, 5)))  # upsampled by 2
        mask_sets.append(m)
    b = build_feature_bundle(maps, mask_sets, 2)
    assert len(b.fit_rows) == 4  # the fully covered mask is absent in both views
    for v in b.views:
        assert v.compressed.shape == (3, 2)
        np.testing.assert_array_equal(v.compressed[2], 0)
        tgt, mask = v.target_map()
        assert tgt.shape == (H, W, 2) and mask.all()
    again = build_feature_bundle(maps, mask_sets, 2)
    np.testing.assert_array_equal(again.views[0].compressed, b.views[0].compressed)


def test_masks_from_stack():
    stack = np.zeros((4, 5, 2), dtype=np.uint32)
    stack[1, 2, 1] = 1
    m = masks_from_stack(stack)
    assert m.shape == (2, 4, 5) and m[1, 1, 2] and m.sum() == 1
