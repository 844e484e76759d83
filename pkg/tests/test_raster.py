import numpy as np
import pytest

from semsplat.core import Camera, PcaModel, Scene, logit
from semsplat.raster import (ALPHA_MAX, project, render, render_backward, render_reference,
                             render_subset)

from conftest import front_camera, random_scene, single_gaussian_scene
from gradcheck import relative_errors


def two_splat_scene(dtype=np.float64):
    # front: alpha 0.5 red, back: alpha 0.99 blue, both on the optical axis
    return Scene(
        positions=np.array([[0, 0, 2.0], [0, 0, 3.0]], dtype=dtype),
        log_scales=np.log(np.full((2, 3), 0.01)).astype(dtype),
        quats=np.tile(np.array([1.0, 0, 0, 0], dtype=dtype), (2, 1)),
        opacity_logits=np.array([logit(0.5), logit(0.99)], dtype=dtype),
        colors=np.array([[1, 0, 0], [0, 0, 1.0]], dtype=dtype),
        features=np.eye(2, dtype=dtype),
        pca=PcaModel.identity(2, dtype=dtype),
    )


# projection ----------------------------------------------------------------

def test_on_axis_projection():
    cam = Camera(100, 100, 8, 8, 16, 16, np.eye(4))
    proj = project(single_gaussian_scene([0, 0, 2.0]), cam)
    np.testing.assert_allclose(proj.mean2d[0], [8, 8])


def test_behind_camera_is_culled():
    cam = front_camera(16)
    assert len(project(single_gaussian_scene([0, 0, -1.0]), cam)) == 0
    assert len(project(single_gaussian_scene([0, 0, 0.005]), cam)) == 0


def test_isotropic_covariance_matches_pinhole():
    s, z, f = 0.02, 2.0, 100.0
    cam = Camera(f, f, 8, 8, 16, 16, np.eye(4))
    proj = project(single_gaussian_scene([0, 0, z], scale=s), cam)
    expected = (f * s / z) ** 2
    np.testing.assert_allclose(proj.cov2d[0, [0, 2]] - 0.3, [expected, expected], rtol=1e-9)
    assert abs(proj.cov2d[0, 1]) < 1e-12


def test_projection_sorted_with_index_tie_break():
    s = random_scene(6)
    s.positions[:, 2] = np.array([3.0, 2.0, 2.0, 4.0, 2.0, 3.0])
    proj = project(s, front_camera(16))
    assert list(proj.index) == [1, 2, 4, 0, 5, 3]


# compositing ---------------------------------------------------------------

def test_single_splat_clamped():
    s = single_gaussian_scene([0, 0, 2.0], opacity=1.0 - 1e-12)
    s.opacity_logits[:] = 50.0
    out = render(s, front_camera(16))
    np.testing.assert_allclose(out.rgb[8, 8], [ALPHA_MAX, 0, 0], atol=1e-12)


def test_two_splat_compositing():
    out = render(two_splat_scene(), front_camera(16))
    np.testing.assert_allclose(out.rgb[8, 8], [0.5, 0, 0.495], atol=1e-9)
    np.testing.assert_allclose(out.feature[8, 8], [0.5, 0.495], atol=1e-9)
    np.testing.assert_allclose(out.alpha[8, 8], 0.995, atol=1e-9)


def test_subset_rendering():
    s = two_splat_scene()
    cam = front_camera(16)
    full = render(s, cam)
    same = render_subset(s, np.arange(2), cam)
    for a, b in ((full.rgb, same.rgb), (full.feature, same.feature), (full.alpha, same.alpha)):
        np.testing.assert_array_equal(a, b)
    empty = render_subset(s, np.array([], dtype=int), cam)
    assert not empty.rgb.any() and not empty.alpha.any()
    front = render_subset(s, [0], cam)
    np.testing.assert_allclose(front.rgb[8, 8], [0.5, 0, 0], atol=1e-9)


def test_background_is_black():
    out = render(single_gaussian_scene([0, 0, 2.0], scale=0.01), front_camera(16))
    assert not out.rgb[0, 0].any() and not out.feature[0, 0].any() and out.alpha[0, 0] == 0


@pytest.mark.parametrize("seed", range(5))
def test_matches_reference_renderer(seed):
    s = random_scene(60, size=32, k=3, seed=seed)
    cam = front_camera(32)
    fast = render(s, cam)
    ref = render_reference(s, cam)
    for a, b in ((fast.rgb, ref.rgb), (fast.feature, ref.feature), (fast.alpha, ref.alpha),
                 (fast.depth, ref.depth)):
        assert np.abs(a - b).max() < 1e-9


def test_alpha_conservation():
    s = random_scene(40, size=32, seed=3)
    out = render(s, front_camera(32))
    np.testing.assert_allclose(out.alpha, 1 - out.final_T)
    assert out.alpha.min() >= 0 and out.alpha.max() <= 1
    # colours are convex combinations: each channel <= alpha
    assert np.all(out.rgb <= out.alpha[..., None] + 1e-12)


def test_storage_order_does_not_matter():
    s = random_scene(40, size=32, seed=4)
    perm = np.random.default_rng(0).permutation(len(s))
    cam = front_camera(32)
    a = render(s, cam)
    b = render(s.subset(perm), cam)
    np.testing.assert_array_equal(a.rgb, b.rgb)
    np.testing.assert_array_equal(a.feature, b.feature)


def test_tile_boundaries_do_not_matter():
    # a splat spanning four tiles renders like the reference
    s = single_gaussian_scene([0.0, 0.0, 2.0], scale=0.4, opacity=0.8)
    cam = Camera(40, 40, 16, 16, 32, 32, np.eye(4))
    np.testing.assert_allclose(render(s, cam).rgb, render_reference(s, cam).rgb, atol=1e-12)


def test_float32_render():
    s = random_scene(30, size=32, seed=5, dtype=np.float32)
    out = render(s, front_camera(32))
    assert out.rgb.dtype == np.float32
    ref = render_reference(s, front_camera(32))
    assert np.abs(out.rgb - ref.rgb).max() < 1e-5


# backward ------------------------------------------------------------------

def test_feature_gradient_does_not_reach_geometry():
    s = random_scene(10, seed=1)
    cam = front_camera(16)
    d_feat = np.random.default_rng(0).normal(size=(16, 16, s.feature_dim))
    g = render_backward(s, cam, np.zeros((16, 16, 3)), d_feat, alpha_from_rgb_only=True)
    for name in ("opacity_logits", "positions", "log_scales", "quats", "colors"):
        assert not getattr(g, name).any(), name
    assert np.abs(g.features).max() > 0
    full = render_backward(s, cam, np.zeros((16, 16, 3)), d_feat, alpha_from_rgb_only=False)
    assert np.abs(full.opacity_logits).max() > 0


def test_single_gaussian_color_gradient():
    s = single_gaussian_scene([0.05, -0.03, 2.0], scale=0.15, opacity=0.6)
    cam = front_camera(16)
    g = render_backward(s, cam, np.ones((16, 16, 3)), None)
    out = render(s, cam)
    # d(sum rgb)/dc = sum over pixels of T * a = accumulated alpha
    np.testing.assert_allclose(g.colors[0], out.alpha.sum(), rtol=1e-9)
    h = 1e-3
    for c in range(3):
        plus, minus = s.colors.copy(), s.colors.copy()
        plus[0, c] += h
        minus[0, c] -= h
        num = (render(s.replace(colors=plus), cam).rgb.sum() - render(s.replace(colors=minus), cam).rgb.sum()) / (2 * h)
        assert g.colors[0, c] == pytest.approx(num, rel=1e-3)


@pytest.mark.parametrize("seed", [0, 1])
def test_gradients_match_finite_differences_f64(seed):
    s = random_scene(10, size=16, k=3, seed=seed)
    errs = relative_errors(s, front_camera(16), seed=seed, h=1e-6)
    assert max(errs.values()) < 1e-4, errs


def test_directional_derivative_f32():
    s = random_scene(10, size=16, k=3, seed=7, dtype=np.float32)
    cam = front_camera(16)
    rng = np.random.default_rng(1)
    w_rgb = rng.normal(size=(16, 16, 3))
    w_feat = rng.normal(size=(16, 16, 3))
    g = render_backward(s, cam, w_rgb.astype(np.float32), w_feat.astype(np.float32),
                        alpha_from_rgb_only=False).as_dict()
    dirs = {k: rng.normal(size=v.shape).astype(np.float32) for k, v in s.params().items()}
    analytic = sum(float(np.sum(g[k].astype(np.float64) * dirs[k])) for k in dirs)

    def loss(t):
        moved = s.replace(**{k: (getattr(s, k) + t * dirs[k]).astype(np.float32) for k in dirs})
        out = render(moved, cam)
        return float(np.sum(out.rgb * w_rgb) + np.sum(out.feature * w_feat))

    h = 1e-3
    numeric = (loss(h) - loss(-h)) / (2 * h)
    assert abs(analytic - numeric) <= 1e-2 * abs(numeric)


def test_alpha_gradient_matches_finite_differences():
    s = random_scene(8, seed=2)
    cam = front_camera(16)
    d_alpha = np.random.default_rng(3).normal(size=(16, 16))
    g = render_backward(s, cam, None, None, d_alpha=d_alpha)
    h = 1e-6
    for j in range(len(s)):
        plus, minus = s.positions.copy(), s.positions.copy()
        plus[j, 0] += h
        minus[j, 0] -= h
        num = (np.sum(render(s.replace(positions=plus), cam).alpha * d_alpha)
               - np.sum(render(s.replace(positions=minus), cam).alpha * d_alpha)) / (2 * h)
        assert g.positions[j, 0] == pytest.approx(num, rel=1e-4, abs=1e-8)


def test_nan_gradient_names_the_gaussian():
    s = random_scene(5, seed=0)
    cam = front_camera(16)
    out = render(s, cam)
    s.colors[2] = np.nan
    with pytest.raises(FloatingPointError, match="Gaussian 2"):
        render_backward(s, cam, np.ones((16, 16, 3)), None, forward=out)


def test_non_finite_upstream_rejected():
    s = random_scene(5)
    cam = front_camera(16)
    bad = np.ones((16, 16, 3))
    bad[0, 0, 0] = np.inf
    with pytest.raises(FloatingPointError):
        render_backward(s, cam, bad, None)


def test_densification_statistic_and_visibility():
    s = random_scene(10, seed=0)
    s.positions[0] = [0, 0, -1.0]  # behind the camera
    g = render_backward(s, front_camera(16), np.ones((16, 16, 3)), None)
    assert not g.visible[0] and g.visible[1:].any()
    assert g.mean2d_norm[0] == 0 and np.all(g.mean2d_norm >= 0)
