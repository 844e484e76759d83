"""Tile-based splat rasterizer for colour, feature, alpha and depth, with its
analytic backward pass.

Per pixel, splats are visited front to back. A splat's footprint is
``g = exp(-0.5 d^T conic d)``, its effective alpha ``a = min(0.99, opacity * g)``
and it adds ``T * a`` of its colour and feature, ``T`` being the transmittance
left by the splats in front. A pixel stops once the next splat would push ``T``
below ``1e-4``; that splat is not composited. Footprints are truncated where
``0.5 d^T conic d > GAUSS_CUTOFF`` (weight ~1e-7) so the tile binning is exact.

``render_reference`` composites the same image splat-by-splat over the whole
pixel grid, with its own projection; it is the oracle for the tile kernels.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np
from numba import njit

from .core import NEAR_PLANE, Camera, Scene, covariance_3d, quat_rotation_backward, quat_to_rotation, sigmoid

log = logging.getLogger(__name__)

TILE = 16
ALPHA_MAX = 0.99
T_MIN = 1e-4
GAUSS_CUTOFF = 16.0
DILATION = 0.3


@dataclass
class Splat2D:
    mean2d: np.ndarray
    cov2d: np.ndarray
    depth: float
    gaussian_index: int


@dataclass
class Projection:
    """Screen-space splats, sorted front to back (depth, then Gaussian index)."""

    index: np.ndarray     # (M,) Gaussian indices
    mean2d: np.ndarray    # (M, 2)
    cov2d: np.ndarray     # (M, 3) -> [xx, xy, yy], dilated
    conic: np.ndarray     # (M, 3) -> inverse of cov2d as [xx, xy, yy]
    depth: np.ndarray     # (M,)
    opacity: np.ndarray   # (M,)
    bounds: np.ndarray    # (M, 4) inclusive pixel box x0, x1, y0, y1

    def __len__(self):
        return len(self.index)

    def splats(self) -> list[Splat2D]:
        return [
            Splat2D(self.mean2d[i], np.array([[c[0], c[1]], [c[1], c[2]]]), float(self.depth[i]),
                    int(self.index[i]))
            for i, c in enumerate(self.cov2d)
        ]


@dataclass
class RenderOutput:
    rgb: np.ndarray       # (H, W, 3)
    feature: np.ndarray   # (H, W, k)
    alpha: np.ndarray     # (H, W)
    depth: np.ndarray     # (H, W) expected depth, 0 where nothing was hit
    projection: Projection | None = field(default=None, repr=False)
    final_T: np.ndarray | None = field(default=None, repr=False)
    last: np.ndarray | None = field(default=None, repr=False)
    tile_ranges: np.ndarray | None = field(default=None, repr=False)
    tile_list: np.ndarray | None = field(default=None, repr=False)
    selected: np.ndarray | None = field(default=None, repr=False)


@dataclass
class Gradients:
    positions: np.ndarray
    log_scales: np.ndarray
    quats: np.ndarray
    opacity_logits: np.ndarray
    colors: np.ndarray
    features: np.ndarray
    mean2d_norm: np.ndarray   # |dL/d mean2d| per Gaussian, pixels
    visible: np.ndarray       # bool, Gaussian had a non-empty footprint

    def as_dict(self) -> dict[str, np.ndarray]:
        return {"positions": self.positions, "log_scales": self.log_scales, "quats": self.quats,
                "opacity_logits": self.opacity_logits, "colors": self.colors, "features": self.features}


def _camera_arrays(camera: Camera, dtype):
    return camera.rotation.astype(dtype), camera.translation.astype(dtype)


def _selection_mask(n: int, selected) -> np.ndarray:
    if selected is None:
        return np.ones(n, dtype=bool)
    selected = np.asarray(selected)
    if selected.dtype == bool:
        if selected.shape != (n,):
            raise ValueError("boolean selection must have one entry per Gaussian")
        return selected
    mask = np.zeros(n, dtype=bool)
    mask[selected.astype(np.int64)] = True
    return mask


def _project_full(scene: Scene, camera: Camera, selected=None):
    """Projection plus the intermediates the backward pass needs (unsorted, unculled)."""
    dtype = scene.dtype
    Wr, wt = _camera_arrays(camera, dtype)
    fx, fy, cx, cy = (dtype.type(v) for v in (camera.fx, camera.fy, camera.cx, camera.cy))
    t = scene.positions @ Wr.T + wt
    z = t[:, 2]
    keep = _selection_mask(len(scene), selected) & (z > NEAR_PLANE)
    R = quat_to_rotation(scene.quats).astype(dtype)
    s = np.exp(scene.log_scales)
    M = R * s[:, None, :]
    sigma = M @ np.swapaxes(M, 1, 2)
    zs = np.where(keep, z, 1).astype(dtype)
    J = np.zeros((len(scene), 2, 3), dtype=dtype)
    J[:, 0, 0] = fx / zs
    J[:, 0, 2] = -fx * t[:, 0] / zs**2
    J[:, 1, 1] = fy / zs
    J[:, 1, 2] = -fy * t[:, 1] / zs**2
    Tm = J @ Wr
    cov = Tm @ sigma @ np.swapaxes(Tm, 1, 2)
    A = cov[:, 0, 0] + dtype.type(DILATION)
    B = cov[:, 0, 1]
    C = cov[:, 1, 1] + dtype.type(DILATION)
    det = A * C - B * B
    ok = keep & np.isfinite(det) & (det > 0)
    if np.any(keep & ~ok):
        log.debug("skipping %d splats with singular 2D covariance", int(np.sum(keep & ~ok)))
    dets = np.where(ok, det, 1)
    conic = np.stack([C / dets, -B / dets, A / dets], axis=1)
    mean2d = np.stack([fx * t[:, 0] / zs + cx, fy * t[:, 1] / zs + cy], axis=1)
    return dict(t=t, z=z, ok=ok, R=R, s=s, M=M, sigma=sigma, J=J, Tm=Tm, A=A, B=B, C=C, det=dets,
                conic=conic, mean2d=mean2d)


def project(scene: Scene, camera: Camera, selected=None) -> Projection:
    """Project Gaussians to screen-space splats sorted front to back.

    Splats behind the near plane, with a singular 2D covariance, or whose
    truncated footprint misses the image are dropped.
    """
    return _project_with_intermediates(scene, camera, selected)[0]


def _project_with_intermediates(scene: Scene, camera: Camera, selected=None):
    p = _project_full(scene, camera, selected)
    dtype = scene.dtype
    ok = p["ok"]
    rx = np.sqrt(2 * GAUSS_CUTOFF * np.where(ok, p["A"], 0)) * 1.0001 + 1e-4
    ry = np.sqrt(2 * GAUSS_CUTOFF * np.where(ok, p["C"], 0)) * 1.0001 + 1e-4
    mx, my = p["mean2d"][:, 0], p["mean2d"][:, 1]
    with np.errstate(invalid="ignore"):
        x0 = np.maximum(np.ceil(mx - rx), 0)
        x1 = np.minimum(np.floor(mx + rx), camera.width - 1)
        y0 = np.maximum(np.ceil(my - ry), 0)
        y1 = np.minimum(np.floor(my + ry), camera.height - 1)
        ok = ok & np.isfinite(mx) & np.isfinite(my) & (x0 <= x1) & (y0 <= y1)
    idx = np.nonzero(ok)[0]
    order = np.lexsort((idx, p["z"][idx]))
    idx = idx[order]
    proj = Projection(
        index=idx,
        mean2d=np.ascontiguousarray(p["mean2d"][idx]),
        cov2d=np.stack([p["A"][idx], p["B"][idx], p["C"][idx]], axis=1),
        conic=np.ascontiguousarray(p["conic"][idx]),
        depth=p["z"][idx].astype(dtype),
        opacity=sigmoid(scene.opacity_logits[idx]).astype(dtype),
        bounds=np.stack([x0[idx], x1[idx], y0[idx], y1[idx]], axis=1).astype(np.int64),
    )
    return proj, p


@njit(cache=True)
def _bin_tiles(bounds, tiles_x, tiles_y, tile):
    n_tiles = tiles_x * tiles_y
    counts = np.zeros(n_tiles + 1, dtype=np.int64)
    for i in range(bounds.shape[0]):
        for ty in range(bounds[i, 2] // tile, bounds[i, 3] // tile + 1):
            for tx in range(bounds[i, 0] // tile, bounds[i, 1] // tile + 1):
                counts[ty * tiles_x + tx + 1] += 1
    ranges = np.cumsum(counts)
    fill = ranges[:-1].copy()
    out = np.empty(ranges[-1], dtype=np.int64)
    for i in range(bounds.shape[0]):
        for ty in range(bounds[i, 2] // tile, bounds[i, 3] // tile + 1):
            for tx in range(bounds[i, 0] // tile, bounds[i, 1] // tile + 1):
                t = ty * tiles_x + tx
                out[fill[t]] = i
                fill[t] += 1
    return ranges, out


@njit(cache=True)
def _forward_kernel(ranges, tile_list, bounds, mean2d, conic, opacity, colors, feats, depth,
                    height, width, tile, cutoff, alpha_max, t_min,
                    out_rgb, out_feat, out_depth, out_T, out_last):
    # Splat-outer within each tile: every pixel still sees its splats front to
    # back, but only the pixels inside a splat's box are visited.
    tiles_x = (width + tile - 1) // tile
    k = feats.shape[1]
    npix = tile * tile
    T = np.empty(npix)
    done = np.empty(npix, dtype=np.bool_)
    last = np.empty(npix, dtype=np.int64)
    acc = np.empty((npix, 4))
    acc_f = np.empty((npix, max(k, 1)))
    for t in range(ranges.shape[0] - 1):
        start = ranges[t]
        end = ranges[t + 1]
        ty = t // tiles_x
        tx = t - ty * tiles_x
        x0 = tx * tile
        y0 = ty * tile
        x1 = min(x0 + tile, width) - 1
        y1 = min(y0 + tile, height) - 1
        T[:] = 1.0
        done[:] = False
        last[:] = start
        acc[:] = 0.0
        acc_f[:] = 0.0
        remaining = (x1 - x0 + 1) * (y1 - y0 + 1)
        for j in range(start, end):
            if remaining == 0:
                break
            i = tile_list[j]
            mx = mean2d[i, 0]
            my = mean2d[i, 1]
            ca = conic[i, 0]
            cb = conic[i, 1]
            cc = conic[i, 2]
            op = opacity[i]
            for py in range(max(bounds[i, 2], y0), min(bounds[i, 3], y1) + 1):
                dy = py - my
                for px in range(max(bounds[i, 0], x0), min(bounds[i, 1], x1) + 1):
                    p = (py - y0) * tile + (px - x0)
                    if done[p]:
                        continue
                    dx = px - mx
                    power = -0.5 * (ca * dx * dx + cc * dy * dy) - cb * dx * dy
                    if power < -cutoff:
                        continue
                    a = min(alpha_max, op * np.exp(power))
                    test_T = T[p] * (1.0 - a)
                    if test_T < t_min:
                        done[p] = True
                        remaining -= 1
                        continue
                    w = a * T[p]
                    acc[p, 0] += w * colors[i, 0]
                    acc[p, 1] += w * colors[i, 1]
                    acc[p, 2] += w * colors[i, 2]
                    acc[p, 3] += w * depth[i]
                    for c in range(k):
                        acc_f[p, c] += w * feats[i, c]
                    T[p] = test_T
                    last[p] = j + 1
        for py in range(y0, y1 + 1):
            for px in range(x0, x1 + 1):
                p = (py - y0) * tile + (px - x0)
                out_rgb[py, px, 0] = acc[p, 0]
                out_rgb[py, px, 1] = acc[p, 1]
                out_rgb[py, px, 2] = acc[p, 2]
                out_depth[py, px] = acc[p, 3]
                for c in range(k):
                    out_feat[py, px, c] = acc_f[p, c]
                out_T[py, px] = T[p]
                out_last[py, px] = last[p]


@njit(cache=True)
def _backward_kernel(ranges, tile_list, bounds, mean2d, conic, opacity, colors, feats,
                     height, width, tile, cutoff, alpha_max, final_T, last,
                     d_rgb, d_feat, d_alpha, use_feat_for_alpha, use_alpha,
                     g_mean, g_conic, g_opacity, g_color, g_feat):
    # Back-to-front replay of the forward pass, splat-outer within each tile.
    tiles_x = (width + tile - 1) // tile
    k = feats.shape[1]
    kd = d_feat.shape[2]
    npix = tile * tile
    T = np.empty(npix)
    lastp = np.zeros(npix, dtype=np.int64)
    acc = np.empty((npix, 4))
    acc_f = np.empty((npix, max(k, 1)))
    up = np.zeros((npix, 4))
    up_f = np.zeros((npix, max(kd, 1)))
    gf = np.empty(max(k, 1))
    for t in range(ranges.shape[0] - 1):
        start = ranges[t]
        ty = t // tiles_x
        tx = t - ty * tiles_x
        x0 = tx * tile
        y0 = ty * tile
        x1 = min(x0 + tile, width) - 1
        y1 = min(y0 + tile, height) - 1
        stop = start
        for py in range(y0, y1 + 1):
            for px in range(x0, x1 + 1):
                p = (py - y0) * tile + (px - x0)
                T[p] = final_T[py, px]
                lastp[p] = last[py, px]
                stop = max(stop, lastp[p])
                up[p, 0] = d_rgb[py, px, 0]
                up[p, 1] = d_rgb[py, px, 1]
                up[p, 2] = d_rgb[py, px, 2]
                up[p, 3] = d_alpha[py, px] if use_alpha else 0.0
                for c in range(kd):
                    up_f[p, c] = d_feat[py, px, c]
        acc[:] = 0.0
        acc_f[:] = 0.0
        for j in range(stop - 1, start - 1, -1):
            i = tile_list[j]
            mx = mean2d[i, 0]
            my = mean2d[i, 1]
            ca = conic[i, 0]
            cb = conic[i, 1]
            cc = conic[i, 2]
            op = opacity[i]
            c0 = colors[i, 0]
            c1 = colors[i, 1]
            c2 = colors[i, 2]
            gc0 = 0.0
            gc1 = 0.0
            gc2 = 0.0
            gop = 0.0
            gq0 = 0.0
            gq1 = 0.0
            gq2 = 0.0
            gm0 = 0.0
            gm1 = 0.0
            if kd > 0:
                gf[:] = 0.0
            hit = False
            for py in range(max(bounds[i, 2], y0), min(bounds[i, 3], y1) + 1):
                dy = py - my
                for px in range(max(bounds[i, 0], x0), min(bounds[i, 1], x1) + 1):
                    p = (py - y0) * tile + (px - x0)
                    if j >= lastp[p]:
                        continue
                    dx = px - mx
                    power = -0.5 * (ca * dx * dx + cc * dy * dy) - cb * dx * dy
                    if power < -cutoff:
                        continue
                    hit = True
                    G = np.exp(power)
                    a_raw = op * G
                    a = min(alpha_max, a_raw)
                    Tp = T[p] / (1.0 - a)
                    T[p] = Tp
                    w = a * Tp
                    dr = up[p, 0]
                    dg = up[p, 1]
                    db = up[p, 2]
                    gc0 += w * dr
                    gc1 += w * dg
                    gc2 += w * db
                    dL_da = Tp * ((c0 - acc[p, 0]) * dr + (c1 - acc[p, 1]) * dg + (c2 - acc[p, 2]) * db)
                    if use_alpha:
                        dL_da += Tp * (1.0 - acc[p, 3]) * up[p, 3]
                    if kd > 0:
                        df = 0.0
                        for c in range(k):
                            dfc = up_f[p, c]
                            fc = feats[i, c]
                            gf[c] += w * dfc
                            df += (fc - acc_f[p, c]) * dfc
                            acc_f[p, c] = a * fc + (1.0 - a) * acc_f[p, c]
                        if use_feat_for_alpha:
                            dL_da += Tp * df
                    acc[p, 0] = a * c0 + (1.0 - a) * acc[p, 0]
                    acc[p, 1] = a * c1 + (1.0 - a) * acc[p, 1]
                    acc[p, 2] = a * c2 + (1.0 - a) * acc[p, 2]
                    acc[p, 3] = a + (1.0 - a) * acc[p, 3]
                    if a_raw < alpha_max:
                        gop += dL_da * G
                        dpower = dL_da * op * G
                        gq0 += dpower * (-0.5 * dx * dx)
                        gq1 += dpower * (-dx * dy)
                        gq2 += dpower * (-0.5 * dy * dy)
                        gm0 += dpower * (ca * dx + cb * dy)
                        gm1 += dpower * (cb * dx + cc * dy)
            if hit:
                g_color[i, 0] += gc0
                g_color[i, 1] += gc1
                g_color[i, 2] += gc2
                g_opacity[i] += gop
                g_conic[i, 0] += gq0
                g_conic[i, 1] += gq1
                g_conic[i, 2] += gq2
                g_mean[i, 0] += gm0
                g_mean[i, 1] += gm1
                for c in range(kd):
                    g_feat[i, c] += gf[c]


def _tile_grid(camera: Camera):
    return (camera.width + TILE - 1) // TILE, (camera.height + TILE - 1) // TILE


def render(scene: Scene, camera: Camera, *, selected=None, with_features: bool = True) -> RenderOutput:
    """Composite the scene (or the ``selected`` Gaussians only) into ``camera``.

    Returns colour, feature, accumulated alpha and expected depth images; the
    background is zero in every channel.
    """
    dtype = scene.dtype
    proj = project(scene, camera, selected)
    H, W = camera.height, camera.width
    k = scene.feature_dim
    rgb = np.zeros((H, W, 3), dtype=dtype)
    feat = np.zeros((H, W, k if with_features else 0), dtype=dtype)
    depth = np.zeros((H, W), dtype=dtype)
    final_T = np.ones((H, W), dtype=dtype)
    last = np.zeros((H, W), dtype=np.int64)
    tiles_x, tiles_y = _tile_grid(camera)
    if len(proj):
        ranges, tile_list = _bin_tiles(proj.bounds, tiles_x, tiles_y, TILE)
        colors = np.ascontiguousarray(scene.colors[proj.index])
        feats = np.ascontiguousarray(scene.features[proj.index] if with_features
                                     else np.zeros((len(proj), 0), dtype=dtype))
        _forward_kernel(ranges, tile_list, proj.bounds, proj.mean2d, proj.conic, proj.opacity, colors, feats,
                        proj.depth, H, W, TILE, GAUSS_CUTOFF, ALPHA_MAX, T_MIN,
                        rgb, feat, depth, final_T, last)
    else:
        ranges = np.zeros(tiles_x * tiles_y + 1, dtype=np.int64)
        tile_list = np.zeros(0, dtype=np.int64)
    alpha = (1 - final_T).astype(dtype)
    with np.errstate(invalid="ignore", divide="ignore"):
        depth = np.where(alpha > 0, depth / np.where(alpha > 0, alpha, 1), 0).astype(dtype)
    return RenderOutput(rgb, feat, alpha, depth, projection=proj, final_T=final_T, last=last,
                        tile_ranges=ranges, tile_list=tile_list,
                        selected=None if selected is None else _selection_mask(len(scene), selected))


def render_subset(scene: Scene, selected, camera: Camera, *, with_features: bool = True) -> RenderOutput:
    """Render only the Gaussians in ``selected`` (index array or boolean mask)."""
    return render(scene, camera, selected=selected, with_features=with_features)


def _projection_backward(scene: Scene, camera: Camera, p, idx, g_mean, g_conic, g_opacity):
    """Chain screen-space gradients of the visible splats ``idx`` back to Gaussian parameters."""
    dtype = scene.dtype
    fx, fy = dtype.type(camera.fx), dtype.type(camera.fy)
    Wr, _ = _camera_arrays(camera, dtype)
    t = p["t"][idx]
    x, y, z = t[:, 0], t[:, 1], t[:, 2]
    A, B, C, det = p["A"][idx], p["B"][idx], p["C"][idx], p["det"][idx]
    da, db, dc = g_conic[:, 0], g_conic[:, 1], g_conic[:, 2]
    det2 = det * det
    # conic = [C, -B, A] / det
    dA = da * (-C * C / det2) + db * (B * C / det2) + dc * (1 / det - A * C / det2)
    dB = da * (2 * B * C / det2) + db * (-1 / det - 2 * B * B / det2) + dc * (2 * A * B / det2)
    dC = da * (1 / det - A * C / det2) + db * (A * B / det2) + dc * (-A * A / det2)
    G = np.empty((len(idx), 2, 2), dtype=dtype)
    G[:, 0, 0] = dA
    G[:, 0, 1] = G[:, 1, 0] = 0.5 * dB
    G[:, 1, 1] = dC
    Tm = p["Tm"][idx]
    sigma = p["sigma"][idx]
    d_sigma = np.swapaxes(Tm, 1, 2) @ G @ Tm
    d_Tm = 2 * G @ Tm @ sigma
    dJ = d_Tm @ Wr.T
    dt = np.zeros((len(idx), 3), dtype=dtype)
    z2, z3 = z * z, z * z * z
    dt[:, 0] = -fx / z2 * dJ[:, 0, 2] + g_mean[:, 0] * fx / z
    dt[:, 1] = -fy / z2 * dJ[:, 1, 2] + g_mean[:, 1] * fy / z
    dt[:, 2] = (-fx / z2 * dJ[:, 0, 0] + 2 * fx * x / z3 * dJ[:, 0, 2]
                - fy / z2 * dJ[:, 1, 1] + 2 * fy * y / z3 * dJ[:, 1, 2]
                - g_mean[:, 0] * fx * x / z2 - g_mean[:, 1] * fy * y / z2)
    d_pos = dt @ Wr
    Mx = p["M"][idx]
    s = p["s"][idx]
    dM = 2 * d_sigma @ Mx
    R = p["R"][idx]
    d_s = np.einsum("nij,nij->nj", R, dM)
    d_ls = d_s * s
    dR = dM * s[:, None, :]
    d_q = quat_rotation_backward(scene.quats[idx], dR).astype(dtype)
    op = sigmoid(scene.opacity_logits[idx])
    d_logit = g_opacity * op * (1 - op)
    return d_pos, d_ls, d_q, d_logit


def render_backward(scene: Scene, camera: Camera, d_rgb, d_feature=None, *,
                    alpha_from_rgb_only: bool = True, d_alpha=None,
                    forward: RenderOutput | None = None, selected=None) -> Gradients:
    """Gradients of a scalar loss w.r.t. every Gaussian parameter.

    ``d_rgb`` (H, W, 3), ``d_feature`` (H, W, k) and ``d_alpha`` (H, W) are the
    upstream gradients of the rendered channels. With ``alpha_from_rgb_only``
    the feature gradient reaches only the Gaussian features: opacity, position,
    scale and rotation see colour (and alpha) gradients alone.
    """
    dtype = scene.dtype
    n, k = len(scene), scene.feature_dim
    H, W = camera.height, camera.width
    if forward is None or forward.projection is None:
        forward = render(scene, camera, selected=selected, with_features=True)
    if selected is None and forward.selected is not None:
        selected = forward.selected
    proj = forward.projection
    d_rgb = np.ascontiguousarray(d_rgb, dtype=dtype) if d_rgb is not None else np.zeros((H, W, 3), dtype)
    if d_feature is None:
        d_feature = np.zeros((H, W, 0), dtype=dtype)
    d_feature = np.ascontiguousarray(d_feature, dtype=dtype)
    if d_feature.shape[2] not in (0, k):
        raise ValueError("feature gradient has the wrong channel count")
    use_alpha = d_alpha is not None
    d_alpha = np.ascontiguousarray(d_alpha if use_alpha else np.zeros((H, W)), dtype=dtype)
    for name, arr in (("d_rgb", d_rgb), ("d_feature", d_feature), ("d_alpha", d_alpha)):
        if not np.all(np.isfinite(arr)):
            raise FloatingPointError(f"non-finite upstream gradient {name}")

    grads = Gradients(
        positions=np.zeros((n, 3), dtype), log_scales=np.zeros((n, 3), dtype),
        quats=np.zeros((n, 4), dtype), opacity_logits=np.zeros(n, dtype),
        colors=np.zeros((n, 3), dtype), features=np.zeros((n, k), dtype),
        mean2d_norm=np.zeros(n, dtype), visible=np.zeros(n, dtype=bool),
    )
    m = len(proj)
    if m == 0:
        return grads
    idx = proj.index
    g_mean = np.zeros((m, 2), dtype)
    g_conic = np.zeros((m, 3), dtype)
    g_opacity = np.zeros(m, dtype)
    g_color = np.zeros((m, 3), dtype)
    g_feat = np.zeros((m, k if d_feature.shape[2] else 0), dtype)
    colors = np.ascontiguousarray(scene.colors[idx])
    feats = np.ascontiguousarray(scene.features[idx] if d_feature.shape[2] else np.zeros((m, 0), dtype))
    _backward_kernel(forward.tile_ranges, forward.tile_list, proj.bounds, proj.mean2d, proj.conic, proj.opacity,
                     colors, feats, H, W, TILE, GAUSS_CUTOFF, ALPHA_MAX, forward.final_T, forward.last,
                     d_rgb, d_feature, d_alpha, not alpha_from_rgb_only, use_alpha,
                     g_mean, g_conic, g_opacity, g_color, g_feat)
    p = _project_full(scene, camera, selected)
    d_pos, d_ls, d_q, d_logit = _projection_backward(scene, camera, p, idx, g_mean, g_conic, g_opacity)
    grads.positions[idx] = d_pos
    grads.log_scales[idx] = d_ls
    grads.quats[idx] = d_q
    grads.opacity_logits[idx] = d_logit
    grads.colors[idx] = g_color
    if g_feat.shape[1]:
        grads.features[idx] = g_feat
    grads.mean2d_norm[idx] = np.linalg.norm(g_mean, axis=1)
    grads.visible[idx] = True
    for name, arr in grads.as_dict().items():
        bad = ~np.all(np.isfinite(arr.reshape(n, -1)), axis=1)
        if np.any(bad):
            raise FloatingPointError(f"non-finite {name} gradient for Gaussian {int(np.argmax(bad))}")
    return grads


def render_reference(scene: Scene, camera: Camera, *, selected=None) -> RenderOutput:
    """Brute-force compositor: every splat is tested against every pixel.

    Independent of the tile kernels and of :func:`project`: covariances come
    from :func:`covariance_3d` per Gaussian and the loop runs over splats with
    all pixels vectorized. Computes in float64.
    """
    H, W = camera.height, camera.width
    k = scene.feature_dim
    Rw = camera.rotation
    tw = camera.translation
    mask = _selection_mask(len(scene), selected)
    splats = []
    for i in np.nonzero(mask)[0]:
        p = scene.positions[i].astype(np.float64)
        tc = Rw @ p + tw
        if not tc[2] > NEAR_PLANE:
            continue
        cov3 = covariance_3d(np.exp(scene.log_scales[i].astype(np.float64)),
                             scene.quats[i].astype(np.float64))
        J = np.array([[camera.fx / tc[2], 0, -camera.fx * tc[0] / tc[2] ** 2],
                      [0, camera.fy / tc[2], -camera.fy * tc[1] / tc[2] ** 2]])
        cov2 = J @ Rw @ cov3 @ Rw.T @ J.T + DILATION * np.eye(2)
        if np.linalg.det(cov2) <= 0:
            continue
        mean = np.array([camera.fx * tc[0] / tc[2] + camera.cx, camera.fy * tc[1] / tc[2] + camera.cy])
        depth_key = scene.dtype.type(tc[2])
        splats.append((depth_key, int(i), mean, np.linalg.inv(cov2), tc[2]))
    splats.sort(key=lambda s: (s[0], s[1]))

    v, u = np.mgrid[0:H, 0:W].astype(np.float64)
    T = np.ones((H, W))
    active = np.ones((H, W), dtype=bool)
    rgb = np.zeros((H, W, 3))
    feat = np.zeros((H, W, k))
    depth = np.zeros((H, W))
    for _, i, mean, inv, z in splats:
        dx = u - mean[0]
        dy = v - mean[1]
        maha = inv[0, 0] * dx * dx + 2 * inv[0, 1] * dx * dy + inv[1, 1] * dy * dy
        hit = active & (0.5 * maha <= GAUSS_CUTOFF)
        a = np.minimum(ALPHA_MAX, sigmoid(float(scene.opacity_logits[i])) * np.exp(-0.5 * maha))
        new_T = T * (1 - a)
        stop = hit & (new_T < T_MIN)
        active &= ~stop
        hit &= ~stop
        w = np.where(hit, a * T, 0.0)
        rgb += w[..., None] * scene.colors[i].astype(np.float64)
        feat += w[..., None] * scene.features[i].astype(np.float64)
        depth += w * z
        T = np.where(hit, new_T, T)
    alpha = 1 - T
    with np.errstate(invalid="ignore", divide="ignore"):
        depth = np.where(alpha > 0, depth / np.where(alpha > 0, alpha, 1), 0)
    return RenderOutput(rgb, feat, alpha, depth)
