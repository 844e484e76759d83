"""Synthetic tabletop scenes in the same on-disk formats as real captures.

Objects (spheres and boxes) are built from ground-truth Gaussians on their
surfaces and rendered with the in-tree renderer. Each view gets:

* an RGB image,
* a coarse patch-level feature map (object feature vectors, pooled and noised),
* overlapping masks: one per object plus angular "part" masks inside it,
* a ground-truth object label map.

The dense point cloud handed to training is the ground-truth surface samples
with positional and colour noise.
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path

import numpy as np

from . import io
from .core import Camera, PcaModel, Scene, logit
from .raster import render

LIGHT = np.array([0.4, 0.3, 0.85]) / np.linalg.norm([0.4, 0.3, 0.85])


@dataclass
class SyntheticSpec:
    n_objects: int = 5
    shapes: tuple[str, ...] = ("sphere", "box")
    feature_dim: int = 32
    feature_noise: float = 0.05
    feature_patch: int = 4
    parts_per_object: int = 6
    image_size: int = 64
    n_train_views: int = 3
    n_heldout_views: int = 1
    view_spread_deg: float = 50.0
    camera_distance: float = 3.0
    camera_elevation_deg: float = 55.0
    fov_deg: float = 45.0
    layout_radius: float = 0.7
    object_radius: tuple[float, float] = (0.26, 0.32)
    spacing: float = 0.03
    gaussian_opacity: float = 0.9
    gaussian_scale: float = 0.6      # fraction of spacing
    surface_inset: float = 1.5       # Gaussian std devs; puts the rendered rim on the true surface
    point_noise: float = 0.15        # fraction of spacing
    color_noise: float = 0.02
    seed: int = 42

    @classmethod
    def from_dict(cls, d: dict) -> "SyntheticSpec":
        d = dict(d)
        for key in ("shapes", "object_radius"):
            if key in d:
                d[key] = tuple(d[key])
        return cls(**d)


@dataclass
class SyntheticObject:
    name: str
    shape: str
    center: np.ndarray
    size: np.ndarray          # radius (sphere) or half extents (box)
    yaw: float
    color: np.ndarray
    feature: np.ndarray       # raw C-dim feature vector


@dataclass
class SyntheticView:
    camera: Camera
    image: np.ndarray         # (H, W, 3) float32
    features: np.ndarray      # (h, w, C) patch features
    masks: np.ndarray         # (M, H, W) bool
    labels: np.ndarray        # (H, W) u32 object id + 1, 0 background
    heldout: bool = False


@dataclass
class SyntheticDataset:
    spec: SyntheticSpec
    objects: list[SyntheticObject]
    gt_scene: Scene           # features are one-hot object indicators
    gaussian_labels: np.ndarray
    points: np.ndarray
    point_colors: np.ndarray
    point_labels: np.ndarray
    views: list[SyntheticView] = field(default_factory=list)
    background_feature: np.ndarray | None = None

    @property
    def train_views(self) -> list[SyntheticView]:
        return [v for v in self.views if not v.heldout]

    @property
    def heldout_views(self) -> list[SyntheticView]:
        return [v for v in self.views if v.heldout]

    @property
    def object_features(self) -> np.ndarray:
        return np.stack([o.feature for o in self.objects])


def _fibonacci_sphere(n: int) -> np.ndarray:
    i = np.arange(n) + 0.5
    phi = np.arccos(1 - 2 * i / n)
    theta = np.pi * (1 + 5**0.5) * i
    return np.stack([np.cos(theta) * np.sin(phi), np.sin(theta) * np.sin(phi), np.cos(phi)], axis=1)


def _shade(normals: np.ndarray) -> np.ndarray:
    return 0.45 + 0.55 * np.clip(normals @ LIGHT, 0, None)


def _sphere_surface(obj: SyntheticObject, spacing: float):
    r = float(obj.size[0])
    n = max(int(4 * np.pi * r * r / spacing**2), 8)
    normals = _fibonacci_sphere(n)
    az = np.arctan2(normals[:, 1], normals[:, 0]) + obj.yaw
    band = ((np.floor(az / (np.pi / 3)) + (normals[:, 2] > 0.3)) % 2).astype(float)
    tint = 1.0 - 0.45 * band
    colors = obj.color * (_shade(normals) * tint)[:, None]
    return obj.center + r * normals, colors


def _box_surface(obj: SyntheticObject, spacing: float):
    h = obj.size
    pts, nrm = [], []
    for axis in range(3):
        u, v = [a for a in range(3) if a != axis]
        nu = max(int(np.ceil(2 * h[u] / spacing)), 2)
        nv = max(int(np.ceil(2 * h[v] / spacing)), 2)
        gu, gv = np.meshgrid(np.linspace(-h[u], h[u], nu), np.linspace(-h[v], h[v], nv), indexing="ij")
        for sign in (-1.0, 1.0):
            p = np.zeros((gu.size, 3))
            p[:, u] = gu.ravel()
            p[:, v] = gv.ravel()
            p[:, axis] = sign * h[axis]
            n = np.zeros_like(p)
            n[:, axis] = sign
            stripe = ((np.floor((p[:, u] + h[u]) / (h[u] / 2)) % 2) * (axis != 2)).astype(float)
            pts.append(np.column_stack([p, stripe]))
            nrm.append(n)
    pts = np.vstack(pts)
    nrm = np.vstack(nrm)
    stripe = pts[:, 3]
    pts = pts[:, :3]
    # drop duplicated edge samples
    _, uniq = np.unique(np.round(pts / (spacing * 0.25)), axis=0, return_index=True)
    uniq = np.sort(uniq)
    pts, nrm, stripe = pts[uniq], nrm[uniq], stripe[uniq]
    c, s = np.cos(obj.yaw), np.sin(obj.yaw)
    Rz = np.array([[c, -s, 0], [s, c, 0], [0, 0, 1]])
    pts = pts @ Rz.T + obj.center
    nrm = nrm @ Rz.T
    colors = obj.color * (_shade(nrm) * (1.0 - 0.4 * stripe))[:, None]
    return pts, colors


def _make_objects(spec: SyntheticSpec, rng: np.random.Generator) -> tuple[list[SyntheticObject], np.ndarray]:
    """Objects on a ring plus the background feature vector."""
    objs = []
    hues = rng.permutation(spec.n_objects) / spec.n_objects + rng.uniform(0, 1 / spec.n_objects)
    base_angle = rng.uniform(0, 2 * np.pi)
    # one extra vector for the background
    feats = _orthonormal_features(spec.n_objects + 1, spec.feature_dim, rng)
    for i in range(spec.n_objects):
        shape = spec.shapes[i % len(spec.shapes)]
        ang = base_angle + 2 * np.pi * i / spec.n_objects
        rad = spec.layout_radius if spec.n_objects > 1 else 0.0
        r = rng.uniform(*spec.object_radius)
        if shape == "sphere":
            size = np.array([r, r, r])
            z = r
        else:
            size = np.array([r * rng.uniform(0.7, 1.0), r * rng.uniform(0.7, 1.0), r * rng.uniform(0.6, 0.9)])
            z = size[2]
        center = np.array([rad * np.cos(ang), rad * np.sin(ang), z])
        hue = hues[i] % 1.0
        color = np.clip(np.abs(((hue * 6 + np.array([0, 4, 2])) % 6) - 3) - 1, 0, 1) * 0.75 + 0.2
        objs.append(SyntheticObject(f"{shape}_{i}", shape, center, size, float(rng.uniform(0, np.pi)),
                                    color, feats[i]))
    return objs, feats[-1]


def _orthonormal_features(n: int, dim: int, rng: np.random.Generator) -> np.ndarray:
    """``n`` random orthonormal unit vectors (rows); needs ``n <= dim``."""
    if n > dim:
        raise ValueError(f"cannot draw {n} orthonormal features in {dim} dimensions")
    q, r = np.linalg.qr(rng.normal(size=(dim, n)))
    return (q * np.sign(np.diag(r))).T


def make_cameras(spec: SyntheticSpec, rng: np.random.Generator | None = None) -> tuple[list[Camera], list[bool]]:
    """Training cameras spread over an arc, held-out cameras between them."""
    n = spec.n_train_views
    spread = np.radians(spec.view_spread_deg)
    train_az = (np.arange(n) - (n - 1) / 2) * spread
    held_az = (np.arange(spec.n_heldout_views) - (spec.n_heldout_views - 1) / 2) * spread + spread / 2
    if n == 1:
        held_az = held_az + spread / 2
    el = np.radians(spec.camera_elevation_deg)
    cams, held = [], []
    for az, h in [(a, False) for a in train_az] + [(a, True) for a in held_az]:
        eye = spec.camera_distance * np.array([np.cos(el) * np.cos(az), np.cos(el) * np.sin(az), np.sin(el)])
        cams.append(Camera.look_at(eye, [0, 0, 0.15], width=spec.image_size, height=spec.image_size,
                                   fov_deg=spec.fov_deg))
        held.append(h)
    return cams, held


def _part_masks(obj_mask: np.ndarray, parts: int) -> list[np.ndarray]:
    rows, cols = np.nonzero(obj_mask)
    cy, cx = rows.mean(), cols.mean()
    ang = np.arctan2(rows - cy, cols - cx)
    sector = np.floor((ang + np.pi) / (2 * np.pi) * parts).astype(int) % parts
    out = []
    for s in range(parts):
        m = np.zeros_like(obj_mask)
        m[rows[sector == s], cols[sector == s]] = True
        if m.any():
            out.append(m)
    return out


def label_map(scene_onehot: Scene, camera: Camera) -> np.ndarray:
    """Object id + 1 where that object's composited weight exceeds 0.5."""
    out = render(scene_onehot, camera)
    w = out.feature
    best = np.argmax(w, axis=2)
    return np.where(w.max(axis=2) > 0.5, best + 1, 0).astype(np.uint32)


def generate(spec: SyntheticSpec | None = None) -> SyntheticDataset:
    spec = spec or SyntheticSpec()
    rng = np.random.default_rng(spec.seed)
    objects, bg_feature = _make_objects(spec, rng)
    pos, col, lab = [], [], []
    scale = spec.gaussian_scale * spec.spacing
    for i, obj in enumerate(objects):
        # splats reach past their centres, so sample a slightly shrunken surface
        inner = replace(obj, size=obj.size - spec.surface_inset * scale)
        p, c = (_sphere_surface if obj.shape == "sphere" else _box_surface)(inner, spec.spacing)
        pos.append(p)
        col.append(c)
        lab.append(np.full(len(p), i))
    pos = np.vstack(pos)
    col = np.clip(np.vstack(col), 0, 1)
    lab = np.concatenate(lab)
    n_obj = len(objects)
    onehot = np.eye(n_obj, dtype=np.float32)[lab]
    gt = Scene.from_points(pos, col, scales=scale, opacity=spec.gaussian_opacity,
                           features=onehot, pca=PcaModel.identity(n_obj), dtype=np.float32)
    gt.metadata = {"synthetic": asdict(spec)}

    noisy = pos + rng.normal(scale=spec.point_noise * spec.spacing, size=pos.shape)
    noisy_col = np.clip(col + rng.normal(scale=spec.color_noise, size=col.shape), 0, 1)

    ds = SyntheticDataset(spec, objects, gt, lab, noisy, noisy_col, lab, background_feature=bg_feature)
    cams, held = make_cameras(spec)
    obj_feats = ds.object_features
    bg_feat = ds.background_feature
    for cam, h in zip(cams, held):
        image = np.clip(render(gt, cam, with_features=False).rgb, 0, 1).astype(np.float32)
        labels = label_map(gt, cam)
        ds.views.append(SyntheticView(cam, image, _patch_features(labels, obj_feats, bg_feat, spec, rng),
                                      _view_masks(labels, n_obj, spec.parts_per_object), labels, h))
    return ds


def _patch_features(labels, obj_feats, bg_feat, spec: SyntheticSpec, rng) -> np.ndarray:
    table = np.vstack([bg_feat, obj_feats])
    fine = table[labels.astype(np.int64)]
    p = spec.feature_patch
    H, W = labels.shape
    h, w = H // p, W // p
    coarse = fine[: h * p, : w * p].reshape(h, p, w, p, -1).mean(axis=(1, 3))
    coarse = coarse + rng.normal(scale=spec.feature_noise, size=coarse.shape)
    return coarse.astype(np.float32)


def _view_masks(labels, n_obj: int, parts: int) -> np.ndarray:
    masks = []
    for i in range(n_obj):
        m = labels == i + 1
        if not m.any():
            continue
        masks.append(m)
        masks.extend(_part_masks(m, parts) if parts > 1 else [])
    if not masks:
        return np.zeros((0,) + labels.shape, dtype=bool)
    return np.stack(masks)


def scene_with_object_features(scene: Scene, gaussian_labels, object_features, pca: PcaModel) -> Scene:
    """Copy of ``scene`` whose features are the compressed object features."""
    from .semfeat import pca_project

    comp = pca_project(pca, object_features).astype(np.float32)
    out = scene.copy()
    out.features = comp[np.asarray(gaussian_labels)]
    out.pca = pca
    return out


def write_dataset(ds: SyntheticDataset, out_dir) -> Path:
    """Write images, cameras, features, masks and ground truth plus ``manifest.json``."""
    out = io.ensure_dir(out_dir)
    for sub in ("images", "cameras", "features", "masks", "gt"):
        io.ensure_dir(out / sub)
    views, held = [], []
    for i, v in enumerate(ds.views):
        entry = {
            "image": f"images/view_{i:03d}.ppm",
            "camera": f"cameras/view_{i:03d}.json",
            "features": f"features/view_{i:03d}.sgtn",
            "masks": f"masks/view_{i:03d}.sgtn",
            "gt_labels": f"gt/labels_{i:03d}.sgtn",
        }
        io.write_ppm(out / entry["image"], v.image)
        io.save_camera(out / entry["camera"], v.camera)
        io.write_tensor(out / entry["features"], v.features)
        io.write_tensor(out / entry["masks"], np.moveaxis(v.masks, 0, -1).astype(np.uint32))
        io.write_tensor(out / entry["gt_labels"], v.labels)
        (held if v.heldout else views).append(entry)
    io.write_tensor(out / "gt/points.sgtn", np.hstack([ds.points, ds.point_colors]).astype(np.float32))
    io.write_tensor(out / "gt/point_labels.sgtn", ds.point_labels.astype(np.uint32))
    io.write_tensor(out / "gt/object_features.sgtn", ds.object_features.astype(np.float32))
    io.save_scene(out / "gt/scene.sgsc", ds.gt_scene)
    manifest = {
        "name": f"synthetic_seed{ds.spec.seed}",
        "views": views,
        "heldout_views": held,
        "point_cloud": "gt/points.sgtn",
        "output_dir": "output",
        "object_features": "gt/object_features.sgtn",
        "objects": [{"name": o.name, "shape": o.shape, "center": o.center.tolist(),
                     "size": o.size.tolist()} for o in ds.objects],
        "spec": asdict(ds.spec),
    }
    (out / "manifest.json").write_text(json.dumps(manifest, indent=2))
    return out / "manifest.json"
