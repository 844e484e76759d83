"""Joint RGB + semantic optimization of a Gaussian scene."""

from __future__ import annotations

import csv
import json
import logging
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

import numpy as np
from scipy.spatial import cKDTree

from . import io
from .core import (PARAM_FIELDS, Camera, PcaModel, Scene, logit, quat_to_rotation, resample_point_cloud,
                   scene_extent, sigmoid)
from .losses import total_loss
from .raster import Gradients, render, render_backward
from .semfeat import FeatureBundle

log = logging.getLogger(__name__)


class TrainingDiverged(RuntimeError):
    pass


@dataclass
class TrainConfig:
    iterations: int = 7000
    lambda1: float = 0.2
    lambda2: float = 1.0
    densify_interval: int = 200
    densify_until: int | None = None   # last iteration allowed to densify; None = whole run
    densify_grad_threshold: float = 2e-4
    prune_opacity_threshold: float = 0.005
    percent_dense: float = 0.01
    split_scale_divisor: float = 1.6
    max_gaussians: int = 500_000
    lr_position: float = 1.6e-4      # multiplied by the scene extent
    lr_scale: float = 5e-3
    lr_rotation: float = 1e-3
    lr_opacity: float = 5e-2
    lr_color: float = 2.5e-3
    lr_feature: float = 2.5e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-15
    seed: int = 0
    init_opacity: float = 0.1
    target_points: int = 100_000
    alpha_from_rgb_only: bool = True
    shuffle_views: bool = False
    checkpoint_every: int = 0
    checkpoint_dir: str | None = None

    def __post_init__(self):
        if not 0.0 <= self.lambda1 <= 1.0:
            raise ValueError("lambda1 must lie in [0, 1]")
        for f in fields(self):
            if f.name.startswith("lr_") and not getattr(self, f.name) > 0:
                raise ValueError(f"{f.name} must be positive")
        if self.iterations < 0:
            raise ValueError("iterations must be non-negative")

    def learning_rates(self, extent: float) -> dict[str, float]:
        return {
            "positions": self.lr_position * extent,
            "log_scales": self.lr_scale,
            "quats": self.lr_rotation,
            "opacity_logits": self.lr_opacity,
            "colors": self.lr_color,
            "features": self.lr_feature,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ValueError(f"unknown config keys: {sorted(unknown)}")
        return cls(**d)

    @classmethod
    def from_file(cls, path) -> "TrainConfig":
        return cls.from_dict(json.loads(Path(path).read_text()))


@dataclass
class TrainState:
    scene: Scene
    extent: float
    exp_avg: dict[str, np.ndarray] = field(default_factory=dict)
    exp_avg_sq: dict[str, np.ndarray] = field(default_factory=dict)
    step: int = 0
    grad_accum: np.ndarray | None = None
    grad_count: np.ndarray | None = None
    history: list[tuple] = field(default_factory=list)

    def __post_init__(self):
        n = len(self.scene)
        for name in PARAM_FIELDS:
            if name not in self.exp_avg:
                arr = getattr(self.scene, name)
                self.exp_avg[name] = np.zeros_like(arr)
                self.exp_avg_sq[name] = np.zeros_like(arr)
        if self.grad_accum is None:
            self.grad_accum = np.zeros(n)
            self.grad_count = np.zeros(n)


def adam_step(state: TrainState, grads: Gradients | dict, config: TrainConfig) -> Scene:
    """One bias-corrected Adam update of every parameter group.

    Rows whose gradient is exactly zero (Gaussians that received no gradient
    this step) keep their values; their moments still decay. Quaternions are
    re-normalized and colours clamped to [0, 1] afterwards.
    """
    g = grads.as_dict() if isinstance(grads, Gradients) else grads
    state.step += 1
    t = state.step
    b1, b2 = config.beta1, config.beta2
    bc1 = 1 - b1**t
    bc2 = 1 - b2**t
    lrs = config.learning_rates(state.extent)
    scene = state.scene
    for name in PARAM_FIELDS:
        p = getattr(scene, name)
        grad = g[name].astype(p.dtype, copy=False)
        m = state.exp_avg[name]
        v = state.exp_avg_sq[name]
        m *= b1
        m += (1 - b1) * grad
        v *= b2
        v += (1 - b2) * grad * grad
        update = lrs[name] * (m / bc1) / (np.sqrt(v / bc2) + config.eps)
        active = np.any(grad.reshape(len(grad), -1) != 0, axis=1)
        if grad.ndim > 1:
            active = active[:, None]
        p -= np.where(active, update, 0).astype(p.dtype)
    scene.quats /= np.linalg.norm(scene.quats, axis=1, keepdims=True)
    np.clip(scene.colors, 0.0, 1.0, out=scene.colors)
    return scene


def _append_rows(state: TrainState, new: dict[str, np.ndarray]) -> None:
    scene = state.scene
    for name in PARAM_FIELDS:
        setattr(scene, name, np.concatenate([getattr(scene, name), new[name]]))
        extra = np.zeros_like(new[name])
        state.exp_avg[name] = np.concatenate([state.exp_avg[name], extra])
        state.exp_avg_sq[name] = np.concatenate([state.exp_avg_sq[name], extra])


def _keep_rows(state: TrainState, keep: np.ndarray) -> None:
    scene = state.scene
    for name in PARAM_FIELDS:
        setattr(scene, name, getattr(scene, name)[keep])
        state.exp_avg[name] = state.exp_avg[name][keep]
        state.exp_avg_sq[name] = state.exp_avg_sq[name][keep]


def densify_and_prune(state: TrainState, config: TrainConfig, rng: np.random.Generator) -> Scene:
    """Clone small / split large high-gradient Gaussians, then prune transparent ones.

    Clones share the original opacity so that the pair composites like the
    original (each gets ``1 - sqrt(1 - alpha)``); split children get their
    positions sampled from the parent Gaussian and scales divided by
    ``split_scale_divisor``. New rows start with zero Adam moments.
    """
    scene = state.scene
    n = len(scene)
    with np.errstate(invalid="ignore", divide="ignore"):
        mean_grad = np.where(state.grad_count > 0, state.grad_accum / np.maximum(state.grad_count, 1), 0.0)
    high = mean_grad > config.densify_grad_threshold
    max_scale = scene.scales.max(axis=1)
    limit = config.percent_dense * state.extent
    clone = high & (max_scale <= limit)
    split = high & (max_scale > limit)
    n_new = int(clone.sum() + split.sum())
    if n + n_new > config.max_gaussians:
        log.warning("Gaussian cap %d reached; skipping densification", config.max_gaussians)
        clone[:] = False
        split[:] = False

    if clone.any():
        alpha = sigmoid(scene.opacity_logits[clone].astype(np.float64))
        shared = logit(np.clip(1 - np.sqrt(1 - alpha), 1e-6, 1 - 1e-6)).astype(scene.dtype)
        scene.opacity_logits[clone] = shared
        new = {name: getattr(scene, name)[clone].copy() for name in PARAM_FIELDS}
        _append_rows(state, new)
    if split.any():
        split_full = np.concatenate([split, np.zeros(len(state.scene) - n, dtype=bool)])
        scene = state.scene
        idx = np.nonzero(split_full)[0]
        R = quat_to_rotation(scene.quats[idx].astype(np.float64))
        s = scene.scales[idx].astype(np.float64)
        children = {name: np.repeat(getattr(scene, name)[idx], 2, axis=0) for name in PARAM_FIELDS}
        offsets = rng.normal(size=(len(idx) * 2, 3)) * np.repeat(s, 2, axis=0)
        offsets = np.einsum("nij,nj->ni", np.repeat(R, 2, axis=0), offsets)
        children["positions"] = (children["positions"] + offsets).astype(scene.dtype)
        children["log_scales"] = np.log(np.repeat(s, 2, axis=0) / config.split_scale_divisor).astype(scene.dtype)
        _append_rows(state, children)
        keep = np.ones(len(state.scene), dtype=bool)
        keep[idx] = False
        _keep_rows(state, keep)

    keep = state.scene.opacities >= config.prune_opacity_threshold
    if not keep.all():
        _keep_rows(state, keep)
    state.grad_accum = np.zeros(len(state.scene))
    state.grad_count = np.zeros(len(state.scene))
    return state.scene


def init_scene(points, colors, camera0: Camera, target0, config: TrainConfig,
               pca: PcaModel | None = None) -> tuple[Scene, float]:
    """One isotropic Gaussian per (resampled) point.

    Scale is the mean distance to the three nearest neighbours; each Gaussian's
    feature is the compressed target at its projection in view 0.
    """
    points, colors = resample_point_cloud(points, colors, config.target_points)
    extent = scene_extent(points)
    n = len(points)
    if n > 1:
        kq = min(4, n)
        d, _ = cKDTree(points).query(points, k=kq)
        dist = d[:, 1:].mean(axis=1)
    else:
        dist = np.full(1, max(extent, 1e-3) * 0.01)
    dist = np.maximum(dist, 1e-7)
    k = target0.shape[-1] if target0 is not None else (pca.components if pca is not None else 1)
    feats = np.zeros((n, k), dtype=np.float32)
    if target0 is not None:
        uv = camera0.project_points(points)
        z = camera0.to_camera(points)[:, 2]
        col = np.rint(uv[:, 0]).astype(np.int64)
        row = np.rint(uv[:, 1]).astype(np.int64)
        inside = (z > 0) & (col >= 0) & (col < camera0.width) & (row >= 0) & (row < camera0.height)
        feats[inside] = target0[row[inside], col[inside]]
    scene = Scene.from_points(points, np.clip(colors, 0, 1), scales=dist, opacity=config.init_opacity,
                              features=feats, pca=pca or PcaModel.identity(k), dtype=np.float32)
    scene.metadata = {"config": asdict(config), "extent": extent}
    return scene, extent


def train(points, colors, images, cameras, bundle: FeatureBundle | None, config: TrainConfig,
          *, callback=None, return_state: bool = False):
    """Initialize from a coloured point cloud and optimize against the training views.

    ``images`` are (H, W, 3) float arrays in [0, 1], one per camera. Views are
    visited round-robin. Returns the final scene (and the :class:`TrainState`
    when ``return_state``).
    """
    if len(images) == 0 or len(images) != len(cameras):
        raise ValueError("need at least one view and one camera per image")
    rng = np.random.default_rng(config.seed)
    targets = bundle.target_maps() if bundle is not None else [(None, None)] * len(images)
    pca = bundle.pca if bundle is not None else None
    scene, extent = init_scene(points, colors, cameras[0], targets[0][0], config, pca)
    state = TrainState(scene, extent)
    images = [np.asarray(im, dtype=np.float32) for im in images]
    order = np.arange(len(images))
    ckpt_dir = Path(config.checkpoint_dir) if config.checkpoint_dir else None

    for it in range(config.iterations):
        pos = it % len(images)
        if pos == 0 and config.shuffle_views:
            order = rng.permutation(len(images))
        v = order[pos]
        cam = cameras[v]
        tgt, tmask = targets[v]
        out = render(state.scene, cam, with_features=tgt is not None)
        terms, d_rgb, d_feat = total_loss(out.rgb, images[v], out.feature, tgt, tmask,
                                          lambda1=config.lambda1, lambda2=config.lambda2)
        if not np.isfinite(terms.total):
            _dump(state, ckpt_dir)
            raise TrainingDiverged(f"loss became non-finite at iteration {it}")
        try:
            grads = render_backward(state.scene, cam, d_rgb, d_feat,
                                    alpha_from_rgb_only=config.alpha_from_rgb_only, forward=out)
        except FloatingPointError as exc:
            _dump(state, ckpt_dir)
            raise TrainingDiverged(str(exc)) from exc
        diag = np.hypot(cam.width, cam.height)
        state.grad_accum[grads.visible] += grads.mean2d_norm[grads.visible] * diag / 2
        state.grad_count[grads.visible] += 1
        adam_step(state, grads, config)
        state.history.append((it, terms.l1_rgb, terms.dssim, terms.l1_sem, terms.total, len(state.scene)))
        done = it + 1
        if (done % config.densify_interval == 0 and done < config.iterations
                and (config.densify_until is None or done <= config.densify_until)):
            densify_and_prune(state, config, rng)
        if ckpt_dir is not None and config.checkpoint_every and done % config.checkpoint_every == 0:
            save_checkpoint(state, ckpt_dir, done)
        if callback is not None:
            callback(state, it, terms)

    state.scene.metadata["iterations"] = config.iterations
    return (state.scene, state) if return_state else state.scene


def _dump(state: TrainState, ckpt_dir: Path | None) -> None:
    if ckpt_dir is None:
        return
    io.ensure_dir(ckpt_dir)
    try:
        io.save_scene(ckpt_dir / "diverged.sgsc", state.scene)
    except ValueError:
        np.savez(ckpt_dir / "diverged.npz", **state.scene.params())
    write_loss_csv(ckpt_dir / "diverged_loss.csv", state.history)


def save_checkpoint(state: TrainState, ckpt_dir, iteration: int) -> None:
    ckpt_dir = io.ensure_dir(ckpt_dir)
    io.save_scene(ckpt_dir / f"scene_{iteration:06d}.sgsc", state.scene)
    write_loss_csv(ckpt_dir / "loss.csv", state.history)


def write_loss_csv(path, history) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["iteration", "l1_rgb", "dssim", "l_sem", "total", "gaussian_count"])
        for row in history:
            w.writerow([row[0], *(f"{v:.8g}" for v in row[1:5]), row[5]])
