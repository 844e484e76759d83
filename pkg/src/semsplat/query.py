"""Open-vocabulary queries on a trained scene: similarity heatmaps, object
lookup, evaluation metrics and a heuristic grasp proposer.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .core import Camera, Scene
from .raster import RenderOutput, render
from .semfeat import pca_project
from .update import cosine_similarity, select_moved_gaussians

ALPHA_FLOOR = 0.05
IOU_THRESHOLD = 0.6
PSNR_CAP = 100.0


@dataclass
class QueryEmbedding:
    """A raw C-dim query vector and its projection into the scene's feature space."""

    raw: np.ndarray
    compressed: np.ndarray

    @classmethod
    def from_raw(cls, raw, scene_or_pca) -> "QueryEmbedding":
        pca = scene_or_pca.pca if isinstance(scene_or_pca, Scene) else scene_or_pca
        raw = np.asarray(raw, dtype=np.float64).reshape(-1)
        compressed = to_feature_space(pca, raw)
        if not np.any(compressed):
            raise ValueError("query projects to the zero vector")
        return cls(raw, compressed)


def to_feature_space(pca, raw) -> np.ndarray:
    """Map a raw embedding into the space the Gaussian features live in.

    Kept as the single place where that choice is made: queries go through the
    same PCA projection as the training targets.
    """
    return pca_project(pca, raw)


def heatmap(scene: Scene, camera: Camera, query: QueryEmbedding, *,
            rendered: RenderOutput | None = None, alpha_floor: float = ALPHA_FLOOR) -> np.ndarray:
    """Per-pixel cosine similarity to the query mapped to [0, 1]; 0 where alpha < ``alpha_floor``."""
    out = rendered if rendered is not None else render(scene, camera)
    feat = out.feature.astype(np.float64)
    cos = cosine_similarity(feat.reshape(-1, feat.shape[-1]), query.compressed).reshape(feat.shape[:2])
    heat = (np.clip(cos, -1.0, 1.0) + 1.0) / 2.0
    heat[out.alpha < alpha_floor] = 0.0
    return heat.astype(np.float32)


def locate_object(scene: Scene, query: QueryEmbedding, sim_threshold: float = 0.85):
    """Indices of the best-matching connected object and its opacity-weighted centroid."""
    idx = select_moved_gaussians(scene, query.compressed, sim_threshold)
    w = scene.opacities[idx].astype(np.float64)
    centroid = (scene.positions[idx].astype(np.float64) * w[:, None]).sum(axis=0) / w.sum()
    return idx, centroid


def mask_iou(pred, gt) -> float:
    pred = np.asarray(pred, dtype=bool)
    gt = np.asarray(gt, dtype=bool)
    union = np.logical_or(pred, gt).sum()
    if union == 0:
        return 1.0
    return float(np.logical_and(pred, gt).sum() / union)


def iou_2d(heat, threshold: float = IOU_THRESHOLD, gt_mask=None) -> float:
    """IoU of ``heat > threshold`` with ``gt_mask``; an empty union counts as 1."""
    if gt_mask is None:
        raise ValueError("iou_2d needs a ground-truth mask")
    heat = np.asarray(heat)
    gt_mask = np.asarray(gt_mask, dtype=bool)
    if heat.shape != gt_mask.shape:
        raise ValueError(f"heatmap {heat.shape} and mask {gt_mask.shape} differ in shape")
    return mask_iou(heat > threshold, gt_mask)


def psnr(a, b, cap: float = PSNR_CAP) -> float:
    """10 log10(1 / MSE) for images in [0, 1], capped at ``cap`` dB."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise ValueError(f"image shapes differ: {a.shape} vs {b.shape}")
    mse = float(np.mean((a - b) ** 2))
    if mse <= 10.0 ** (-cap / 10.0):
        return cap
    return float(10.0 * np.log10(1.0 / mse))


@dataclass
class GraspPose:
    """Parallel-jaw grasp. Rotation columns: approach, closing, and their cross product."""

    rotation: np.ndarray
    translation: np.ndarray
    width: float
    score: float
    fallback: bool = False

    def to_dict(self) -> dict:
        return {"rotation": self.rotation.tolist(), "translation": self.translation.tolist(),
                "width": self.width, "score": self.score, "fallback": self.fallback}


GRAVITY_APPROACH = np.array([0.0, 0.0, -1.0])


def _frame(approach, closing) -> np.ndarray:
    approach = approach / np.linalg.norm(approach)
    closing = closing - approach * (closing @ approach)
    closing = closing / np.linalg.norm(closing)
    return np.column_stack([approach, closing, np.cross(approach, closing)])


def principal_axes(points, weights=None):
    """Weighted centroid, axes as columns sorted by decreasing variance, and the variances."""
    pts = np.asarray(points, dtype=np.float64)
    w = np.ones(len(pts)) if weights is None else np.asarray(weights, dtype=np.float64)
    c = (pts * w[:, None]).sum(axis=0) / w.sum()
    d = pts - c
    cov = (d * w[:, None]).T @ d / w.sum()
    evals, evecs = np.linalg.eigh(0.5 * (cov + cov.T))
    order = np.argsort(evals)[::-1]
    return c, evecs[:, order], np.clip(evals[order], 0, None)


def propose_grasp(scene: Scene, selected, top: int = 10, n_candidates: int = 12) -> list[GraspPose]:
    """Antipodal grasps closing perpendicular to the object's longest axis.

    Candidate closing directions sweep the plane orthogonal to the longest
    principal axis; the approach is straight down, made orthogonal to the
    closing direction. Width is 1.2x the object's extent along the closing
    direction and the score is its inverse. Degenerate (collinear or single
    point) selections get one canonical downward grasp flagged as fallback.
    """
    selected = np.asarray(selected, dtype=np.int64)
    if len(selected) == 0:
        raise ValueError("grasp proposal needs a non-empty selection")
    pts = scene.positions[selected].astype(np.float64)
    w = scene.opacities[selected].astype(np.float64)
    if w.sum() <= 0:
        w = np.ones(len(pts))
    c, axes, var = principal_axes(pts, w)
    if len(pts) < 3 or var[1] <= 1e-12 * max(var[0], 1e-30):
        size = 2.0 * float(np.max(scene.scales[selected])) if len(pts) == 1 else float(np.ptp(pts @ axes[:, 0]))
        width = 1.2 * max(size, 1e-6)
        R = _frame(GRAVITY_APPROACH, np.array([1.0, 0.0, 0.0]))
        return [GraspPose(R, c, width, 1.0 / width, fallback=True)]
    longest = axes[:, 0]
    poses = []
    for theta in np.arange(n_candidates) * np.pi / n_candidates:
        closing = np.cos(theta) * axes[:, 1] + np.sin(theta) * axes[:, 2]
        approach = GRAVITY_APPROACH - closing * (GRAVITY_APPROACH @ closing)
        if np.linalg.norm(approach) < 1e-6:
            approach = np.cross(longest, closing)
        extent = float(np.ptp(pts @ closing))
        width = 1.2 * max(extent, 1e-6)
        poses.append(GraspPose(_frame(approach, closing), c.copy(), width, 1.0 / width))
    poses.sort(key=lambda g: -g.score)
    return poses[:top]
