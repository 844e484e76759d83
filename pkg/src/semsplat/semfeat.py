"""Per-view semantic supervision: upsample patch features, resolve overlapping
masks (smaller masks win), average features per mask and compress them with a
PCA model fitted jointly over all views.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .core import PcaModel


def upsample_nearest(feature_map, height: int, width: int) -> np.ndarray:
    """Nearest-neighbour upsampling: output (y, x) copies source (floor(y*h/H), floor(x*w/W))."""
    feature_map = np.asarray(feature_map)
    if feature_map.ndim == 2:
        feature_map = feature_map[..., None]
    h, w = feature_map.shape[:2]
    if h == 0 or w == 0 or feature_map.shape[2] == 0:
        raise ValueError("empty feature map")
    if h > height or w > width:
        raise ValueError(f"cannot upsample {h}x{w} to smaller {height}x{width}")
    rows = (np.arange(height) * h) // height
    cols = (np.arange(width) * w) // width
    return feature_map[rows[:, None], cols[None, :]]


def mask_areas(masks) -> np.ndarray:
    masks = np.asarray(masks, dtype=bool)
    return masks.reshape(len(masks), -1).sum(axis=1)


def resolve_mask_overlaps(masks) -> np.ndarray:
    """Label map from possibly overlapping binary masks of shape (M, H, W).

    Masks are ordered by area (ties keep the original order) and each pixel
    takes ``1 + rank`` of the first mask covering it, so smaller masks win
    overlaps. Uncovered pixels are 0. Label ``n`` refers to the ``n``-th
    smallest mask; see :func:`sorted_mask_order`.
    """
    masks = np.asarray(masks, dtype=bool)
    if masks.ndim != 3 or len(masks) == 0:
        raise ValueError("expected a non-empty (M, H, W) mask stack")
    order = sorted_mask_order(masks)
    stacked = masks[order]
    covered = stacked.any(axis=0)
    first = np.argmax(stacked, axis=0)
    return np.where(covered, first + 1, 0).astype(np.uint32)


def sorted_mask_order(masks) -> np.ndarray:
    """Indices of ``masks`` sorted by ascending area, stable on ties."""
    return np.argsort(mask_areas(masks), kind="stable")


def average_features_per_mask(features, labels, num_labels: int | None = None) -> np.ndarray:
    """Row ``n - 1`` is the mean feature over pixels labelled ``n``; absent labels give zero rows."""
    features = np.asarray(features)
    labels = np.asarray(labels).astype(np.int64)
    C = features.shape[-1]
    if num_labels is None:
        num_labels = int(labels.max()) if labels.size else 0
    if labels.size and labels.max() > num_labels:
        raise ValueError("label exceeds num_labels")
    flat_l = labels.ravel()
    flat_f = features.reshape(-1, C).astype(np.float64)
    keep = flat_l > 0
    counts = np.bincount(flat_l[keep] - 1, minlength=num_labels).astype(np.float64)
    sums = np.zeros((num_labels, C))
    np.add.at(sums, flat_l[keep] - 1, flat_f[keep])
    out = np.divide(sums, counts[:, None], out=np.zeros_like(sums), where=counts[:, None] > 0)
    return out.astype(features.dtype if np.issubdtype(features.dtype, np.floating) else np.float64)


def _canonical_signs(basis: np.ndarray) -> np.ndarray:
    idx = np.argmax(np.abs(basis), axis=1)
    signs = np.sign(basis[np.arange(len(basis)), idx])
    signs[signs == 0] = 1
    return basis * signs[:, None]


def pca_fit(rows, k: int) -> PcaModel:
    """Fit a ``k``-component PCA via eigendecomposition of the covariance.

    Components are ordered by decreasing variance and each row's
    largest-magnitude entry is made positive.
    """
    X = np.asarray(rows, dtype=np.float64)
    if X.ndim != 2:
        raise ValueError("pca_fit expects a 2-D row matrix")
    n, C = X.shape
    if k < 1 or k > min(n, C):
        raise ValueError(f"k={k} must lie in [1, min(N={n}, C={C})]")
    mean = X.mean(axis=0)
    Xc = X - mean
    cov = Xc.T @ Xc
    cov = 0.5 * (cov + cov.T)
    evals, evecs = np.linalg.eigh(cov)
    order = np.argsort(evals)[::-1][:k]
    basis = _canonical_signs(evecs[:, order].T)
    variance = np.clip(evals[order], 0, None) / max(n - 1, 1)
    return PcaModel(mean, basis, variance)


def pca_project(model: PcaModel, rows) -> np.ndarray:
    rows = np.asarray(rows)
    if rows.shape[-1] != model.input_dim:
        raise ValueError(f"expected {model.input_dim}-dim rows, got {rows.shape[-1]}")
    return (rows.astype(np.float64) - model.mean) @ model.basis.T.astype(np.float64)


def pca_unproject(model: PcaModel, rows) -> np.ndarray:
    rows = np.asarray(rows)
    if rows.shape[-1] != model.components:
        raise ValueError(f"expected {model.components}-dim rows, got {rows.shape[-1]}")
    return rows.astype(np.float64) @ model.basis.astype(np.float64) + model.mean


def reconstruction_error(model: PcaModel, rows) -> float:
    """Squared Frobenius error of project/unproject on ``rows``."""
    rows = np.asarray(rows, dtype=np.float64)
    mean = model.mean.astype(np.float64)
    B = model.basis.astype(np.float64)
    Xc = rows - mean
    return float(np.sum((Xc - Xc @ B.T @ B) ** 2))


@dataclass
class ViewFeatures:
    """Supervision data for one view."""

    labels: np.ndarray                  # (H, W) u32, 0 = unlabeled
    mask_features: np.ndarray           # (N, C) per-mask averages, F^sem
    mask_order: np.ndarray              # original mask index for each label - 1
    compressed: np.ndarray | None = None  # (N, k)

    @property
    def present(self) -> np.ndarray:
        """Labels (1-based) that survived overlap resolution."""
        return np.unique(self.labels[self.labels > 0])

    def target_map(self) -> tuple[np.ndarray, np.ndarray]:
        return build_target_map(self.labels, self.compressed)


@dataclass
class FeatureBundle:
    views: list[ViewFeatures]
    pca: PcaModel
    fit_rows: np.ndarray = field(repr=False, default=None)

    def target_maps(self) -> list[tuple[np.ndarray, np.ndarray]]:
        return [v.target_map() for v in self.views]


def build_target_map(labels, compressed) -> tuple[np.ndarray, np.ndarray]:
    """Per-pixel compressed targets and the supervision mask (False on label 0)."""
    labels = np.asarray(labels).astype(np.int64)
    compressed = np.asarray(compressed, dtype=np.float32)
    table = np.vstack([np.zeros((1, compressed.shape[1]), dtype=np.float32), compressed])
    return table[labels], labels > 0


def view_features(features, masks) -> ViewFeatures:
    """Resolve masks and average (already full-resolution) features for one view."""
    masks = np.asarray(masks, dtype=bool)
    if np.any(mask_areas(masks) == 0):
        raise ValueError("empty mask in mask set")
    features = np.asarray(features)
    if features.shape[:2] != masks.shape[1:]:
        raise ValueError(f"feature map {features.shape[:2]} does not match masks {masks.shape[1:]}")
    labels = resolve_mask_overlaps(masks)
    averaged = average_features_per_mask(features, labels, num_labels=len(masks))
    return ViewFeatures(labels, averaged, sorted_mask_order(masks))


def build_feature_bundle(feature_maps, mask_sets, k: int) -> FeatureBundle:
    """Full pipeline over all views: upsample, resolve, average, fit PCA, compress.

    Feature maps smaller than the masks are upsampled first. The PCA is fitted
    on the per-mask averages of every view together; masks that lost all their
    pixels to smaller masks are left out of the fit.
    """
    views = []
    rows = []
    for fmap, masks in zip(feature_maps, mask_sets, strict=True):
        masks = np.asarray(masks, dtype=bool)
        H, W = masks.shape[1:]
        fmap = np.asarray(fmap)
        if fmap.shape[:2] != (H, W):
            fmap = upsample_nearest(fmap, H, W)
        v = view_features(fmap, masks)
        views.append(v)
        rows.append(v.mask_features[v.present - 1])
    stacked = np.vstack(rows)
    pca = pca_fit(stacked, k)
    for v in views:
        v.compressed = pca_project(pca, v.mask_features)
        absent = np.setdiff1d(np.arange(1, len(v.mask_features) + 1), v.present)
        v.compressed[absent - 1] = 0
    return FeatureBundle(views, pca, stacked)


def masks_from_stack(stack) -> np.ndarray:
    """Convert an on-disk (H, W, M) u32 stack into an (M, H, W) boolean stack."""
    stack = np.asarray(stack)
    if stack.ndim == 2:
        stack = stack[..., None]
    return np.moveaxis(stack != 0, -1, 0)
