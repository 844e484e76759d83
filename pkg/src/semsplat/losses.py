"""Photometric and semantic losses with analytic gradients w.r.t. the rendering."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

SSIM_WINDOW = 11
SSIM_SIGMA = 1.5
SSIM_C1 = 0.01**2
SSIM_C2 = 0.03**2


def gaussian_window(size: int = SSIM_WINDOW, sigma: float = SSIM_SIGMA) -> np.ndarray:
    x = np.arange(size) - (size - 1) / 2.0
    g = np.exp(-(x**2) / (2 * sigma**2))
    return g / g.sum()


def loss_l1(a, b, mask=None) -> float:
    """Mean absolute difference; with ``mask`` (H, W) only the masked pixels count."""
    diff = np.abs(np.asarray(a, dtype=np.float64) - np.asarray(b, dtype=np.float64))
    if mask is None:
        return float(diff.mean()) if diff.size else 0.0
    mask = np.asarray(mask, dtype=bool)
    sel = diff[mask]
    return float(sel.mean()) if sel.size else 0.0


def loss_l1_grad(a, b, mask=None) -> np.ndarray:
    a = np.asarray(a)
    d = np.sign(a.astype(np.float64) - np.asarray(b, dtype=np.float64))
    if mask is None:
        return d / max(d.size, 1)
    mask = np.asarray(mask, dtype=bool)
    count = int(mask.sum()) * (d.shape[-1] if d.ndim > mask.ndim else 1)
    d = d * (mask[..., None] if d.ndim > mask.ndim else mask)
    return d / max(count, 1)


def _filter_valid(x: np.ndarray, g: np.ndarray) -> np.ndarray:
    """Separable 'valid' correlation over the first two axes of an (H, W, C) array."""
    rows = sliding_window_view(x, len(g), axis=0) @ g
    return sliding_window_view(rows, len(g), axis=1) @ g


def _filter_valid_adjoint(y: np.ndarray, g: np.ndarray) -> np.ndarray:
    pad = len(g) - 1
    yp = np.pad(y, ((pad, pad), (pad, pad), (0, 0)))
    return _filter_valid(yp, g[::-1].copy())


def _ssim_terms(a, b, g):
    mu_a = _filter_valid(a, g)
    mu_b = _filter_valid(b, g)
    e_aa = _filter_valid(a * a, g)
    e_bb = _filter_valid(b * b, g)
    e_ab = _filter_valid(a * b, g)
    var_a = e_aa - mu_a**2
    var_b = e_bb - mu_b**2
    cov = e_ab - mu_a * mu_b
    n1 = 2 * mu_a * mu_b + SSIM_C1
    n2 = 2 * cov + SSIM_C2
    d1 = mu_a**2 + mu_b**2 + SSIM_C1
    d2 = var_a + var_b + SSIM_C2
    return mu_a, mu_b, n1, n2, d1, d2


def _check_images(a, b):
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise ValueError(f"image shapes differ: {a.shape} vs {b.shape}")
    if a.ndim == 2:
        a, b = a[..., None], b[..., None]
    if a.shape[0] < SSIM_WINDOW or a.shape[1] < SSIM_WINDOW:
        raise ValueError(f"SSIM window {SSIM_WINDOW} is larger than the {a.shape[0]}x{a.shape[1]} image")
    return a, b


def ssim(a, b) -> float:
    """Mean SSIM over valid window positions and channels (11x11 Gaussian, sigma 1.5)."""
    a, b = _check_images(a, b)
    _, _, n1, n2, d1, d2 = _ssim_terms(a, b, gaussian_window())
    return float(np.mean(n1 * n2 / (d1 * d2)))


def d_ssim(a, b) -> float:
    return (1.0 - ssim(a, b)) / 2.0


def d_ssim_grad(a, b) -> tuple[float, np.ndarray]:
    """``(1 - SSIM(a, b)) / 2`` and its gradient w.r.t. ``a``."""
    shape = np.shape(a)
    a, b = _check_images(a, b)
    g = gaussian_window()
    mu_a, mu_b, n1, n2, d1, d2 = _ssim_terms(a, b, g)
    S = n1 * n2 / (d1 * d2)
    count = S.size
    dS_dmu = 2 * mu_b * (n2 - n1) / (d1 * d2) - S * (2 * mu_a / d1 - 2 * mu_a / d2)
    dS_deaa = -S / d2
    dS_deab = 2 * n1 / (d1 * d2)
    grad = (_filter_valid_adjoint(dS_dmu, g)
            + 2 * a * _filter_valid_adjoint(dS_deaa, g)
            + b * _filter_valid_adjoint(dS_deab, g)) / count
    value = (1.0 - float(S.mean())) / 2.0
    return value, (-0.5 * grad).reshape(shape)


@dataclass
class LossTerms:
    l1_rgb: float
    dssim: float
    l1_sem: float
    total: float


def combine_losses(l1_rgb: float, dssim: float, l1_sem: float, lambda1: float = 0.2,
                   lambda2: float = 1.0) -> float:
    """``(1 - lambda1) * L1 + lambda1 * D-SSIM + lambda2 * L_sem``."""
    return (1.0 - lambda1) * l1_rgb + lambda1 * dssim + lambda2 * l1_sem


def total_loss(rgb, gt_rgb, feature, target_feature, target_mask, *, lambda1: float = 0.2,
               lambda2: float = 1.0):
    """Joint reconstruction + semantic loss and upstream gradients.

    Returns ``(LossTerms, d_rgb, d_feature)``. ``d_feature`` comes only from the
    semantic term; label-0 pixels (``target_mask`` False) are not supervised.
    """
    l1 = loss_l1(rgb, gt_rgb)
    ds, g_ds = d_ssim_grad(rgb, gt_rgb)
    d_rgb = (1.0 - lambda1) * loss_l1_grad(rgb, gt_rgb) + lambda1 * g_ds
    if feature is not None and target_feature is not None and feature.shape[-1] > 0:
        sem = loss_l1(feature, target_feature, target_mask)
        d_feat = lambda2 * loss_l1_grad(feature, target_feature, target_mask)
    else:
        sem = 0.0
        d_feat = None
    terms = LossTerms(l1, ds, sem, combine_losses(l1, ds, sem, lambda1, lambda2))
    return terms, d_rgb, d_feat
