"""Fast scene update after an object moved: find the changed pixels, pick the
moved object's Gaussians by feature similarity and fit a rigid transform by
render-and-compare.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np
from scipy import ndimage
from scipy.sparse import coo_matrix
from scipy.sparse.csgraph import connected_components
from scipy.spatial import cKDTree

from .core import Camera, Scene, axis_angle_to_quat, quat_multiply, quat_rotation_backward, quat_to_rotation, scene_extent
from .raster import project, render, render_backward

log = logging.getLogger(__name__)


class ObjectNotIdentified(ValueError):
    pass


class UpdateFailed(RuntimeError):
    pass


@dataclass
class ChangeDetection:
    """Changed pixels in one view.

    ``centroid`` is (u, v) = (column, row) in pixels; it and ``mean_feature``
    are None when nothing changed.
    """

    mask: np.ndarray
    centroid: np.ndarray | None = None
    mean_feature: np.ndarray | None = None

    @property
    def changed(self) -> bool:
        return self.centroid is not None

    @property
    def area(self) -> int:
        return int(self.mask.sum())


@dataclass
class RigidUpdate:
    """Rigid motion of a Gaussian subset: ``p -> R (p - pivot) + pivot + translation``."""

    translation: np.ndarray
    axis_angle: np.ndarray
    pivot: np.ndarray
    selected: np.ndarray
    final_loss: float | None = None
    initial_loss: float | None = None
    steps: int = 0
    history: list = field(default_factory=list, repr=False)

    def __post_init__(self):
        self.translation = np.asarray(self.translation, dtype=np.float64).reshape(3)
        self.axis_angle = np.asarray(self.axis_angle, dtype=np.float64).reshape(3)
        self.pivot = np.asarray(self.pivot, dtype=np.float64).reshape(3)
        self.selected = np.unique(np.asarray(self.selected, dtype=np.int64))
        if len(self.selected) == 0:
            raise ValueError("rigid update needs a non-empty selection")
        if np.linalg.norm(self.axis_angle) >= np.pi:
            raise ValueError("rotation angle must be below pi")

    @classmethod
    def identity(cls, scene: Scene, selected) -> "RigidUpdate":
        selected = np.asarray(selected, dtype=np.int64)
        return cls(np.zeros(3), np.zeros(3), selection_pivot(scene, selected), selected)

    @property
    def rotation(self) -> np.ndarray:
        return quat_to_rotation(axis_angle_to_quat(self.axis_angle))

    @property
    def angle_deg(self) -> float:
        return float(np.degrees(np.linalg.norm(self.axis_angle)))

    def inverse(self) -> "RigidUpdate":
        return RigidUpdate(-self.translation, -self.axis_angle, self.pivot + self.translation, self.selected)

    def to_dict(self) -> dict:
        return {
            "translation": self.translation.tolist(),
            "axis_angle": self.axis_angle.tolist(),
            "pivot": self.pivot.tolist(),
            "selected_count": int(len(self.selected)),
            "final_loss": self.final_loss,
            "initial_loss": self.initial_loss,
            "steps": self.steps,
        }


@dataclass
class UpdateConfig:
    change_threshold: float = 0.1
    sim_threshold: float = 0.85
    lambda3: float = 0.1
    lr_translation: float = 0.01      # multiplied by the scene extent
    lr_rotation: float = 0.01
    lr_final_factor: float = 0.1      # exponential decay reaches this factor at max_steps
    max_steps: int = 500
    plateau_window: int = 20
    plateau_tol: float = 1e-5
    use_photometric: bool = True
    use_centroid: bool = True

    @classmethod
    def from_dict(cls, d: dict) -> "UpdateConfig":
        unknown = set(d) - set(cls.__dataclass_fields__)
        if unknown:
            raise ValueError(f"unknown update config keys: {sorted(unknown)}")
        return cls(**d)


# change detection ----------------------------------------------------------

_OPEN = np.ones((3, 3), dtype=bool)


def change_mask(before, after, threshold: float = 0.1) -> np.ndarray:
    """Per-pixel L1 colour difference above ``threshold``, opened with a 3x3 square."""
    before = np.asarray(before, dtype=np.float64)
    after = np.asarray(after, dtype=np.float64)
    if before.shape != after.shape:
        raise ValueError(f"frame shapes differ: {before.shape} vs {after.shape}")
    diff = np.abs(before - after)
    if diff.ndim == 3:
        diff = diff.sum(axis=-1)
    return ndimage.binary_opening(diff > threshold, structure=_OPEN)


def largest_component(mask) -> np.ndarray:
    """Largest 8-connected component; ties go to the component found first in raster order."""
    labels, n = ndimage.label(mask, structure=np.ones((3, 3)))
    if n == 0:
        return np.zeros_like(mask, dtype=bool)
    sizes = np.bincount(labels.ravel())[1:]
    return labels == (int(np.argmax(sizes)) + 1)


def pixel_centroid(mask, weights=None) -> np.ndarray:
    """(u, v) centroid of a mask or a weight image."""
    w = np.asarray(mask, dtype=np.float64) if weights is None else np.asarray(weights, dtype=np.float64) * mask
    total = w.sum()
    if total <= 0:
        raise ValueError("empty mask has no centroid")
    rows, cols = np.indices(w.shape)
    return np.array([(w * cols).sum() / total, (w * rows).sum() / total])


def detect_changes(rendered_initial, current, threshold: float = 0.1, features=None,
                   background=None) -> list[ChangeDetection]:
    """Frame differencing between the rendered initial scene and the current frames.

    The change mask of each view is the largest connected component of the
    opened difference mask; ``features`` (rendered H x W x k maps) give the
    mean feature over it. With ``background`` (renders of the scene without
    the moved object) the centroid is taken from the component of
    ``current`` versus ``background`` instead, which is the object's new
    silhouette rather than the union of old and new.
    """
    rendered_initial = list(rendered_initial)
    current = list(current)
    if len(rendered_initial) == 0 or len(rendered_initial) != len(current):
        raise ValueError("need one current frame per rendered view")
    out = []
    for v, (before, after) in enumerate(zip(rendered_initial, current)):
        comp = largest_component(change_mask(before, after, threshold))
        if not comp.any():
            out.append(ChangeDetection(comp))
            continue
        region = comp
        if background is not None:
            fg = largest_component(change_mask(background[v], after, threshold))
            if fg.any():
                region = fg
        mean_feature = None
        if features is not None:
            f = np.asarray(features[v], dtype=np.float64)
            mean_feature = f[comp].mean(axis=0)
        out.append(ChangeDetection(comp, pixel_centroid(region), mean_feature))
    return out


def any_change(detections) -> bool:
    return any(d.changed for d in detections)


def pooled_feature(detections) -> np.ndarray:
    """Area-weighted mean of the per-view mean features."""
    num, den = None, 0
    for d in detections:
        if d.changed and d.mean_feature is not None:
            contrib = d.mean_feature * d.area
            num = contrib if num is None else num + contrib
            den += d.area
    if num is None:
        raise ObjectNotIdentified("no changed pixels to take a feature from")
    return num / den


# selection -----------------------------------------------------------------

def cosine_similarity(features, query) -> np.ndarray:
    features = np.asarray(features, dtype=np.float64)
    query = np.asarray(query, dtype=np.float64)
    qn = np.linalg.norm(query)
    if qn == 0:
        raise ValueError("query feature is zero")
    norms = np.linalg.norm(features, axis=-1)
    with np.errstate(invalid="ignore", divide="ignore"):
        cos = (features @ query) / (norms * qn)
    return np.where(norms > 0, cos, -1.0)


def largest_cluster(points, candidates) -> np.ndarray:
    """Largest connected cluster among ``candidates`` (indices into ``points``).

    Two points are linked when closer than 3x the median nearest-neighbour
    distance of the candidates. Ties are broken by the smallest member index.
    """
    candidates = np.asarray(candidates, dtype=np.int64)
    if len(candidates) <= 1:
        return candidates
    pts = np.asarray(points, dtype=np.float64)[candidates]
    tree = cKDTree(pts)
    d, _ = tree.query(pts, k=2)
    radius = 3.0 * np.median(d[:, 1])
    pairs = tree.query_pairs(radius, output_type="ndarray")
    n = len(candidates)
    graph = coo_matrix((np.ones(len(pairs)), (pairs[:, 0], pairs[:, 1])), shape=(n, n))
    ncomp, comp = connected_components(graph, directed=False)
    sizes = np.bincount(comp, minlength=ncomp)
    first = np.full(ncomp, np.iinfo(np.int64).max)
    np.minimum.at(first, comp, candidates)
    best = np.lexsort((first, -sizes))[0]
    return np.sort(candidates[comp == best])


def select_moved_gaussians(scene: Scene, mean_feature, sim_threshold: float = 0.85) -> np.ndarray:
    """Gaussians whose feature has cosine > ``sim_threshold`` with ``mean_feature``,
    reduced to the largest spatially connected cluster."""
    cos = cosine_similarity(scene.features, mean_feature)
    candidates = np.flatnonzero(cos > sim_threshold)
    if len(candidates) == 0:
        raise ObjectNotIdentified("object not identified")
    return largest_cluster(scene.positions, candidates)


def selection_pivot(scene: Scene, selected) -> np.ndarray:
    return np.asarray(scene.positions[np.asarray(selected)], dtype=np.float64).mean(axis=0)


# transform -----------------------------------------------------------------

def _transformed(scene: Scene, selected, translation, axis_angle, pivot):
    p = scene.positions[selected].astype(np.float64)
    R = quat_to_rotation(axis_angle_to_quat(axis_angle))
    new_pos = (p - pivot) @ R.T + pivot + translation
    q_r = axis_angle_to_quat(axis_angle)
    new_q = quat_multiply(q_r, scene.quats[selected].astype(np.float64))
    new_q /= np.linalg.norm(new_q, axis=-1, keepdims=True)
    return new_pos, new_q


def apply_update(scene: Scene, update: RigidUpdate) -> Scene:
    """Move the selected Gaussians; everything else, and every non-pose field, is untouched."""
    sel = update.selected
    if sel.max() >= len(scene):
        raise IndexError("selection refers to Gaussians outside the scene")
    positions = scene.positions.copy()
    quats = scene.quats.copy()
    moved = np.any(update.translation != 0)
    if np.any(update.axis_angle != 0):
        new_pos, new_q = _transformed(scene, sel, update.translation, update.axis_angle, update.pivot)
        positions[sel] = new_pos.astype(scene.dtype)
        quats[sel] = new_q.astype(scene.dtype)
    elif moved:
        positions[sel] = (scene.positions[sel].astype(np.float64) + update.translation).astype(scene.dtype)
    return scene.replace(positions=positions, quats=quats)


def _axis_angle_quat_jacobian(r) -> np.ndarray:
    """d quat / d axis-angle, shape (4, 3)."""
    r = np.asarray(r, dtype=np.float64)
    theta = np.linalg.norm(r)
    J = np.zeros((4, 3))
    if theta < 1e-6:
        J[0] = -r / 4
        J[1:] = 0.5 * np.eye(3) - np.outer(r, r) / 24
        return J
    half = theta / 2
    s = np.sin(half) / theta
    ds = (half * np.cos(half) - np.sin(half)) / theta**2
    J[0] = -0.5 * np.sin(half) * r / theta
    J[1:] = s * np.eye(3) + np.outer(r, r) * ds / theta
    return J


def _right_mult_matrix(b) -> np.ndarray:
    """Matrices ``M`` with ``quat_multiply(a, b) = M @ a`` for a stack of ``b``."""
    w, x, y, z = np.moveaxis(np.asarray(b, dtype=np.float64), -1, 0)
    return np.stack([
        np.stack([w, -x, -y, -z], -1),
        np.stack([x, w, z, -y], -1),
        np.stack([y, -z, w, x], -1),
        np.stack([z, y, -x, w], -1),
    ], axis=-2)


def pose_gradient(scene: Scene, selected, axis_angle, pivot, d_positions, d_quats):
    """Chain per-Gaussian position/quaternion gradients of the moved scene to
    the 6 transform parameters. Returns ``(d_translation, d_axis_angle)``.

    ``d_quats`` is the gradient w.r.t. the moved (normalized) quaternions.
    """
    p = scene.positions[selected].astype(np.float64)
    g_pos = np.asarray(d_positions, dtype=np.float64)
    d_t = g_pos.sum(axis=0)
    q_r = axis_angle_to_quat(axis_angle)
    dR = g_pos.T @ (p - pivot)
    d_qr = quat_rotation_backward(q_r, dR)
    q = scene.quats[selected].astype(np.float64)
    raw = quat_multiply(q_r, q)
    norm = np.linalg.norm(raw, axis=-1, keepdims=True)
    qn = raw / norm
    g_q = np.asarray(d_quats, dtype=np.float64)
    g_raw = (g_q - qn * np.sum(qn * g_q, axis=-1, keepdims=True)) / norm
    d_qr = d_qr + np.einsum("nij,ni->j", _right_mult_matrix(q), g_raw)
    d_r = _axis_angle_quat_jacobian(axis_angle).T @ d_qr
    return d_t, d_r


# render-and-compare ------------------------------------------------------------

def _centroid_and_grad(alpha):
    """Alpha-weighted (u, v) centroid and its Jacobian w.r.t. every alpha pixel, shape (2, H, W)."""
    a = np.asarray(alpha, dtype=np.float64)
    total = a.sum()
    if total <= 1e-8:
        return None, None, total
    rows, cols = np.indices(a.shape)
    c = np.array([(a * cols).sum() / total, (a * rows).sum() / total])
    jac = np.stack([(cols - c[0]) / total, (rows - c[1]) / total])
    return c, jac, total


def projected_center(scene: Scene, update: RigidUpdate, camera: Camera) -> np.ndarray | None:
    """Alpha-weighted pixel centroid of the moved selection rendered alone (None if invisible)."""
    moved = apply_update(scene, update)
    out = render(moved, camera, selected=update.selected, with_features=False)
    c, _, _ = _centroid_and_grad(out.alpha)
    return c


def crop_camera(camera: Camera, x0: int, y0: int, width: int, height: int) -> Camera:
    """Camera seeing exactly the pixel window starting at column ``x0``, row ``y0``."""
    return Camera(camera.fx, camera.fy, camera.cx - x0, camera.cy - y0, width, height, camera.world_to_camera)


def _footprint_box(scene: Scene, selected, camera: Camera):
    """Inclusive pixel box (x0, x1, y0, y1) covering every splat of ``selected``, or None."""
    proj = project(scene, camera, selected)
    if len(proj) == 0:
        return None
    b = proj.bounds
    return int(b[:, 0].min()), int(b[:, 1].max()), int(b[:, 2].min()), int(b[:, 3].max())


@dataclass
class _ViewTerm:
    """One view of the update objective with everything that does not depend on the pose."""

    camera: Camera
    target: np.ndarray            # (H, W, 3) current image
    d_gt: np.ndarray | None
    static_residual: np.ndarray   # |target - render without the selection|, (H, W, 3)

    @classmethod
    def build(cls, scene: Scene, selected, camera: Camera, target, d_gt) -> "_ViewTerm":
        keep = np.ones(len(scene), dtype=bool)
        keep[selected] = False
        static = render(scene, camera, selected=keep, with_features=False).rgb.astype(np.float64)
        target = np.asarray(target, dtype=np.float64)
        return cls(camera, target, d_gt, np.abs(target - static))


def _view_loss(moved: Scene, selected, term: _ViewTerm, config: UpdateConfig, want_grad: bool = True):
    """Loss of one view and the gradients w.r.t. the moved positions and quaternions of ``selected``.

    Only pixels the moved selection can reach differ from the render without
    it, so both terms are evaluated on a window around its footprint; the
    photometric residual outside the window comes from ``static_residual``.
    The result equals a full-image evaluation.
    """
    cam = term.camera
    n_sel = len(selected)
    g_pos = np.zeros((n_sel, 3))
    g_q = np.zeros((n_sel, 4))
    box = _footprint_box(moved, selected, cam)
    size = term.target.size
    if box is None:
        return float(term.static_residual.sum() / size) if config.use_photometric else 0.0, g_pos, g_q
    x0, x1, y0, y1 = box
    window = crop_camera(cam, x0, y0, x1 - x0 + 1, y1 - y0 + 1)
    loss = 0.0
    if config.use_photometric:
        out = render(moved, window, with_features=False)
        diff = out.rgb.astype(np.float64) - term.target[y0:y1 + 1, x0:x1 + 1]
        outside = term.static_residual.sum() - term.static_residual[y0:y1 + 1, x0:x1 + 1].sum()
        loss += float((outside + np.abs(diff).sum()) / size)
        if want_grad:
            g = render_backward(moved, window, np.sign(diff) / size, None, forward=out)
            g_pos += g.positions[selected]
            g_q += g.quats[selected]
    if config.use_centroid and term.d_gt is not None and config.lambda3 > 0:
        obj = render(moved, window, selected=selected, with_features=False)
        c, jac, _ = _centroid_and_grad(obj.alpha)
        if c is not None:
            # distances in image-size units keep lambda3 on the scale of the mean L1 term
            norm = np.array([cam.width, cam.height], dtype=np.float64)
            err = (c + (x0, y0) - term.d_gt) / norm
            loss += config.lambda3 * float(np.abs(err).mean())
            if want_grad:
                d_c = config.lambda3 * np.sign(err) / 2 / norm
                d_alpha = np.tensordot(d_c, jac, axes=1)
                g = render_backward(moved, window, None, None, d_alpha=d_alpha, forward=obj)
                g_pos += g.positions[selected]
                g_q += g.quats[selected]
    return loss, g_pos, g_q


def _view_terms(scene: Scene, selected, cameras, current_images, detections) -> list[_ViewTerm]:
    dets = detections if detections is not None else [None] * len(cameras)
    return [_ViewTerm.build(scene, selected, cam, img, d.centroid if d is not None else None)
            for cam, img, d in zip(cameras, current_images, dets)]


def update_objective(scene: Scene, update: RigidUpdate, cameras, current_images, detections,
                     config: UpdateConfig | None = None) -> float:
    """Sum over views of the mean photometric L1 plus ``lambda3`` times the centroid L1.

    Centroid distances are measured in units of the image width/height.
    """
    config = config or UpdateConfig()
    moved = apply_update(scene, update)
    terms = _view_terms(scene, update.selected, list(cameras), current_images, detections)
    return float(sum(_view_loss(moved, update.selected, t, config, want_grad=False)[0] for t in terms))


def initial_translation(scene: Scene, selected, cameras, detections) -> np.ndarray:
    """Back-project the centroid shift of the best view at the object's median depth.

    The best view is the one with the largest change area where the
    selection is visible.
    """
    best, best_area = None, 0
    for v, det in enumerate(detections):
        if det.changed and det.area > best_area:
            best, best_area = v, det.area
    if best is None:
        return np.zeros(3)
    cam = cameras[best]
    out = render(scene, cam, selected=selected, with_features=False)
    c, _, _ = _centroid_and_grad(out.alpha)
    if c is None:
        return np.zeros(3)
    z = float(np.median(cam.to_camera(scene.positions[selected].astype(np.float64))[:, 2]))
    if z <= 0:
        return np.zeros(3)
    du, dv = detections[best].centroid - c
    shift_cam = np.array([du * z / cam.fx, dv * z / cam.fy, 0.0])
    return cam.rotation.T @ shift_cam


def optimize_update(scene: Scene, selected, cameras, current_images, detections,
                    config: UpdateConfig | None = None, *, init_translation=None) -> RigidUpdate:
    """Fit translation and axis-angle rotation (about the selection centroid) with Adam.

    Only the 6 transform parameters are optimized; the scene is not modified.
    The best parameters seen are returned. Optimization stops after
    ``max_steps`` or when the best loss improved by less than ``plateau_tol``
    (relative) over the last ``plateau_window`` steps.
    """
    config = config or UpdateConfig()
    selected = np.unique(np.asarray(selected, dtype=np.int64))
    if len(selected) == 0:
        raise ObjectNotIdentified("object not identified")
    cameras = list(cameras)
    images = [np.asarray(im, dtype=np.float64) for im in current_images]
    if len(images) != len(cameras) or not cameras:
        raise ValueError("need one current image per camera")
    if detections is None:
        detections = [None] * len(cameras)
    terms = _view_terms(scene, selected, cameras, images, detections)
    visible = [render(scene, cam, selected=selected, with_features=False).alpha.sum() > 1e-3 for cam in cameras]
    if not any(visible):
        raise UpdateFailed("selection is invisible in every view")

    extent = float(scene.metadata.get("extent") or scene_extent(scene.positions))
    pivot = selection_pivot(scene, selected)
    if init_translation is None:
        init_translation = (initial_translation(scene, selected, cameras, detections)
                            if all(d is not None for d in detections) else np.zeros(3))
    params = np.concatenate([np.asarray(init_translation, dtype=np.float64), np.zeros(3)])
    lr0 = np.array([config.lr_translation * extent] * 3 + [config.lr_rotation] * 3)
    decay = config.lr_final_factor ** (1.0 / max(config.max_steps, 1))
    m = np.zeros(6)
    v2 = np.zeros(6)
    b1, b2, eps = 0.9, 0.999, 1e-15
    best_loss, best_params = np.inf, params.copy()
    history = []
    initial_loss = None
    steps = 0
    for step in range(config.max_steps):
        t, r = params[:3], params[3:]
        if np.linalg.norm(r) >= np.pi:
            r = r * (np.pi - 1e-6) / np.linalg.norm(r)
            params[3:] = r
        upd = RigidUpdate(t, r, pivot, selected)
        moved = apply_update(scene, upd)
        loss = 0.0
        g_pos = np.zeros((len(selected), 3))
        g_q = np.zeros((len(selected), 4))
        for term in terms:
            li, gp, gq = _view_loss(moved, selected, term, config)
            loss += li
            g_pos += gp
            g_q += gq
        if not np.isfinite(loss):
            raise UpdateFailed(f"non-finite update loss at step {step}")
        if initial_loss is None:
            initial_loss = loss
        history.append(loss)
        if loss < best_loss:
            best_loss, best_params = loss, params.copy()
        steps = step + 1
        w = config.plateau_window
        if len(history) > w:
            prev_best = min(history[:-w])
            if prev_best - best_loss < config.plateau_tol * max(abs(prev_best), 1e-12):
                break
        d_t, d_r = pose_gradient(scene, selected, r, pivot, g_pos, g_q)
        grad = np.concatenate([d_t, d_r])
        m = b1 * m + (1 - b1) * grad
        v2 = b2 * v2 + (1 - b2) * grad * grad
        mhat = m / (1 - b1 ** (step + 1))
        vhat = v2 / (1 - b2 ** (step + 1))
        params = params - lr0 * decay**step * mhat / (np.sqrt(vhat) + eps)

    return RigidUpdate(best_params[:3], best_params[3:], pivot, selected, final_loss=float(best_loss),
                       initial_loss=initial_loss, steps=steps, history=history)


@dataclass
class SceneUpdateResult:
    changed: bool
    update: RigidUpdate | None = None
    detections: list = field(default_factory=list)


def update_scene(scene: Scene, cameras, current_images, config: UpdateConfig | None = None) -> SceneUpdateResult:
    """Whole pipeline: render, detect, select, optimize. The scene is not modified.

    Returns ``changed=False`` when no view shows a change.
    """
    config = config or UpdateConfig()
    cameras = list(cameras)
    renders = [render(scene, cam) for cam in cameras]
    detections = detect_changes([r.rgb for r in renders], current_images, config.change_threshold,
                                features=[r.feature for r in renders])
    if not any_change(detections):
        return SceneUpdateResult(False, None, detections)
    selected = select_moved_gaussians(scene, pooled_feature(detections), config.sim_threshold)
    keep = np.ones(len(scene), dtype=bool)
    keep[selected] = False
    background = [render(scene, cam, selected=keep, with_features=False).rgb for cam in cameras]
    refined = detect_changes([r.rgb for r in renders], current_images, config.change_threshold,
                             features=[r.feature for r in renders], background=background)
    for d in refined:
        if not d.changed:
            d.centroid = None
    upd = optimize_update(scene, selected, cameras, current_images, refined, config)
    log.info("update after %d steps: t=%s, angle=%.2f deg", upd.steps, upd.translation, upd.angle_deg)
    return SceneUpdateResult(True, upd, refined)
