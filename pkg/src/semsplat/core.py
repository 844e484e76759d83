"""Scene, camera and Gaussian data model plus the small amount of 3D math
everything else leans on.

Conventions used throughout the package:

* quaternions are stored ``(w, x, y, z)``;
* cameras look down ``+z`` with ``y`` pointing down in the image;
* pixel ``(row, col)`` is sampled at continuous image coordinate ``(u=col, v=row)``,
  so a Gaussian projected to ``(cx, cy)`` with integer ``cx, cy`` is centred on a pixel;
* scales are stored as logs, opacities as logits.
"""

from __future__ import annotations

import copy
import logging
from dataclasses import dataclass, field
from typing import Any

import numpy as np

log = logging.getLogger(__name__)

NEAR_PLANE = 0.01


def sigmoid(x):
    return 1.0 / (1.0 + np.exp(-x))


def logit(p):
    p = np.asarray(p)
    return np.log(p / (1.0 - p))


def quat_to_rotation(q) -> np.ndarray:
    """Rotation matrix for a ``(w, x, y, z)`` quaternion.

    Accepts a single quaternion or a ``(..., 4)`` stack; the input is normalized
    first. A (near) zero quaternion raises ``ValueError("degenerate rotation")``.
    """
    q = np.asarray(q)
    if not np.issubdtype(q.dtype, np.floating):
        q = q.astype(np.float64)
    norm = np.linalg.norm(q, axis=-1, keepdims=True)
    if np.any(norm < 1e-12):
        raise ValueError("degenerate rotation")
    w, x, y, z = np.moveaxis(q / norm, -1, 0)
    R = np.stack(
        [
            1 - 2 * (y * y + z * z), 2 * (x * y - w * z), 2 * (x * z + w * y),
            2 * (x * y + w * z), 1 - 2 * (x * x + z * z), 2 * (y * z - w * x),
            2 * (x * z - w * y), 2 * (y * z + w * x), 1 - 2 * (x * x + y * y),
        ],
        axis=-1,
    )
    return R.reshape(q.shape[:-1] + (3, 3))


def rotation_to_quat(R) -> np.ndarray:
    """Inverse of :func:`quat_to_rotation` for a single 3x3 matrix (w >= 0)."""
    R = np.asarray(R, dtype=np.float64)
    tr = np.trace(R)
    if tr > 0:
        s = np.sqrt(tr + 1.0) * 2
        q = [0.25 * s, (R[2, 1] - R[1, 2]) / s, (R[0, 2] - R[2, 0]) / s, (R[1, 0] - R[0, 1]) / s]
    elif R[0, 0] > R[1, 1] and R[0, 0] > R[2, 2]:
        s = np.sqrt(1.0 + R[0, 0] - R[1, 1] - R[2, 2]) * 2
        q = [(R[2, 1] - R[1, 2]) / s, 0.25 * s, (R[0, 1] + R[1, 0]) / s, (R[0, 2] + R[2, 0]) / s]
    elif R[1, 1] > R[2, 2]:
        s = np.sqrt(1.0 + R[1, 1] - R[0, 0] - R[2, 2]) * 2
        q = [(R[0, 2] - R[2, 0]) / s, (R[0, 1] + R[1, 0]) / s, 0.25 * s, (R[1, 2] + R[2, 1]) / s]
    else:
        s = np.sqrt(1.0 + R[2, 2] - R[0, 0] - R[1, 1]) * 2
        q = [(R[1, 0] - R[0, 1]) / s, (R[0, 2] + R[2, 0]) / s, (R[1, 2] + R[2, 1]) / s, 0.25 * s]
    q = np.array(q)
    q /= np.linalg.norm(q)
    return q if q[0] >= 0 else -q


def quat_multiply(a, b) -> np.ndarray:
    """Hamilton product ``a * b``; broadcasts over leading axes."""
    a = np.asarray(a)
    b = np.asarray(b)
    aw, ax, ay, az = np.moveaxis(a, -1, 0)
    bw, bx, by, bz = np.moveaxis(b, -1, 0)
    return np.stack(
        [
            aw * bw - ax * bx - ay * by - az * bz,
            aw * bx + ax * bw + ay * bz - az * by,
            aw * by - ax * bz + ay * bw + az * bx,
            aw * bz + ax * by - ay * bx + az * bw,
        ],
        axis=-1,
    )


def axis_angle_to_quat(r) -> np.ndarray:
    r = np.asarray(r, dtype=np.float64)
    theta = np.linalg.norm(r)
    if theta < 1e-12:
        return np.array([1.0, 0.5 * r[0], 0.5 * r[1], 0.5 * r[2]]) / np.sqrt(1 + 0.25 * theta**2)
    axis = r / theta
    return np.concatenate([[np.cos(theta / 2)], np.sin(theta / 2) * axis])


def axis_angle_to_rotation(r) -> np.ndarray:
    return quat_to_rotation(axis_angle_to_quat(r))


def rotation_angle(R) -> float:
    """Geodesic angle (radians) of a rotation matrix."""
    c = (np.trace(R) - 1.0) / 2.0
    return float(np.arccos(np.clip(c, -1.0, 1.0)))


def covariance_3d(scale, rotation) -> np.ndarray:
    """``R diag(scale)^2 R^T`` for one Gaussian or a stack of them."""
    scale = np.asarray(scale)
    if np.any(scale <= 0):
        raise ValueError("scale components must be positive")
    R = quat_to_rotation(rotation)
    M = R * scale[..., None, :]
    return M @ np.swapaxes(M, -1, -2)


@dataclass
class Camera:
    """Pinhole camera. ``world_to_camera`` maps homogeneous world points to camera space."""

    fx: float
    fy: float
    cx: float
    cy: float
    width: int
    height: int
    world_to_camera: np.ndarray

    def __post_init__(self):
        self.world_to_camera = np.asarray(self.world_to_camera, dtype=np.float64).reshape(4, 4)
        self.width = int(self.width)
        self.height = int(self.height)
        if not (self.fx > 0 and self.fy > 0):
            raise ValueError("camera focal lengths must be positive")
        if self.width <= 0 or self.height <= 0:
            raise ValueError("camera image size must be positive")
        R = self.world_to_camera[:3, :3]
        if not np.allclose(R @ R.T, np.eye(3), atol=1e-6) or abs(np.linalg.det(R) - 1) > 1e-6:
            raise ValueError("camera rotation is not orthonormal with det +1")
        if not np.allclose(self.world_to_camera[3], [0, 0, 0, 1]):
            raise ValueError("camera transform must be rigid (last row 0 0 0 1)")

    @property
    def rotation(self) -> np.ndarray:
        return self.world_to_camera[:3, :3]

    @property
    def translation(self) -> np.ndarray:
        return self.world_to_camera[:3, 3]

    @property
    def center(self) -> np.ndarray:
        return -self.rotation.T @ self.translation

    @property
    def shape(self) -> tuple[int, int]:
        return self.height, self.width

    def to_camera(self, points: np.ndarray) -> np.ndarray:
        return points @ self.rotation.T + self.translation

    def project_points(self, points: np.ndarray) -> np.ndarray:
        """Pixel coordinates ``(u, v)`` of world points (no culling)."""
        t = self.to_camera(np.asarray(points, dtype=np.float64))
        return np.stack([self.fx * t[..., 0] / t[..., 2] + self.cx,
                         self.fy * t[..., 1] / t[..., 2] + self.cy], axis=-1)

    def pixel_rays(self) -> np.ndarray:
        """World-space unit ray directions, shape ``(H, W, 3)``."""
        v, u = np.mgrid[0:self.height, 0:self.width].astype(np.float64)
        d = np.stack([(u - self.cx) / self.fx, (v - self.cy) / self.fy, np.ones_like(u)], axis=-1)
        d = d @ self.rotation  # camera -> world: R^T d, written row-wise
        return d / np.linalg.norm(d, axis=-1, keepdims=True)

    @classmethod
    def look_at(cls, eye, target, up=(0.0, 0.0, 1.0), *, width, height, fov_deg=60.0) -> "Camera":
        eye = np.asarray(eye, dtype=np.float64)
        fwd = np.asarray(target, dtype=np.float64) - eye
        fwd /= np.linalg.norm(fwd)
        right = np.cross(fwd, up)
        if np.linalg.norm(right) < 1e-9:
            right = np.cross(fwd, [0.0, 1.0, 0.0])
        right /= np.linalg.norm(right)
        down = np.cross(fwd, right)
        R = np.stack([right, down, fwd])
        T = np.eye(4)
        T[:3, :3] = R
        T[:3, 3] = -R @ eye
        f = 0.5 * width / np.tan(np.radians(fov_deg) / 2)
        return cls(f, f, width / 2.0, height / 2.0, width, height, T)

    def to_dict(self) -> dict[str, Any]:
        return {
            "fx": float(self.fx), "fy": float(self.fy), "cx": float(self.cx), "cy": float(self.cy),
            "width": self.width, "height": self.height,
            "world_to_camera": [float(v) for v in self.world_to_camera.ravel()],
        }

    @classmethod
    def from_dict(cls, d: dict[str, Any]) -> "Camera":
        m = d["world_to_camera"]
        if len(m) != 16:
            raise ValueError("world_to_camera must have 16 entries")
        return cls(d["fx"], d["fy"], d["cx"], d["cy"], d["width"], d["height"], np.array(m, dtype=np.float64))


@dataclass(frozen=True)
class Gaussian:
    """A single splat in its stored (unactivated) parameterization."""

    position: np.ndarray
    log_scale: np.ndarray
    rotation: np.ndarray
    opacity_logit: float
    color: np.ndarray
    feature: np.ndarray

    @property
    def scale(self) -> np.ndarray:
        return np.exp(self.log_scale)

    @property
    def opacity(self) -> float:
        return float(sigmoid(self.opacity_logit))


@dataclass
class PcaModel:
    """Linear feature compressor ``y = (x - mean) @ basis.T``.

    ``basis`` rows are orthonormal. ``explained_variance`` is informational and
    is not persisted in scene files.
    """

    mean: np.ndarray
    basis: np.ndarray
    explained_variance: np.ndarray | None = None

    @property
    def input_dim(self) -> int:
        return self.basis.shape[1]

    @property
    def components(self) -> int:
        return self.basis.shape[0]

    @classmethod
    def identity(cls, k: int, dtype=np.float32) -> "PcaModel":
        return cls(np.zeros(k, dtype=dtype), np.eye(k, dtype=dtype))


PARAM_FIELDS = ("positions", "log_scales", "quats", "opacity_logits", "colors", "features")


@dataclass
class Scene:
    """Struct-of-arrays collection of Gaussians plus the PCA model of its features."""

    positions: np.ndarray       # (N, 3)
    log_scales: np.ndarray      # (N, 3)
    quats: np.ndarray           # (N, 4) w, x, y, z
    opacity_logits: np.ndarray  # (N,)
    colors: np.ndarray          # (N, 3) in [0, 1]
    features: np.ndarray        # (N, k)
    pca: PcaModel
    metadata: dict = field(default_factory=dict)

    def __len__(self) -> int:
        return self.positions.shape[0]

    @property
    def feature_dim(self) -> int:
        return self.features.shape[1]

    @property
    def dtype(self):
        return self.positions.dtype

    @property
    def scales(self) -> np.ndarray:
        return np.exp(self.log_scales)

    @property
    def opacities(self) -> np.ndarray:
        return sigmoid(self.opacity_logits)

    def gaussian(self, i: int) -> Gaussian:
        return Gaussian(self.positions[i].copy(), self.log_scales[i].copy(), self.quats[i].copy(),
                        float(self.opacity_logits[i]), self.colors[i].copy(), self.features[i].copy())

    def params(self) -> dict[str, np.ndarray]:
        return {name: getattr(self, name) for name in PARAM_FIELDS}

    def replace(self, **arrays) -> "Scene":
        """Shallow copy with some parameter arrays swapped out."""
        out = copy.copy(self)
        out.metadata = dict(self.metadata)
        for name, value in arrays.items():
            setattr(out, name, value)
        return out

    def copy(self) -> "Scene":
        return Scene(*(getattr(self, n).copy() for n in PARAM_FIELDS),
                     pca=PcaModel(self.pca.mean.copy(), self.pca.basis.copy(),
                                  None if self.pca.explained_variance is None
                                  else self.pca.explained_variance.copy()),
                     metadata=copy.deepcopy(self.metadata))

    def subset(self, index) -> "Scene":
        return Scene(*(getattr(self, n)[index] for n in PARAM_FIELDS), pca=self.pca,
                     metadata=dict(self.metadata))

    def astype(self, dtype) -> "Scene":
        return Scene(*(getattr(self, n).astype(dtype) for n in PARAM_FIELDS), pca=self.pca,
                     metadata=dict(self.metadata))

    def validate(self) -> None:
        n = len(self)
        if n == 0:
            raise ValueError("scene has no Gaussians")
        shapes = {"positions": (n, 3), "log_scales": (n, 3), "quats": (n, 4),
                  "opacity_logits": (n,), "colors": (n, 3)}
        for name, shape in shapes.items():
            if getattr(self, name).shape != shape:
                raise ValueError(f"{name} has shape {getattr(self, name).shape}, expected {shape}")
        if self.features.ndim != 2 or self.features.shape[0] != n:
            raise ValueError("features must be (N, k)")
        if self.features.shape[1] != self.pca.components:
            raise ValueError(
                f"feature dim {self.features.shape[1]} != PCA components {self.pca.components}")
        if self.pca.mean.shape != (self.pca.input_dim,):
            raise ValueError("PCA mean does not match basis width")
        qn = np.linalg.norm(self.quats, axis=1)
        if np.any(qn < 1e-12):
            raise ValueError("scene contains a zero quaternion")
        for name in PARAM_FIELDS:
            if not np.all(np.isfinite(getattr(self, name))):
                raise ValueError(f"non-finite values in {name}")

    @classmethod
    def from_points(cls, points, colors, *, scales, opacity=0.1, features=None,
                    pca: PcaModel | None = None, dtype=np.float32) -> "Scene":
        """Isotropic, identity-rotation Gaussians centred on ``points``."""
        points = np.asarray(points, dtype=dtype)
        n = len(points)
        scales = np.broadcast_to(np.asarray(scales, dtype=np.float64).reshape(-1, 1) if np.ndim(scales)
                                 else np.float64(scales), (n, 3))
        if features is None:
            k = pca.components if pca is not None else 1
            features = np.zeros((n, k), dtype=dtype)
        features = np.asarray(features, dtype=dtype)
        if pca is None:
            pca = PcaModel.identity(features.shape[1], dtype=dtype)
        quats = np.zeros((n, 4), dtype=dtype)
        quats[:, 0] = 1
        return cls(points.copy(), np.log(scales).astype(dtype), quats,
                   np.full(n, logit(opacity), dtype=dtype),
                   np.asarray(colors, dtype=dtype).copy(), features.copy(), pca)


def scene_extent(points: np.ndarray) -> float:
    """Bounding-box diagonal of a point set."""
    points = np.asarray(points, dtype=np.float64)
    return float(np.linalg.norm(points.max(axis=0) - points.min(axis=0)))


def _voxel_downsample(points, colors, voxel):
    origin = points.min(axis=0)
    keys = np.floor((points - origin) / voxel).astype(np.int64)
    _, inverse, counts = np.unique(keys, axis=0, return_inverse=True, return_counts=True)
    inverse = inverse.ravel()
    m = len(counts)
    out_p = np.zeros((m, 3))
    out_c = np.zeros((m, colors.shape[1]))
    for d in range(3):
        out_p[:, d] = np.bincount(inverse, weights=points[:, d], minlength=m)
    for d in range(colors.shape[1]):
        out_c[:, d] = np.bincount(inverse, weights=colors[:, d], minlength=m)
    return out_p / counts[:, None], out_c / counts[:, None]


def _voxel_count(points, voxel):
    keys = np.floor((points - points.min(axis=0)) / voxel).astype(np.int64)
    return len(np.unique(keys, axis=0))


def resample_point_cloud(points, colors, target: int, *, tolerance: float = 0.1,
                         max_iter: int = 64) -> tuple[np.ndarray, np.ndarray]:
    """Voxel-grid downsample a coloured point cloud to roughly ``target`` points.

    Clouds already at or below ``target`` are returned unchanged. Otherwise the
    voxel edge length is bisected (in log space) until the number of occupied
    voxels is within ``tolerance`` of ``target``; each occupied voxel yields the
    centroid of its points and their mean colour.
    """
    points = np.asarray(points, dtype=np.float64)
    colors = np.asarray(colors, dtype=np.float64)
    if points.ndim != 2 or points.shape[0] == 0:
        raise ValueError("empty point cloud")
    if len(colors) != len(points):
        raise ValueError("points and colors differ in length")
    if target < 1:
        raise ValueError("target must be >= 1")
    n = len(points)
    if n <= target:
        return points.copy(), colors.copy()

    extent = float(np.max(points.max(axis=0) - points.min(axis=0)))
    hi = max(extent, 1e-12) * 1.001 + 1e-12  # one voxel holds everything
    lo = hi / max(n, 2) ** (1 / 3) / 64
    best_voxel, best_err = hi, abs(1 - target) / target
    for _ in range(max_iter):
        if best_err <= tolerance:
            break
        mid = np.sqrt(lo * hi)
        m = _voxel_count(points, mid)
        err = abs(m - target) / target
        if err < best_err:
            best_voxel, best_err = mid, err
        if m > target:
            lo = mid
        else:
            hi = mid
    if best_err > tolerance:
        log.warning("voxel resampling reached %.3f relative error (target %d)", best_err, target)
    return _voxel_downsample(points, colors, best_voxel)


def quat_rotation_backward(q, dR) -> np.ndarray:
    """Gradient w.r.t. the raw quaternion(s) ``q`` given ``dL/dR`` for ``R = quat_to_rotation(q)``.

    Includes the normalization step, so the result is orthogonal to ``q``.
    """
    q = np.asarray(q)
    norm = np.linalg.norm(q, axis=-1, keepdims=True)
    qn = q / norm
    w, x, y, z = np.moveaxis(qn, -1, 0)
    g = dR
    d00, d01, d02 = g[..., 0, 0], g[..., 0, 1], g[..., 0, 2]
    d10, d11, d12 = g[..., 1, 0], g[..., 1, 1], g[..., 1, 2]
    d20, d21, d22 = g[..., 2, 0], g[..., 2, 1], g[..., 2, 2]
    dw = 2 * z * (d10 - d01) + 2 * y * (d02 - d20) + 2 * x * (d21 - d12)
    dx = 2 * y * (d01 + d10) + 2 * z * (d02 + d20) + 2 * w * (d21 - d12) - 4 * x * (d11 + d22)
    dy = 2 * x * (d01 + d10) + 2 * w * (d02 - d20) + 2 * z * (d12 + d21) - 4 * y * (d00 + d22)
    dz = 2 * w * (d10 - d01) + 2 * x * (d02 + d20) + 2 * y * (d12 + d21) - 4 * z * (d00 + d11)
    dqn = np.stack([dw, dx, dy, dz], axis=-1)
    return (dqn - qn * np.sum(qn * dqn, axis=-1, keepdims=True)) / norm
