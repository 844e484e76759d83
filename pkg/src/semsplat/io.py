"""Binary tensor and scene files, PPM/PGM images and camera JSON.

Tensor file (little endian)::

    "SGTN" | u32 version=1 | u8 dtype (0=f32, 1=u32) | u8 rank | 6 pad bytes
    rank x u64 dims | row-major payload

Scene file (little endian)::

    "SGSC" | u32 version=1 | u32 count N | u32 feature dim k
    f32 positions N*3 | f32 log-scales N*3 | f32 quaternions N*4 (w,x,y,z)
    f32 opacity logits N | f32 colors N*3 | f32 features N*k
    f32 PCA mean C | f32 PCA basis k*C | u32 C
    metadata JSON (utf-8) | u32 metadata byte length

The metadata footer is read from the end of the file, which is also how ``C``
is located.
"""

from __future__ import annotations

import json
import os
import struct
from pathlib import Path

import numpy as np

from .core import Camera, PcaModel, Scene

TENSOR_MAGIC = b"SGTN"
TENSOR_VERSION = 1
SCENE_MAGIC = b"SGSC"
SCENE_VERSION = 1

_DTYPES = {0: np.dtype("<f4"), 1: np.dtype("<u4")}


class FormatError(ValueError):
    """Base class for malformed tensor/scene files."""


class BadMagicError(FormatError):
    pass


class TruncatedError(FormatError):
    pass


class DimsOverflowError(FormatError):
    pass


class VersionError(FormatError):
    pass


def _as_tensor_array(array) -> np.ndarray:
    array = np.asarray(array)
    if array.dtype.kind == "f":
        return array.astype("<f4", copy=False)
    if array.dtype.kind in "ub":
        if array.size and array.max() > np.iinfo(np.uint32).max:
            raise ValueError("integer tensor does not fit in u32")
        return array.astype("<u4", copy=False)
    if array.dtype.kind == "i":
        if array.size and array.min() < 0:
            raise ValueError("negative values cannot be stored as u32")
        return array.astype("<u4", copy=False)
    raise TypeError(f"unsupported tensor dtype {array.dtype}")


def tensor_to_bytes(array) -> bytes:
    array = _as_tensor_array(array)
    if array.ndim > 255:
        raise ValueError("tensor rank exceeds 255")
    header = TENSOR_MAGIC + struct.pack("<IBB6x", TENSOR_VERSION, 0 if array.dtype.kind == "f" else 1,
                                        array.ndim)
    dims = struct.pack(f"<{array.ndim}Q", *array.shape)
    return header + dims + np.ascontiguousarray(array).tobytes()


def tensor_from_bytes(buf: bytes) -> np.ndarray:
    if len(buf) < 4 or buf[:4] != TENSOR_MAGIC:
        raise BadMagicError("not a tensor file")
    if len(buf) < 16:
        raise TruncatedError("truncated tensor header")
    version, code, rank = struct.unpack_from("<IBB", buf, 4)
    if version != TENSOR_VERSION:
        raise VersionError(f"unsupported tensor version {version}")
    if code not in _DTYPES:
        raise FormatError(f"unknown tensor dtype code {code}")
    if len(buf) < 16 + 8 * rank:
        raise TruncatedError("truncated tensor dims")
    dims = struct.unpack_from(f"<{rank}Q", buf, 16)
    count = 1
    for d in dims:
        count *= d
    dtype = _DTYPES[code]
    nbytes = count * dtype.itemsize
    if nbytes >= 2**63:
        raise DimsOverflowError(f"tensor dims {dims} overflow")
    start = 16 + 8 * rank
    if len(buf) - start < nbytes:
        raise TruncatedError(f"truncated payload: expected {nbytes} bytes, found {len(buf) - start}")
    if len(buf) - start > nbytes:
        raise FormatError("trailing bytes after tensor payload")
    return np.frombuffer(buf, dtype=dtype, count=count, offset=start).reshape(dims).copy()


def write_tensor(path, array) -> None:
    Path(path).write_bytes(tensor_to_bytes(array))


def read_tensor(path) -> np.ndarray:
    return tensor_from_bytes(Path(path).read_bytes())


def scene_to_bytes(scene: Scene) -> bytes:
    scene.validate()
    n, k = len(scene), scene.feature_dim
    parts = [SCENE_MAGIC, struct.pack("<III", SCENE_VERSION, n, k)]
    for name in ("positions", "log_scales", "quats", "opacity_logits", "colors", "features"):
        parts.append(np.ascontiguousarray(getattr(scene, name), dtype="<f4").tobytes())
    c = scene.pca.input_dim
    parts.append(np.ascontiguousarray(scene.pca.mean, dtype="<f4").tobytes())
    parts.append(np.ascontiguousarray(scene.pca.basis, dtype="<f4").tobytes())
    parts.append(struct.pack("<I", c))
    meta = json.dumps(scene.metadata, sort_keys=True).encode("utf-8")
    parts.append(meta)
    parts.append(struct.pack("<I", len(meta)))
    return b"".join(parts)


def scene_from_bytes(buf: bytes) -> Scene:
    if len(buf) < 4 or buf[:4] != SCENE_MAGIC:
        raise BadMagicError("not a scene file")
    if len(buf) < 16:
        raise TruncatedError("truncated scene header")
    version, n, k = struct.unpack_from("<III", buf, 4)
    if version != SCENE_VERSION:
        raise VersionError(f"unsupported scene version {version} (expected {SCENE_VERSION})")
    if n == 0:
        raise ValueError("scene file contains no Gaussians")
    widths = {"positions": 3, "log_scales": 3, "quats": 4, "opacity_logits": 1, "colors": 3, "features": k}
    offset = 16
    arrays = {}
    for name, w in widths.items():
        nbytes = 4 * n * w
        if offset + nbytes > len(buf):
            raise TruncatedError(f"truncated scene file while reading {name}")
        a = np.frombuffer(buf, dtype="<f4", count=n * w, offset=offset).astype(np.float32)
        arrays[name] = a if name == "opacity_logits" else a.reshape(n, w)
        offset += nbytes
    if len(buf) < offset + 8:
        raise TruncatedError("truncated scene footer")
    (meta_len,) = struct.unpack_from("<I", buf, len(buf) - 4)
    meta_start = len(buf) - 4 - meta_len
    if meta_start - 4 < offset:
        raise TruncatedError("truncated scene metadata")
    (c,) = struct.unpack_from("<I", buf, meta_start - 4)
    if offset + 4 * c * (k + 1) != meta_start - 4:
        raise FormatError("PCA block size does not match its declared input dimension")
    mean = np.frombuffer(buf, dtype="<f4", count=c, offset=offset).astype(np.float32)
    basis = np.frombuffer(buf, dtype="<f4", count=k * c, offset=offset + 4 * c).astype(np.float32).reshape(k, c)
    metadata = json.loads(buf[meta_start:len(buf) - 4].decode("utf-8"))
    scene = Scene(**arrays, pca=PcaModel(mean, basis), metadata=metadata)
    scene.validate()
    return scene


def save_scene(path, scene: Scene) -> None:
    Path(path).write_bytes(scene_to_bytes(scene))


def load_scene(path) -> Scene:
    return scene_from_bytes(Path(path).read_bytes())


def _to_u8(image) -> np.ndarray:
    image = np.asarray(image)
    if image.dtype == np.uint8:
        return image
    return np.clip(np.rint(np.asarray(image, dtype=np.float64) * 255.0), 0, 255).astype(np.uint8)


def write_ppm(path, image) -> None:
    """Write an ``(H, W, 3)`` image (float in [0,1] or uint8) as binary PPM."""
    img = _to_u8(image)
    if img.ndim != 3 or img.shape[2] != 3:
        raise ValueError("PPM images must be (H, W, 3)")
    h, w = img.shape[:2]
    Path(path).write_bytes(f"P6\n{w} {h}\n255\n".encode() + img.tobytes())


def write_pgm(path, image) -> None:
    img = _to_u8(image)
    if img.ndim != 2:
        raise ValueError("PGM images must be (H, W)")
    h, w = img.shape
    Path(path).write_bytes(f"P5\n{w} {h}\n255\n".encode() + img.tobytes())


def _read_netpbm(path, magic: bytes, channels: int) -> np.ndarray:
    data = Path(path).read_bytes()
    tokens = []
    pos = 0
    while len(tokens) < 4:
        while pos < len(data) and data[pos:pos + 1].isspace():
            pos += 1
        if data[pos:pos + 1] == b"#":
            while pos < len(data) and data[pos:pos + 1] != b"\n":
                pos += 1
            continue
        start = pos
        while pos < len(data) and not data[pos:pos + 1].isspace():
            pos += 1
        if start == pos:
            raise ValueError(f"{path}: truncated image header")
        tokens.append(data[start:pos])
    if tokens[0] != magic:
        raise ValueError(f"{path}: expected {magic.decode()} image")
    w, h, maxval = (int(t) for t in tokens[1:])
    if maxval != 255:
        raise ValueError(f"{path}: only 8-bit images are supported")
    pos += 1
    payload = np.frombuffer(data, dtype=np.uint8, count=w * h * channels, offset=pos)
    shape = (h, w, channels) if channels > 1 else (h, w)
    return payload.reshape(shape)


def read_ppm(path) -> np.ndarray:
    """Read a P6 image as float32 ``(H, W, 3)`` in [0, 1]."""
    return _read_netpbm(path, b"P6", 3).astype(np.float32) / 255.0


def read_pgm(path) -> np.ndarray:
    return _read_netpbm(path, b"P5", 1).astype(np.float32) / 255.0


def read_image(path) -> np.ndarray:
    """RGB image from a PPM or an SGTN f32 tensor."""
    with open(path, "rb") as fh:
        head = fh.read(4)
    if head == TENSOR_MAGIC:
        return read_tensor(path).astype(np.float32)
    return read_ppm(path)


def save_camera(path, camera: Camera) -> None:
    Path(path).write_text(json.dumps(camera.to_dict(), indent=2))


def load_camera(path) -> Camera:
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(f"camera file not found: {path}")
    return Camera.from_dict(json.loads(path.read_text()))


def ensure_dir(path) -> Path:
    path = Path(path)
    os.makedirs(path, exist_ok=True)
    return path
