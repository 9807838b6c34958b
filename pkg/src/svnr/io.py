"""PNG and raw float32 raster I/O."""

from __future__ import annotations

import struct
from pathlib import Path

import cv2
import numpy as np

from .noise_model import Domain, ImageGrid

F32_MAGIC = b"SVNRF32\x00"
_HEADER = struct.Struct("<8sIII")


class ImageDecodeError(IOError):
    pass


def read_png(path) -> ImageGrid:
    """Read an 8- or 16-bit PNG as an SRGB image in [0, 1]; grayscale becomes 3 channels."""
    path = Path(path)
    raw = np.fromfile(path, dtype=np.uint8) if path.exists() else None
    if raw is None:
        raise ImageDecodeError(f"{path}: no such file")
    img = cv2.imdecode(raw, cv2.IMREAD_UNCHANGED) if raw.size else None
    if img is None:
        raise ImageDecodeError(f"{path}: could not decode image data")
    if img.dtype == np.uint8:
        scale = 255.0
    elif img.dtype == np.uint16:
        scale = 65535.0
    else:
        raise ImageDecodeError(f"{path}: unsupported sample type {img.dtype}")
    if img.ndim == 2:
        img = np.repeat(img[..., None], 3, axis=-1)
    elif img.shape[-1] == 4:
        img = cv2.cvtColor(img, cv2.COLOR_BGRA2RGB)
    else:
        img = cv2.cvtColor(img, cv2.COLOR_BGR2RGB)
    return ImageGrid(img.astype(float) / scale, Domain.SRGB)


def write_png(path, img: ImageGrid, bit_depth: int = 16):
    if bit_depth not in (8, 16):
        raise ValueError("bit depth must be 8 or 16")
    if img.domain is not Domain.SRGB:
        raise ValueError(f"PNG files hold SRGB images, got {img.domain.value}")
    top = 255 if bit_depth == 8 else 65535
    q = np.rint(np.clip(img.data, 0.0, 1.0) * top).astype(np.uint8 if bit_depth == 8 else np.uint16)
    if q.shape[-1] == 3:
        q = cv2.cvtColor(q, cv2.COLOR_RGB2BGR)
    else:
        q = q[..., 0]
    ok, buf = cv2.imencode(".png", q)
    if not ok:
        raise IOError(f"{path}: PNG encoding failed")
    Path(path).write_bytes(buf.tobytes())


def write_f32(path, raster):
    """Write ``magic | u32 H | u32 W | u32 C | float32 data`` (all little-endian)."""
    arr = raster.data if isinstance(raster, ImageGrid) else np.asarray(raster)
    if arr.ndim == 2:
        arr = arr[..., None]
    if arr.ndim != 3:
        raise ValueError(f"expected an H x W or H x W x C raster, got {arr.shape}")
    h, w, c = arr.shape
    Path(path).write_bytes(_HEADER.pack(F32_MAGIC, h, w, c) + np.ascontiguousarray(arr, dtype="<f4").tobytes())


def read_f32(path) -> np.ndarray:
    raw = Path(path).read_bytes()
    if len(raw) < _HEADER.size:
        raise ValueError(f"{path}: file too short for a raster header")
    magic, h, w, c = _HEADER.unpack_from(raw)
    if magic != F32_MAGIC:
        raise ValueError(f"{path}: bad magic {magic!r}")
    payload = raw[_HEADER.size:]
    if len(payload) != 4 * h * w * c:
        raise ValueError(f"{path}: header says {h}x{w}x{c} but payload holds {len(payload) // 4} floats")
    return np.frombuffer(payload, dtype="<f4").reshape(h, w, c).copy()
