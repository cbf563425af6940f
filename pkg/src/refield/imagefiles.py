"""Image files: PFM (lossless float), PNG (8-bit sRGB previews), Radiance HDR."""

from __future__ import annotations

import os
import re

import numpy as np


class ImageFormatError(ValueError):
    pass


# ---------------------------------------------------------------- PFM


def save_pfm(path, image) -> None:
    """Little-endian float32, bottom-to-top scanlines, scale -1."""
    img = np.asarray(image, dtype="<f4")
    if img.ndim == 3 and img.shape[2] == 1:
        img = img[..., 0]
    if img.ndim == 2:
        tag = b"Pf"
    elif img.ndim == 3 and img.shape[2] == 3:
        tag = b"PF"
    else:
        raise ImageFormatError(f"PFM stores 1 or 3 channels, got shape {img.shape}")
    h, w = img.shape[:2]
    with open(path, "wb") as fh:
        fh.write(tag + b"\n%d %d\n-1.0\n" % (w, h))
        fh.write(np.ascontiguousarray(img[::-1]).tobytes())


def load_pfm(path) -> np.ndarray:
    with open(path, "rb") as fh:
        blob = fh.read()
    m = re.match(rb"(P[Ff])\s+(\d+)\s+(\d+)\s+(\S+)\s", blob)
    if m is None:
        raise ImageFormatError(f"{path}: malformed PFM header")
    channels = 3 if m.group(1) == b"PF" else 1
    w, h = int(m.group(2)), int(m.group(3))
    try:
        scale = float(m.group(4))
    except ValueError as exc:
        raise ImageFormatError(f"{path}: bad PFM scale") from exc
    if scale == 0:
        raise ImageFormatError(f"{path}: PFM scale must be non-zero")
    dtype = "<f4" if scale < 0 else ">f4"
    n = w * h * channels
    off = m.end()
    if len(blob) - off != 4 * n:
        raise ImageFormatError(f"{path}: expected {4 * n} data bytes, found {len(blob) - off}")
    data = np.frombuffer(blob, dtype, n, off).astype(np.float32)
    shape = (h, w, 3) if channels == 3 else (h, w)
    return data.reshape(shape)[::-1].copy()


# ---------------------------------------------------------------- PNG


def linear_to_srgb(x):
    x = np.clip(np.asarray(x, dtype=np.float64), 0.0, 1.0)
    return np.where(x <= 0.0031308, 12.92 * x, 1.055 * np.power(x, 1 / 2.4) - 0.055)


def srgb_to_linear(s):
    s = np.asarray(s, dtype=np.float64)
    return np.where(s <= 0.04045, s / 12.92, np.power((s + 0.055) / 1.055, 2.4))


def save_png(path, image) -> None:
    from PIL import Image

    img = np.asarray(image, dtype=np.float64)
    q = np.round(linear_to_srgb(img) * 255.0).astype(np.uint8)
    Image.fromarray(q if q.ndim == 2 or q.shape[2] != 1 else q[..., 0]).save(path)


def load_png(path) -> np.ndarray:
    from PIL import Image

    with Image.open(path) as im:
        if im.mode not in ("L", "RGB", "RGBA"):
            raise ImageFormatError(f"{path}: unsupported PNG mode {im.mode}")
        arr = np.asarray(im.convert("RGB" if im.mode == "RGBA" else im.mode))
    if arr.dtype != np.uint8:
        raise ImageFormatError(f"{path}: only 8-bit PNG is supported")
    return srgb_to_linear(arr / 255.0).astype(np.float32)


# ---------------------------------------------------------------- RGBE


def rgbe_encode(rgb) -> np.ndarray:
    """Shared-exponent encoding; returns uint8 (..., 4)."""
    rgb = np.asarray(rgb, dtype=np.float64)
    mx = rgb.max(axis=-1)
    mant, exp = np.frexp(mx)
    out = np.zeros(rgb.shape[:-1] + (4,), dtype=np.uint8)
    ok = mx > 1e-32
    scale = np.where(ok, mant * 256.0 / np.where(ok, mx, 1.0), 0.0)
    out[..., :3] = np.clip(np.floor(rgb * scale[..., None]), 0, 255).astype(np.uint8)
    out[..., 3] = np.where(ok, exp + 128, 0).astype(np.uint8)
    return out


def rgbe_decode(rgbe) -> np.ndarray:
    rgbe = np.asarray(rgbe)
    e = rgbe[..., 3].astype(np.int64)
    f = np.where(e > 0, np.ldexp(1.0, e - 136), 0.0)
    return (rgbe[..., :3].astype(np.float64) * f[..., None]).astype(np.float32)


def save_hdr(path, image) -> None:
    import cv2

    img = np.asarray(image, dtype=np.float32)
    if img.ndim != 3 or img.shape[2] != 3:
        raise ImageFormatError("HDR images must be (H, W, 3)")
    if not cv2.imwrite(str(path), np.ascontiguousarray(img[..., ::-1])):
        raise OSError(f"could not write {path}")


def load_hdr(path) -> np.ndarray:
    import cv2

    with open(path, "rb") as fh:
        if not fh.read(2) == b"#?":
            raise ImageFormatError(f"{path}: not a Radiance HDR file")
    img = cv2.imread(str(path), cv2.IMREAD_UNCHANGED)
    if img is None:
        raise ImageFormatError(f"{path}: malformed HDR file")
    return np.ascontiguousarray(img[..., ::-1]).astype(np.float32)


# ---------------------------------------------------------------- dispatch

_LOADERS = {".pfm": load_pfm, ".png": load_png, ".hdr": load_hdr}
_SAVERS = {".pfm": save_pfm, ".png": save_png, ".hdr": save_hdr}


def _ext(path) -> str:
    ext = os.path.splitext(str(path))[1].lower()
    if ext not in _LOADERS:
        raise ImageFormatError(f"unsupported image extension {ext!r} ({path})")
    return ext


def load_image(path) -> np.ndarray:
    return _LOADERS[_ext(path)](path)


def save_image(path, image) -> None:
    _SAVERS[_ext(path)](path, image)
