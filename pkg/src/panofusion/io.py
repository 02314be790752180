"""Panorama file formats: 8-bit RGB PNG, 16-bit depth PNG, PFM depth, 1-bit masks."""

from __future__ import annotations

import os
import re

import numpy as np
from PIL import Image

from .reprojection import Panorama


class FormatError(ValueError):
    pass


def write_pfm(path, data: np.ndarray) -> None:
    """Single-channel little-endian PFM, rows stored bottom to top."""
    arr = np.asarray(data, dtype="<f4")
    if arr.ndim != 2:
        raise FormatError("PFM writer expects a 2-D array")
    h, w = arr.shape
    with open(path, "wb") as f:
        f.write(f"Pf\n{w} {h}\n-1.0\n".encode("ascii"))
        f.write(np.ascontiguousarray(arr[::-1]).tobytes())


def read_pfm(path) -> np.ndarray:
    with open(path, "rb") as f:
        raw = f.read()
    m = re.match(rb"(P[fF])\s+(\d+)\s+(\d+)\s+(-?[\d.eE+-]+)\s", raw)
    if m is None:
        raise FormatError(f"{path}: not a PFM file")
    kind, w, h, scale = m.group(1), int(m.group(2)), int(m.group(3)), float(m.group(4))
    channels = 3 if kind == b"PF" else 1
    dtype = "<f4" if scale < 0 else ">f4"
    count = w * h * channels
    body = raw[m.end():]
    if len(body) < 4 * count:
        raise FormatError(f"{path}: truncated PFM body")
    arr = np.frombuffer(body, dtype=dtype, count=count).astype(np.float32)
    arr = arr.reshape(h, w, channels)[::-1]
    return arr[..., 0].copy() if channels == 1 else arr.copy()


def read_rgb(path) -> np.ndarray:
    with Image.open(path) as im:
        if im.mode != "RGB":
            im = im.convert("RGB")
        return np.asarray(im, dtype=np.float64) / 255.0


def write_rgb(path, rgb: np.ndarray) -> None:
    q = np.clip(np.rint(np.asarray(rgb) * 255.0), 0, 255).astype(np.uint8)
    Image.fromarray(q, mode="RGB").save(path)


def read_depth_png16(path, depth_scale: float) -> np.ndarray:
    with Image.open(path) as im:
        raw = np.asarray(im)
    if raw.ndim != 2:
        raise FormatError(f"{path}: depth PNG must be single channel")
    return raw.astype(np.float64) * depth_scale


def write_depth_png16(path, depth: np.ndarray, depth_scale: float) -> None:
    q = np.clip(np.rint(np.asarray(depth) / depth_scale), 0, 65535).astype(np.uint16)
    Image.fromarray(q).save(path)


def write_mask(path, mask: np.ndarray) -> None:
    Image.fromarray(np.asarray(mask, dtype=bool)).save(path)


def read_mask(path) -> np.ndarray:
    with Image.open(path) as im:
        return np.asarray(im.convert("1"), dtype=bool)


def load_panorama(rgb_path, depth_path, depth_scale: float = 0.001) -> Panorama:
    """Load an RGB-D panorama; zero depth marks invalid pixels.

    Depth comes from a PFM (meters, used verbatim) or a 16-bit grayscale PNG
    multiplied by ``depth_scale``.
    """
    if not depth_scale > 0:
        raise FormatError("depth_scale must be positive")
    for p in (rgb_path, depth_path):
        if not os.path.isfile(p):
            raise FileNotFoundError(p)
    try:
        rgb = read_rgb(rgb_path)
        if str(depth_path).lower().endswith(".pfm"):
            depth = read_pfm(depth_path).astype(np.float64)
        else:
            depth = read_depth_png16(depth_path, depth_scale)
    except (OSError, ValueError) as exc:
        if isinstance(exc, FormatError):
            raise
        raise FormatError(f"unreadable input: {exc}") from exc
    if depth.shape != rgb.shape[:2]:
        raise FormatError(f"rgb {rgb.shape[:2]} and depth {depth.shape} dimensions differ")
    valid = np.isfinite(depth) & (depth > 0)
    return Panorama(rgb, np.where(valid, depth, 0.0), valid)


def save_panorama(prefix, pano: Panorama) -> dict[str, str]:
    """Write ``<prefix>_rgb.png``, ``<prefix>_depth.pfm`` and ``<prefix>_mask.png``."""
    paths = {
        "rgb": f"{prefix}_rgb.png",
        "depth": f"{prefix}_depth.pfm",
        "mask": f"{prefix}_mask.png",
    }
    write_rgb(paths["rgb"], pano.rgb)
    write_pfm(paths["depth"], pano.depth)
    write_mask(paths["mask"], pano.valid)
    return paths
