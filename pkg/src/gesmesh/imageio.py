"""PNG and PFM image files as float arrays in [0, 1]."""
from __future__ import annotations

import re
from pathlib import Path

import numpy as np
from PIL import Image, UnidentifiedImageError


class ImageFileError(ValueError):
    pass


def read_png(path) -> np.ndarray:
    try:
        with Image.open(path) as im:
            im.load()
            arr = np.asarray(im.convert("RGB"), dtype=np.float64)
    except (UnidentifiedImageError, OSError, SyntaxError) as e:
        raise ImageFileError(f"cannot decode image {path}: {e}") from e
    return arr / 255.0


def write_png(path, rgb) -> None:
    arr = np.clip(np.asarray(rgb, dtype=np.float64), 0.0, 1.0)
    Image.fromarray(np.round(arr * 255.0).astype(np.uint8)).save(path)


def write_pfm(path, img) -> None:
    """Little-endian PFM; color when the last axis has 3 channels."""
    img = np.asarray(img, dtype=np.float32)
    color = img.ndim == 3 and img.shape[2] == 3
    if not (color or img.ndim == 2):
        raise ValueError("PFM needs an (H, W) or (H, W, 3) array")
    h, w = img.shape[:2]
    with open(path, "wb") as fh:
        fh.write(b"PF\n" if color else b"Pf\n")
        fh.write(f"{w} {h}\n-1.0\n".encode())
        # rows are stored bottom to top
        fh.write(np.ascontiguousarray(img[::-1]).astype("<f4").tobytes())


def read_pfm(path) -> np.ndarray:
    data = Path(path).read_bytes()
    m = re.match(rb"(P[Ff])\s+(\d+)\s+(\d+)\s+(-?[\d.eE+-]+)\s", data)
    if m is None:
        raise ImageFileError(f"malformed PFM header in {path}")
    color = m.group(1) == b"PF"
    w, h, scale = int(m.group(2)), int(m.group(3)), float(m.group(4))
    c = 3 if color else 1
    dtype = "<f4" if scale < 0 else ">f4"
    body = data[m.end():]
    if len(body) < w * h * c * 4:
        raise ImageFileError(f"truncated PFM payload in {path}")
    arr = np.frombuffer(body[: w * h * c * 4], dtype=dtype).astype(np.float64)
    arr = arr.reshape((h, w, c) if color else (h, w))[::-1]
    return np.ascontiguousarray(arr)


def read_image(path) -> np.ndarray:
    path = Path(path)
    if path.suffix.lower() == ".pfm":
        return read_pfm(path)
    return read_png(path)
