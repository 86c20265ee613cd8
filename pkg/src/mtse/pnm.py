"""Plain (ASCII) PGM/PPM writing and reading, max value 255.

Real values are quantized into 256 equal bins: ``p = min(255, floor(256 * u))``
for ``u`` in ``[0, 1]``; :func:`dequantize` returns the bin centre
``(p + 0.5) / 256``, which always lies strictly inside ``(0, 1)``.
"""

from __future__ import annotations

from pathlib import Path

import numpy as np

# 17 crop classes + spare, fixed so prediction maps are comparable across runs
PALETTE = np.array([
    (230, 159, 0), (86, 180, 233), (0, 158, 115), (240, 228, 66), (0, 114, 178),
    (213, 94, 0), (204, 121, 167), (120, 120, 120), (153, 51, 51), (51, 153, 51),
    (51, 51, 153), (255, 153, 204), (153, 255, 204), (204, 204, 255), (102, 51, 0),
    (0, 102, 102), (255, 255, 255), (180, 180, 60),
], np.uint8)
IGNORE_COLOR = (0, 0, 0)


def quantize(u: np.ndarray, lo: float = 0.0, hi: float = 1.0) -> np.ndarray:
    """Map values from ``[lo, hi]`` (clipped) to integer levels 0..255."""
    v = (np.clip(np.asarray(u, np.float64), lo, hi) - lo) / (hi - lo)
    return np.minimum(np.floor(v * 256.0), 255).astype(np.uint8)


def dequantize(p: np.ndarray, lo: float = 0.0, hi: float = 1.0) -> np.ndarray:
    return lo + (np.asarray(p, np.float64) + 0.5) / 256.0 * (hi - lo)


def _header(magic: str, w: int, h: int, comments) -> str:
    lines = [magic] + [f"# {c}" for c in comments] + [f"{w} {h}", "255"]
    return "\n".join(lines) + "\n"


def _body(values: np.ndarray, per_line: int) -> str:
    flat = values.reshape(-1)
    return "".join(" ".join(map(str, flat[i:i + per_line].tolist())) + "\n" for i in range(0, flat.size, per_line))


def write_pgm(path, image: np.ndarray, comments=()):
    image = np.asarray(image)
    if image.ndim != 2 or image.dtype != np.uint8:
        raise ValueError("PGM needs a 2-D uint8 array")
    h, w = image.shape
    Path(path).write_text(_header("P2", w, h, comments) + _body(image, w))


def write_ppm(path, image: np.ndarray, comments=()):
    image = np.asarray(image)
    if image.ndim != 3 or image.shape[2] != 3 or image.dtype != np.uint8:
        raise ValueError("PPM needs an [h, w, 3] uint8 array")
    h, w, _ = image.shape
    Path(path).write_text(_header("P3", w, h, comments) + _body(image, 3 * w))


def read_pnm(path) -> tuple[np.ndarray, list[str]]:
    """Read a plain PGM/PPM written by this module; returns ``(pixels, comments)``."""
    text = Path(path).read_text()
    comments, tokens = [], []
    for line in text.splitlines():
        if line.startswith("#"):
            comments.append(line[1:].strip())
        else:
            tokens += line.split()
    magic = tokens[0]
    if magic not in ("P2", "P3"):
        raise ValueError(f"unsupported PNM type {magic!r}")
    w, h, maxval = int(tokens[1]), int(tokens[2]), int(tokens[3])
    if maxval != 255:
        raise ValueError("expected max value 255")
    data = np.array(tokens[4:], dtype=np.int64)
    shape = (h, w) if magic == "P2" else (h, w, 3)
    if data.size != int(np.prod(shape)):
        raise ValueError("pixel count does not match header")
    return data.reshape(shape).astype(np.uint8), comments


def label_image(labels: np.ndarray) -> np.ndarray:
    """Color a label map with the fixed class palette; negative labels render black."""
    out = np.empty(labels.shape + (3,), np.uint8)
    out[...] = IGNORE_COLOR
    valid = labels >= 0
    out[valid] = PALETTE[labels[valid] % len(PALETTE)]
    return out


def normalized_rgb(bands: np.ndarray) -> np.ndarray:
    """Per-band stretch over ``mean +- 2 std`` (a 4-sigma window) to 8-bit RGB."""
    mu = bands.mean(axis=(0, 1))
    sd = bands.std(axis=(0, 1))
    lo = mu - 2 * sd
    span = np.where(sd > 0, 4 * sd, 1.0)
    u = np.where(sd > 0, (bands - lo) / span, 0.5)
    return quantize(u)


def upscale(image: np.ndarray, factor: int) -> np.ndarray:
    return np.repeat(np.repeat(image, factor, axis=0), factor, axis=1)
