"""Small 2D resampling helpers shared by segmentation and augmentation.

Everything here is plain numpy so that outputs are bit-reproducible
across runs with no dependence on external interpolation libraries.
"""

from __future__ import annotations

import numpy as np


def bilinear_sample(image: np.ndarray, rows: np.ndarray, cols: np.ndarray, fill: float) -> np.ndarray:
    """Sample ``image`` at fractional (row, col) positions.

    Positions outside the image support evaluate to ``fill``; positions
    partially outside blend with ``fill`` through the usual bilinear
    weights of an image padded by one fill-valued border.
    """
    img = np.asarray(image, dtype=np.float64)
    h, w = img.shape
    padded = np.full((h + 2, w + 2), float(fill), dtype=np.float64)
    padded[1:-1, 1:-1] = img

    r = np.asarray(rows, dtype=np.float64) + 1.0
    c = np.asarray(cols, dtype=np.float64) + 1.0
    r = np.clip(r, 0.0, h + 1.0 - 1e-9)
    c = np.clip(c, 0.0, w + 1.0 - 1e-9)

    r0 = np.floor(r).astype(np.intp)
    c0 = np.floor(c).astype(np.intp)
    r1 = np.minimum(r0 + 1, h + 1)
    c1 = np.minimum(c0 + 1, w + 1)
    fr = r - r0
    fc = c - c0

    top = padded[r0, c0] * (1.0 - fc) + padded[r0, c1] * fc
    bot = padded[r1, c0] * (1.0 - fc) + padded[r1, c1] * fc
    return top * (1.0 - fr) + bot * fr


def rotate_about_center(image: np.ndarray, angle_degrees: float, fill: float = 0.0) -> np.ndarray:
    """Rotate a 2D image about its center, bilinear, constant fill outside."""
    img = np.asarray(image, dtype=np.float64)
    h, w = img.shape
    cy = (h - 1) / 2.0
    cx = (w - 1) / 2.0
    theta = np.deg2rad(angle_degrees)
    cos_t = np.cos(theta)
    sin_t = np.sin(theta)
    out_r, out_c = np.meshgrid(np.arange(h), np.arange(w), indexing="ij")
    # Inverse map: source coordinates that land on each output pixel.
    dy = out_r - cy
    dx = out_c - cx
    src_r = cos_t * dy + sin_t * dx + cy
    src_c = -sin_t * dy + cos_t * dx + cx
    return bilinear_sample(img, src_r, src_c, fill)


def resample_window(
    image: np.ndarray,
    row_lo: float,
    row_hi: float,
    col_lo: float,
    col_hi: float,
    out_rows: int,
    out_cols: int,
    fill: float,
    flip_rows: bool = False,
) -> np.ndarray:
    """Resample a rectangular window to a fixed output size.

    Output pixel centers are placed uniformly inside the window.  With
    ``flip_rows`` the first output row maps to the high end of the row
    range (used to put cranial at the top of extracted patches).
    """
    rr = row_lo + (np.arange(out_rows) + 0.5) * (row_hi - row_lo) / out_rows
    if flip_rows:
        rr = rr[::-1]
    cc = col_lo + (np.arange(out_cols) + 0.5) * (col_hi - col_lo) / out_cols
    rows, cols = np.meshgrid(rr, cc, indexing="ij")
    return bilinear_sample(image, rows, cols, fill)


def write_pgm(path: str, values01: np.ndarray) -> None:
    """Write a [0, 1] float image as an 8-bit binary PGM file."""
    arr = np.clip(np.asarray(values01, dtype=np.float64), 0.0, 1.0)
    data = np.rint(arr * 255.0).astype(np.uint8)
    h, w = data.shape
    with open(path, "wb") as f:
        f.write(f"P5\n{w} {h}\n255\n".encode("ascii"))
        f.write(data.tobytes())


def read_pgm(path: str) -> np.ndarray:
    """Read an 8-bit binary PGM written by :func:`write_pgm`."""
    with open(path, "rb") as f:
        magic = f.readline().strip()
        if magic != b"P5":
            raise ValueError(f"{path}: not a binary PGM")
        dims = f.readline().split()
        maxval = int(f.readline())
        if maxval != 255:
            raise ValueError(f"{path}: unsupported maxval {maxval}")
        w, h = int(dims[0]), int(dims[1])
        data = np.frombuffer(f.read(w * h), dtype=np.uint8)
    return data.reshape(h, w)
