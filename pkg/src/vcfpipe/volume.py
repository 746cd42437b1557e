"""Volumetric scan data model and raw file I/O.

A volume is a dense 3D grid of Hounsfield Unit values with a fixed,
orientation-matrix-free axis convention:

    x : subject left -> right
    y : anterior -> posterior (larger y is the subject's back)
    z : caudal -> cranial (larger z is toward the head)

Voxels are stored in a numpy array of shape ``(nz, ny, nx)`` so that the
C-contiguous byte order is exactly the on-disk order: x fastest, then y,
then z.  On disk a volume is a pair of files sharing a stem:

    <name>.vvol.json   header (dims, spacing, dtype, element order)
    <name>.vvol.raw    little-endian int16 HU values
"""

from __future__ import annotations

import json
import os
from dataclasses import dataclass

import numpy as np

HU_MIN = -1024
HU_MAX = 3071
MIN_DIM = 8

HEADER_SUFFIX = ".vvol.json"
RAW_SUFFIX = ".vvol.raw"

PLANES = ("axial", "coronal", "sagittal")


class VolumeFormatError(Exception):
    """Raised for malformed volume files or invariant-violating volumes."""


@dataclass
class Volume:
    """In-memory HU volume.

    dims is (nx, ny, nz); spacing_mm is (sx, sy, sz) in millimeters per
    voxel; voxels is an int16 array of shape (nz, ny, nx), indexed
    ``voxels[z, y, x]``.
    """

    dims: tuple[int, int, int]
    spacing_mm: tuple[float, float, float]
    voxels: np.ndarray

    def validate(self) -> None:
        nx, ny, nz = self.dims
        if min(nx, ny, nz) < MIN_DIM:
            raise VolumeFormatError(f"dims {self.dims} below minimum {MIN_DIM}")
        if min(self.spacing_mm) <= 0:
            raise VolumeFormatError(f"non-positive spacing {self.spacing_mm}")
        if self.voxels.shape != (nz, ny, nx):
            raise VolumeFormatError(
                f"voxel array shape {self.voxels.shape} does not match dims {self.dims}"
            )
        if self.voxels.dtype != np.int16:
            raise VolumeFormatError(f"voxel dtype {self.voxels.dtype} is not int16")
        lo = int(self.voxels.min())
        hi = int(self.voxels.max())
        if lo < HU_MIN or hi > HU_MAX:
            raise VolumeFormatError(f"HU range [{lo}, {hi}] outside [{HU_MIN}, {HU_MAX}]")

    @property
    def nx(self) -> int:
        return self.dims[0]

    @property
    def ny(self) -> int:
        return self.dims[1]

    @property
    def nz(self) -> int:
        return self.dims[2]


@dataclass
class SliceView:
    """A single 2D plane through a volume.

    Row/column order by plane (rows = z ascending where z is free):

        axial    (z fixed): pixels[y, x]
        coronal  (y fixed): pixels[z, x]
        sagittal (x fixed): pixels[z, y]
    """

    plane: str
    index: int
    pixels: np.ndarray


def _stem(path: str | os.PathLike) -> str:
    """Accept the bare stem, the header path, or the raw path."""
    p = str(path)
    for suffix in (HEADER_SUFFIX, RAW_SUFFIX):
        if p.endswith(suffix):
            return p[: -len(suffix)]
    return p


def save_volume(v: Volume, path: str | os.PathLike) -> None:
    """Write ``<stem>.vvol.json`` and ``<stem>.vvol.raw``.

    Output bytes are a pure function of the volume contents.
    """
    v.validate()
    stem = _stem(path)
    header = {
        "version": 1,
        "dims": list(v.dims),
        "spacing_mm": [float(s) for s in v.spacing_mm],
        "dtype": "int16le",
        "order": "x-fastest",
    }
    header_bytes = (json.dumps(header, separators=(",", ":")) + "\n").encode("utf-8")
    raw = np.ascontiguousarray(v.voxels, dtype="<i2").tobytes()
    with open(stem + HEADER_SUFFIX, "wb") as f:
        f.write(header_bytes)
    with open(stem + RAW_SUFFIX, "wb") as f:
        f.write(raw)


def load_volume(path: str | os.PathLike) -> Volume:
    """Read a volume written by :func:`save_volume`.

    Round-trips bit-exactly: ``load_volume(save_volume(v)) == v``.
    """
    stem = _stem(path)
    header_path = stem + HEADER_SUFFIX
    raw_path = stem + RAW_SUFFIX
    if not os.path.exists(header_path):
        raise VolumeFormatError(f"missing header file {header_path}")
    if not os.path.exists(raw_path):
        raise VolumeFormatError(f"missing raw file {raw_path}")
    with open(header_path, "rb") as f:
        try:
            header = json.loads(f.read().decode("utf-8"))
        except (json.JSONDecodeError, UnicodeDecodeError) as e:
            raise VolumeFormatError(f"unparseable header {header_path}: {e}") from e
    for key in ("version", "dims", "spacing_mm", "dtype", "order"):
        if key not in header:
            raise VolumeFormatError(f"header missing field {key!r}")
    if header["version"] != 1:
        raise VolumeFormatError(f"unsupported version {header['version']}")
    if header["dtype"] != "int16le" or header["order"] != "x-fastest":
        raise VolumeFormatError("unsupported dtype or element order")
    dims = tuple(int(d) for d in header["dims"])
    spacing = tuple(float(s) for s in header["spacing_mm"])
    if len(dims) != 3 or len(spacing) != 3:
        raise VolumeFormatError("dims and spacing_mm must have 3 entries")
    nx, ny, nz = dims
    if min(dims) < MIN_DIM:
        raise VolumeFormatError(f"dims {dims} below minimum {MIN_DIM}")
    if min(spacing) <= 0:
        raise VolumeFormatError(f"non-positive spacing {spacing}")
    expected = nx * ny * nz * 2
    actual = os.path.getsize(raw_path)
    if actual != expected:
        raise VolumeFormatError(
            f"raw size mismatch: header implies {expected} bytes, file has {actual}"
        )
    data = np.fromfile(raw_path, dtype="<i2").astype(np.int16).reshape(nz, ny, nx)
    v = Volume(dims=dims, spacing_mm=spacing, voxels=data)
    v.validate()
    return v


def slice_view(v: Volume, plane: str, index: int) -> SliceView:
    """Extract one axial/coronal/sagittal slice as a copy."""
    if plane not in PLANES:
        raise ValueError(f"unknown plane {plane!r}, expected one of {PLANES}")
    nx, ny, nz = v.dims
    extent = {"axial": nz, "coronal": ny, "sagittal": nx}[plane]
    if not 0 <= index < extent:
        raise IndexError(f"{plane} index {index} out of range [0, {extent})")
    if plane == "axial":
        pixels = v.voxels[index, :, :].copy()
    elif plane == "coronal":
        pixels = v.voxels[:, index, :].copy()
    else:
        pixels = v.voxels[:, :, index].copy()
    return SliceView(plane=plane, index=index, pixels=pixels)
