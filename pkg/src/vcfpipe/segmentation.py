"""Deterministic spine segmentation and sagittal patch extraction.

The pipeline is four pure steps:

1. body mask: per axial slice, threshold above soft-tissue floor, keep
   the largest connected component, fill holes;
2. spinal-cord localization: per axial slice, walk anteriorly from the
   posterior body boundary near the body midline until a bone run (the
   posterior arch), then to the first low-HU gap enclosed by bone (the
   canal); the canal cross-section's centroid is the cord position.
   Undetected slices are interpolated, then the whole track is smoothed;
3. virtual sagittal section: one voxel column per axial slice, read at
   the rounded cord x, producing a curved reformation in which the
   column appears straight regardless of lateral curvature;
4. column segmentation + patch extraction: per sagittal row, find the
   bone run the cord sits behind; its extent gives the column bounds and
   average width, which set the patch window (1.25 w) and stride (0.5 w).
   Windows are resampled to 32 x 32 and display-windowed to [0, 1].

Two HU levels matter throughout: ``bone_hu_threshold`` (default 200)
detects reliably-cortical structures, while ``SUB_BONE_HU`` (100)
separates bone-ish tissue from soft tissue and the canal.  A column
"bone run" is a contiguous stretch at or above SUB_BONE_HU containing at
least one voxel at or above the strong threshold, so that a trabecular
core (mean 150) flanked by cortical shell counts as one run.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, field

import numpy as np
from scipy import ndimage

from .imageops import resample_window, write_pgm
from .volume import Volume

BODY_MASK_HU = -300
SUB_BONE_HU = 100
DEFAULT_BONE_HU_THRESHOLD = 200

# Lateral search half-width (voxels) around the body midline for the
# posterior scan; covers cord offsets from strong lateral curvature.
CORD_SEARCH_HALFWIDTH = 10
MIN_ARCH_RUN = 2
MIN_CANAL_GAP = 2
SMOOTH_WINDOW = 9
MIN_DETECTION_FRACTION = 0.30

HU_WINDOW_LO = -100.0
HU_WINDOW_HI = 1000.0

PATCH_MAGIC = b"VCFP"
PATCH_VERSION = 1
PATCH_HEADER = struct.Struct("<4sHIHH")
LABEL_NEGATIVE = 0
LABEL_POSITIVE = 1
LABEL_UNKNOWN = 255

_CROSS = np.array([[0, 1, 0], [1, 1, 1], [0, 1, 0]], dtype=bool)


class SegmentationError(Exception):
    """A segmentation stage failed; ``stage`` names which one."""

    def __init__(self, stage: str, message: str):
        super().__init__(f"[{stage}] {message}")
        self.stage = stage


@dataclass
class CordLine:
    """Per-axial-slice cord position, defined on [z_start, z_start+n)."""

    z_start: int
    x: np.ndarray  # smoothed cord x per slice, voxels
    y: np.ndarray
    detected: np.ndarray  # bool, True where the canal was found directly

    @property
    def z_stop(self) -> int:
        return self.z_start + len(self.x)

    @property
    def valid_range(self) -> tuple[int, int]:
        return (self.z_start, self.z_stop - 1)

    def validate(self) -> None:
        if len(self.x) == 0:
            raise ValueError("empty cord line")
        if not (np.all(np.isfinite(self.x)) and np.all(np.isfinite(self.y))):
            raise ValueError("cord line contains non-finite values")
        for arr, name in ((self.x, "x"), (self.y, "y")):
            step = np.abs(np.diff(arr))
            if step.size and step.max() > 2.0:
                raise ValueError(f"cord {name} jumps by {step.max():.2f} > 2 voxels")


@dataclass
class SagittalImage:
    """Curved sagittal reformation: rows are z ascending, columns are y.

    ``pixels[i, y]`` is the HU at volume voxel ``(source_x[i], y, z_start+i)``.
    """

    z_start: int
    pixels: np.ndarray  # float32 HU, shape (n_rows, ny)
    x_cord: np.ndarray  # fractional cord x per row
    source_x: np.ndarray  # rounded x actually sampled
    y_cord: np.ndarray


@dataclass
class ColumnSegment:
    """Per-row column bounds in y; NaN outside the detected span."""

    anterior: np.ndarray
    posterior: np.ndarray
    detected: np.ndarray
    average_width_w: float
    column_mask: np.ndarray  # bool, same shape as the sagittal image

    @property
    def extent_rows(self) -> tuple[int, int]:
        rows = np.nonzero(np.isfinite(self.anterior))[0]
        return (int(rows[0]), int(rows[-1]))


@dataclass
class PatchSequence:
    """Ordered 32 x 32 patches along the column, cranial to caudal.

    ``rects`` holds each patch's source rectangle as (z_lo, z_hi, y_lo,
    y_hi) in voxel coordinates of the parent volume; it is None for
    sequences loaded from a patch file, which does not store geometry.
    """

    study_id: str
    patches: np.ndarray  # float32 in [0, 1], shape (n, 32, 32)
    labels: np.ndarray  # uint8: 0, 1, or 255 for unlabeled
    rects: list[tuple[float, float, float, float]] | None = None


@dataclass
class PatchConfig:
    window_scale: float = 1.25
    stride_scale: float = 0.5
    out_size: int = 32
    hu_window: tuple[float, float] = (HU_WINDOW_LO, HU_WINDOW_HI)
    min_fracture_overlap: float = 0.5


def normalize_hu(values: np.ndarray, hu_window: tuple[float, float] = (HU_WINDOW_LO, HU_WINDOW_HI)) -> np.ndarray:
    lo, hi = hu_window
    return ((np.clip(values, lo, hi) - lo) / (hi - lo)).astype(np.float32)


def compute_body_mask(v: Volume) -> np.ndarray:
    """Largest above-air component per axial slice, holes filled."""
    nz = v.nz
    mask = np.zeros_like(v.voxels, dtype=bool)
    above = v.voxels > BODY_MASK_HU
    any_found = False
    for z in range(nz):
        sl = above[z]
        if not sl.any():
            continue
        labels, n = ndimage.label(sl, structure=np.ones((3, 3), dtype=bool))
        if n == 0:
            continue
        sizes = np.bincount(labels.ravel())
        sizes[0] = 0
        largest = sizes.argmax()
        comp = labels == largest
        mask[z] = ndimage.binary_fill_holes(comp)
        any_found = True
    if not any_found:
        raise SegmentationError("body_mask", "no body found")
    return mask


def _scan_ray(hu_col: np.ndarray, body_col: np.ndarray, threshold: float) -> tuple[int, int] | None:
    """Walk anteriorly (decreasing y) along one (z, x) ray.

    Returns the first low-HU gap that lies anterior to a bone run and is
    terminated by bone again, as an inclusive (y_lo, y_hi) interval.
    """
    ys = np.nonzero(body_col)[0]
    if ys.size == 0:
        return None
    y_front, y_back = int(ys[0]), int(ys[-1])

    run = 0
    arch_end = None
    i = y_back
    while i >= y_front:
        if hu_col[i] >= threshold:
            run += 1
        else:
            if run >= MIN_ARCH_RUN:
                arch_end = i
                break
            run = 0
        i -= 1
    if arch_end is None:
        return None

    gap_len = 0
    gap_hi = -1
    i = arch_end
    while i >= y_front:
        if hu_col[i] < SUB_BONE_HU:
            if gap_len == 0:
                gap_hi = i
            gap_len += 1
        else:
            if gap_len >= MIN_CANAL_GAP:
                return (i + 1, gap_hi)
            gap_len = 0
        i -= 1
    return None


def _moving_average_clamped(values: np.ndarray, window: int) -> np.ndarray:
    """Centered moving average whose window shrinks at the ends."""
    half = window // 2
    n = len(values)
    cs = np.concatenate([[0.0], np.cumsum(values)])
    idx = np.arange(n)
    lo = np.maximum(idx - half, 0)
    hi = np.minimum(idx + half, n - 1)
    return (cs[hi + 1] - cs[lo]) / (hi - lo + 1)


def locate_spinal_cord(
    v: Volume,
    bone_hu_threshold: float = DEFAULT_BONE_HU_THRESHOLD,
    search_halfwidth: int = CORD_SEARCH_HALFWIDTH,
) -> CordLine:
    """Find the spinal canal per axial slice and track it along z.

    Slices where no enclosed canal is found are linearly interpolated
    from their detected neighbors, and the full track is smoothed with a
    centered moving average (window of 9 slices, clamped at the ends).
    """
    body = compute_body_mask(v)
    body_slices = [z for z in range(v.nz) if body[z].any()]
    if len(body_slices) < 0.5 * v.nz:
        raise SegmentationError("cord", "body present on fewer than half the slices")

    fill_cap = (v.ny * v.nx) // 20
    offsets = [0]
    for d in range(1, search_halfwidth + 1):
        offsets.extend((-d, d))

    det_z: list[int] = []
    det_x: list[float] = []
    det_y: list[float] = []
    for z in body_slices:
        sl = v.voxels[z]
        bm = body[z]
        x_mid = int(round(np.nonzero(bm)[1].mean()))
        low = None
        for off in offsets:
            x = x_mid + off
            if not 0 <= x < v.nx:
                continue
            gap = _scan_ray(sl[:, x], bm[:, x], bone_hu_threshold)
            if gap is None:
                continue
            if low is None:
                low, _ = ndimage.label(sl < SUB_BONE_HU, structure=_CROSS)
            seed_y = (gap[0] + gap[1]) // 2
            comp = low == low[seed_y, x]
            size = int(comp.sum())
            if size == 0 or size > fill_cap:
                continue
            ys, xs = np.nonzero(comp)
            det_z.append(z)
            det_x.append(float(xs.mean()))
            det_y.append(float(ys.mean()))
            break

    if len(det_z) < MIN_DETECTION_FRACTION * len(body_slices):
        raise SegmentationError("cord", "cord localization failed")

    z0, z1 = det_z[0], det_z[-1]
    zs = np.arange(z0, z1 + 1)
    x_interp = np.interp(zs, det_z, det_x)
    y_interp = np.interp(zs, det_z, det_y)
    detected = np.zeros(len(zs), dtype=bool)
    detected[np.array(det_z) - z0] = True

    cord = CordLine(
        z_start=int(z0),
        x=_moving_average_clamped(x_interp, SMOOTH_WINDOW),
        y=_moving_average_clamped(y_interp, SMOOTH_WINDOW),
        detected=detected,
    )
    cord.validate()
    return cord


def build_virtual_sagittal(v: Volume, cord: CordLine) -> SagittalImage:
    """Read one voxel column per slice at the rounded cord x."""
    src_x = np.clip(np.rint(cord.x).astype(int), 0, v.nx - 1)
    rows = np.arange(cord.z_start, cord.z_stop)
    pixels = v.voxels[rows, :, :][np.arange(len(rows)), :, src_x].astype(np.float32)
    return SagittalImage(
        z_start=cord.z_start,
        pixels=pixels,
        x_cord=cord.x.copy(),
        source_x=src_x,
        y_cord=cord.y.copy(),
    )


def _bone_runs(row: np.ndarray, threshold: float) -> list[tuple[int, int]]:
    """Contiguous >= SUB_BONE stretches (1-voxel holes closed) that
    contain at least one >= threshold voxel."""
    m = row >= SUB_BONE_HU
    # close single-voxel holes so noisy trabecular cores stay one run
    holes = ~m
    holes[1:-1] &= m[:-2] & m[2:]
    m = m | holes if m.any() else m
    if not m.any():
        return []
    padded = np.concatenate([[False], m, [False]])
    edges = np.flatnonzero(padded[1:] != padded[:-1])
    runs = []
    for a, b in zip(edges[::2], edges[1::2] - 1):
        if np.any(row[a : b + 1] >= threshold):
            runs.append((int(a), int(b)))
    return runs


def segment_column(s: SagittalImage, bone_hu_threshold: float = DEFAULT_BONE_HU_THRESHOLD) -> ColumnSegment:
    """Per sagittal row, bound the vertebral-column bone run.

    The run selected is the one containing the cord's y position or,
    failing that, the nearest run anterior to it.  Rows with no run get
    bounds interpolated from detected neighbors.
    """
    n_rows, _ = s.pixels.shape
    anterior = np.full(n_rows, np.nan)
    posterior = np.full(n_rows, np.nan)
    detected = np.zeros(n_rows, dtype=bool)
    widths = []
    for i in range(n_rows):
        runs = _bone_runs(s.pixels[i], bone_hu_threshold)
        if not runs:
            continue
        yc = s.y_cord[i]
        chosen = None
        for a, b in runs:
            if a <= yc <= b:
                chosen = (a, b)
                break
        if chosen is None:
            ahead = [(a, b) for a, b in runs if b < yc]
            if not ahead:
                continue
            chosen = max(ahead, key=lambda r: r[1])
        anterior[i], posterior[i] = float(chosen[0]), float(chosen[1])
        detected[i] = True
        widths.append(chosen[1] - chosen[0] + 1)

    n_det = int(detected.sum())
    if n_det < MIN_DETECTION_FRACTION * n_rows:
        raise SegmentationError("column", "column segmentation failed")

    det_rows = np.nonzero(detected)[0]
    r0, r1 = det_rows[0], det_rows[-1]
    span = np.arange(r0, r1 + 1)
    anterior[span] = np.interp(span, det_rows, anterior[det_rows])
    posterior[span] = np.interp(span, det_rows, posterior[det_rows])

    mask = np.zeros_like(s.pixels, dtype=bool)
    for i in span:
        a = int(round(anterior[i]))
        b = int(round(posterior[i]))
        mask[i, a : b + 1] = True

    return ColumnSegment(
        anterior=anterior,
        posterior=posterior,
        detected=detected,
        average_width_w=float(np.mean(widths)),
        column_mask=mask,
    )


def extract_patches(
    s: SagittalImage,
    col: ColumnSegment,
    config: PatchConfig | None = None,
    ground_truth=None,
    study_id: str = "",
) -> PatchSequence:
    """Cut overlapping square windows along the column, cranial first.

    Window side is ``window_scale * average_width``, stride is
    ``stride_scale * average_width``; the window grid is centered inside
    the column extent so both column ends get equal coverage.  Each
    window is resampled to 32 x 32 (bilinear) and HU-windowed to [0, 1].

    With ground truth available, a patch is labeled positive when its
    source rectangle covers at least half the height of some fractured
    vertebra's bounding box; otherwise labels are 255 (unknown).
    """
    config = config or PatchConfig()
    w = col.average_width_w
    window = config.window_scale * w
    stride = config.stride_scale * w
    r0, r1 = col.extent_rows
    height = r1 - r0 + 1.0
    if height < window:
        raise SegmentationError("patches", "column shorter than one patch window")

    n = int(np.floor((height - window) / stride)) + 1
    leftover = (height - window) - (n - 1) * stride
    top_edge = (r1 + 0.5) - leftover / 2.0

    midline = (col.anterior + col.posterior) / 2.0
    span = np.arange(r0, r1 + 1)

    patches = np.empty((n, config.out_size, config.out_size), dtype=np.float32)
    rects: list[tuple[float, float, float, float]] = []
    labels = np.full(n, LABEL_UNKNOWN, dtype=np.uint8)

    frac_boxes = []
    if ground_truth is not None:
        frac_boxes = [
            box
            for box, is_frac in zip(ground_truth.vertebra_boxes, ground_truth.fracture_labels)
            if is_frac
        ]
        labels[:] = LABEL_NEGATIVE

    for k in range(n):
        row_hi = top_edge - k * stride
        row_lo = row_hi - window
        center = (row_lo + row_hi) / 2.0
        y_mid = float(np.interp(np.clip(center, r0, r1), span, midline[span]))
        y_lo = y_mid - window / 2.0
        y_hi = y_mid + window / 2.0
        raw = resample_window(
            s.pixels, row_lo, row_hi, y_lo, y_hi, config.out_size, config.out_size,
            fill=-1000.0, flip_rows=True,
        )
        patches[k] = normalize_hu(raw, config.hu_window)
        z_lo = s.z_start + row_lo
        z_hi = s.z_start + row_hi
        rects.append((z_lo, z_hi, y_lo, y_hi))
        for bz0, bz1, _, _ in frac_boxes:
            overlap = min(bz1, z_hi) - max(bz0, z_lo)
            if overlap >= config.min_fracture_overlap * (bz1 - bz0):
                labels[k] = LABEL_POSITIVE
                break

    return PatchSequence(study_id=study_id, patches=patches, labels=labels, rects=rects)


def segment_study(
    v: Volume,
    bone_hu_threshold: float = DEFAULT_BONE_HU_THRESHOLD,
    config: PatchConfig | None = None,
    ground_truth=None,
    study_id: str = "",
) -> tuple[CordLine, SagittalImage, ColumnSegment, PatchSequence]:
    """Run the full segmentation pipeline on one volume."""
    cord = locate_spinal_cord(v, bone_hu_threshold)
    sag = build_virtual_sagittal(v, cord)
    col = segment_column(sag, bone_hu_threshold)
    seq = extract_patches(sag, col, config, ground_truth=ground_truth, study_id=study_id)
    return cord, sag, col, seq


def write_patches(path: str, seq: PatchSequence) -> None:
    """Binary patch file: VCFP magic, version, count, patch dims, then
    per patch 32*32 little-endian float32 plus a label byte."""
    n, h, w = seq.patches.shape
    with open(path, "wb") as f:
        f.write(PATCH_HEADER.pack(PATCH_MAGIC, PATCH_VERSION, n, h, w))
        for k in range(n):
            f.write(seq.patches[k].astype("<f4").tobytes())
            f.write(bytes([int(seq.labels[k]), 0, 0, 0]))


def read_patches(path: str, study_id: str = "") -> PatchSequence:
    with open(path, "rb") as f:
        head = f.read(PATCH_HEADER.size)
        if len(head) != PATCH_HEADER.size:
            raise ValueError(f"{path}: truncated patch header")
        magic, version, n, h, w = PATCH_HEADER.unpack(head)
        if magic != PATCH_MAGIC:
            raise ValueError(f"{path}: bad magic {magic!r}")
        if version != PATCH_VERSION:
            raise ValueError(f"{path}: unsupported version {version}")
        patches = np.empty((n, h, w), dtype=np.float32)
        labels = np.empty(n, dtype=np.uint8)
        rec_pixels = h * w * 4
        for k in range(n):
            buf = f.read(rec_pixels + 4)
            if len(buf) != rec_pixels + 4:
                raise ValueError(f"{path}: truncated patch record {k}")
            patches[k] = np.frombuffer(buf[:rec_pixels], dtype="<f4").reshape(h, w)
            labels[k] = buf[rec_pixels]
    return PatchSequence(study_id=study_id, patches=patches, labels=labels, rects=None)


def sagittal_to_pgm(s: SagittalImage, path: str) -> None:
    """Export the reformation bone-windowed, cranial row on top."""
    write_pgm(path, normalize_hu(s.pixels.astype(np.float64))[::-1])
