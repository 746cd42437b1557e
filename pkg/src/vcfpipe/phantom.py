"""Procedural synthetic spine volumes with exact ground truth.

The phantom is a torso-shaped soft-tissue ellipse containing a stack of
elliptic-cylinder vertebral bodies (trabecular core + cortical shell),
separated by soft-tissue discs, with a spinal canal running directly
behind the bodies and a posterior arch ring wrapping the canal from
behind.  The whole column can bow laterally along a sinusoid, and any
vertebra can carry a wedge deformity: its anterior height is reduced by
a fraction ``f`` while the posterior wall stays intact, the vacated
space refilled with soft tissue.

All geometry is computed in millimeters at voxel centers, so anisotropic
spacing is handled uniformly.  Output is deterministic per (spec, seed).
"""

from __future__ import annotations

import json
import math
import os
from dataclasses import dataclass, field

import numpy as np

from .cohort import StudyRecord, write_manifest
from .volume import HU_MAX, HU_MIN, Volume, save_volume

# Tissue class means (HU).
HU_AIR = -1000
HU_SOFT_TISSUE = 40
HU_CANAL = 30
HU_TRABECULAR = 150
HU_CORTICAL = 600
HU_ARCH = 500

TISSUE_MEANS = (HU_AIR, HU_SOFT_TISSUE, HU_CANAL, HU_TRABECULAR, HU_CORTICAL, HU_ARCH)

# Height-loss fractions follow semi-quantitative fracture grading: at or
# above this fraction a vertebra counts as fractured.
FRACTURE_POSITIVE_THRESHOLD = 0.20
MAX_HEIGHT_LOSS = 0.60

MARGIN_VOXELS = 4

# The arch ring wraps the canal from behind; extending it slightly past
# the lateral equator seals the canal's posterolateral corners against
# the vertebral body so the canal stays an enclosed low-HU pocket.
ARCH_EQUATOR_OVERLAP_MM = 3.0

# Posterior-wall fraction of the body depth that a wedge never touches.
WEDGE_POSTERIOR_INTACT = 0.1


class PhantomGeometryError(Exception):
    """Raised when the requested geometry does not fit inside the volume."""


@dataclass
class PhantomSpec:
    dims: tuple[int, int, int] = (96, 96, 192)
    spacing_mm: tuple[float, float, float] = (1.5, 1.5, 1.5)
    vertebra_count: int = 10
    vertebra_height_mm: float = 20.0
    disc_height_mm: float = 6.0
    body_radius_mm: float = 15.0
    canal_radius_mm: float = 5.0
    arch_thickness_mm: float = 3.5
    shell_thickness_mm: float = 1.8
    posterior_gap_mm: float = 9.0
    scoliosis_amplitude_mm: float = 0.0
    scoliosis_period_mm: float = 130.0
    scoliosis_phase_rad: float = 0.0
    fracture_plan: tuple[tuple[int, float], ...] = ()
    noise_sigma_hu: float = 0.0
    seed: int = 0

    def validate(self) -> None:
        nx, ny, nz = self.dims
        sx, sy, sz = self.spacing_mm
        if min(self.dims) < 8:
            raise PhantomGeometryError(f"dims {self.dims} too small")
        if min(self.spacing_mm) <= 0:
            raise PhantomGeometryError(f"non-positive spacing {self.spacing_mm}")
        if self.vertebra_count < 3:
            raise PhantomGeometryError("vertebra_count must be >= 3")
        for idx, f in self.fracture_plan:
            if not 0 <= idx < self.vertebra_count:
                raise PhantomGeometryError(f"fracture index {idx} out of range")
            if not FRACTURE_POSITIVE_THRESHOLD <= f <= MAX_HEIGHT_LOSS:
                raise PhantomGeometryError(
                    f"height-loss fraction {f} outside "
                    f"[{FRACTURE_POSITIVE_THRESHOLD}, {MAX_HEIGHT_LOSS}]"
                )
        g = _geometry(self)
        margin_x = MARGIN_VOXELS * sx
        margin_y = MARGIN_VOXELS * sy
        margin_z = MARGIN_VOXELS * sz
        if g["col_z0"] < margin_z or g["col_z1"] > nz * sz - margin_z:
            raise PhantomGeometryError("column does not fit in z with required margin")
        reach = self.scoliosis_amplitude_mm + max(
            self.body_radius_mm, self.canal_radius_mm + self.arch_thickness_mm
        )
        if g["cx"] - reach < margin_x or g["cx"] + reach > nx * sx - margin_x:
            raise PhantomGeometryError("column does not fit in x with required margin")
        if g["torso_cy"] - g["torso_b"] < margin_y or g["torso_cy"] + g["torso_b"] > ny * sy - margin_y:
            raise PhantomGeometryError("torso does not fit in y with required margin")
        if g["y_body"] - self.body_radius_mm < g["torso_cy"] - g["torso_b"]:
            raise PhantomGeometryError("vertebral body extends outside the torso")


@dataclass
class GroundTruth:
    """Exact geometry of a generated phantom, in voxel coordinates."""

    cord_zs: list[int]
    cord_x: list[float]
    cord_y: list[float]
    vertebra_centers: list[tuple[float, float, float]]
    # Per-vertebra (z_lo, z_hi, y_lo, y_hi) body bounding boxes.
    vertebra_boxes: list[tuple[float, float, float, float]]
    fracture_labels: list[bool]
    height_loss: list[float]
    study_label: bool

    def to_json(self) -> str:
        payload = {
            "cord_zs": self.cord_zs,
            "cord_x": self.cord_x,
            "cord_y": self.cord_y,
            "vertebra_centers": [list(c) for c in self.vertebra_centers],
            "vertebra_boxes": [list(b) for b in self.vertebra_boxes],
            "fracture_labels": [bool(b) for b in self.fracture_labels],
            "height_loss": self.height_loss,
            "study_label": bool(self.study_label),
        }
        return json.dumps(payload, indent=2) + "\n"

    @staticmethod
    def from_json(text: str) -> "GroundTruth":
        d = json.loads(text)
        return GroundTruth(
            cord_zs=[int(z) for z in d["cord_zs"]],
            cord_x=[float(x) for x in d["cord_x"]],
            cord_y=[float(y) for y in d["cord_y"]],
            vertebra_centers=[tuple(c) for c in d["vertebra_centers"]],
            vertebra_boxes=[tuple(b) for b in d["vertebra_boxes"]],
            fracture_labels=[bool(b) for b in d["fracture_labels"]],
            height_loss=[float(h) for h in d["height_loss"]],
            study_label=bool(d["study_label"]),
        )


def _geometry(spec: PhantomSpec) -> dict:
    nx, ny, nz = spec.dims
    sx, sy, sz = spec.spacing_mm
    cx = (nx - 1) / 2.0 * sx
    torso_cy = (ny - 1) / 2.0 * sy
    torso_a = 0.42 * nx * sx
    torso_b = 0.38 * ny * sy
    arch_outer = spec.canal_radius_mm + spec.arch_thickness_mm
    y_back = torso_cy + torso_b
    y_canal = y_back - spec.posterior_gap_mm - arch_outer
    y_body = y_canal - spec.canal_radius_mm - spec.body_radius_mm
    pitch = spec.vertebra_height_mm + spec.disc_height_mm
    total = spec.vertebra_count * spec.vertebra_height_mm + (spec.vertebra_count - 1) * spec.disc_height_mm
    col_z0 = (nz * sz - total) / 2.0
    return {
        "cx": cx,
        "torso_cy": torso_cy,
        "torso_a": torso_a,
        "torso_b": torso_b,
        "arch_outer": arch_outer,
        "y_canal": y_canal,
        "y_body": y_body,
        "pitch": pitch,
        "col_z0": col_z0,
        "col_z1": col_z0 + total,
    }


def _cord_x_mm(spec: PhantomSpec, g: dict, z_mm: np.ndarray) -> np.ndarray:
    phase = 2.0 * math.pi * (z_mm - g["col_z0"]) / spec.scoliosis_period_mm + spec.scoliosis_phase_rad
    return g["cx"] + spec.scoliosis_amplitude_mm * np.sin(phase)


def generate_phantom(spec: PhantomSpec) -> tuple[Volume, GroundTruth]:
    """Paint a phantom volume and return it with its exact ground truth."""
    spec.validate()
    nx, ny, nz = spec.dims
    sx, sy, sz = spec.spacing_mm
    g = _geometry(spec)

    x_mm = np.arange(nx) * sx
    y_mm = np.arange(ny) * sy
    z_mm = np.arange(nz) * sz

    hu = np.full((nz, ny, nx), HU_AIR, dtype=np.float64)

    torso = ((x_mm[None, :] - g["cx"]) / g["torso_a"]) ** 2 + (
        (y_mm[:, None] - g["torso_cy"]) / g["torso_b"]
    ) ** 2 <= 1.0
    hu[:, torso] = HU_SOFT_TISSUE

    col_rows = np.nonzero((z_mm >= g["col_z0"]) & (z_mm < g["col_z1"]))[0]
    z_lo, z_hi = col_rows[0], col_rows[-1] + 1
    xc = _cord_x_mm(spec, g, z_mm[z_lo:z_hi])

    dx = x_mm[None, None, :] - xc[:, None, None]
    dy = (y_mm[:, None] - g["y_canal"])[None, :, :]
    r2 = dx**2 + dy**2
    canal_r2 = spec.canal_radius_mm**2
    arch = (r2 > canal_r2) & (r2 <= g["arch_outer"] ** 2) & (dy >= -ARCH_EQUATOR_OVERLAP_MM)
    sub = hu[z_lo:z_hi]
    sub[arch] = HU_ARCH

    loss = {idx: f for idx, f in spec.fracture_plan}
    st = spec.shell_thickness_mm
    rx = ry = spec.body_radius_mm
    centers: list[tuple[float, float, float]] = []
    boxes: list[tuple[float, float, float, float]] = []
    for i in range(spec.vertebra_count):
        zv0 = g["col_z0"] + i * g["pitch"]
        zv1 = zv0 + spec.vertebra_height_mm
        rows = np.nonzero((z_mm >= zv0) & (z_mm < zv1))[0]
        if rows.size == 0:
            continue
        r0, r1 = rows[0], rows[-1] + 1
        zrel = (z_mm[r0:r1] - zv0)[:, None, None]
        dxv = x_mm[None, None, :] - _cord_x_mm(spec, g, z_mm[r0:r1])[:, None, None]
        dyb = (y_mm[:, None] - g["y_body"])[None, :, :]
        f = loss.get(i, 0.0)
        h = spec.vertebra_height_mm
        if f > 0.0:
            t_ap = np.clip((dyb + ry) / (2.0 * ry), 0.0, 1.0)
            t_eff = np.clip(t_ap / (1.0 - WEDGE_POSTERIOR_INTACT), 0.0, 1.0)
            allowed = h * (1.0 - f * (1.0 - t_eff))
        else:
            allowed = np.full((1, 1, 1), h)
        solid = ((dxv / rx) ** 2 + (dyb / ry) ** 2 <= 1.0) & (zrel < allowed)
        inner = (
            ((dxv / (rx - st)) ** 2 + (dyb / (ry - st)) ** 2 <= 1.0)
            & (zrel >= st)
            & (zrel < allowed - st)
        )
        sub = hu[r0:r1]
        sub[solid & ~inner] = HU_CORTICAL
        sub[solid & inner] = HU_TRABECULAR

        zc = (zv0 + zv1) / 2.0
        centers.append((float(_cord_x_mm(spec, g, np.array([zc]))[0] / sx), g["y_body"] / sy, zc / sz))
        boxes.append((zv0 / sz, zv1 / sz, (g["y_body"] - ry) / sy, (g["y_body"] + ry) / sy))

    canal = r2 <= canal_r2
    hu[z_lo:z_hi][canal] = HU_CANAL

    if spec.noise_sigma_hu > 0:
        rng = np.random.default_rng(spec.seed)
        hu += rng.normal(0.0, spec.noise_sigma_hu, size=hu.shape)

    voxels = np.clip(np.rint(hu), HU_MIN, HU_MAX).astype(np.int16)
    vol = Volume(dims=spec.dims, spacing_mm=spec.spacing_mm, voxels=voxels)

    labels = [loss.get(i, 0.0) >= FRACTURE_POSITIVE_THRESHOLD for i in range(spec.vertebra_count)]
    gt = GroundTruth(
        cord_zs=[int(z) for z in range(z_lo, z_hi)],
        cord_x=[float(v / sx) for v in xc],
        cord_y=[g["y_canal"] / sy] * (z_hi - z_lo),
        vertebra_centers=centers,
        vertebra_boxes=boxes,
        fracture_labels=labels,
        height_loss=[loss.get(i, 0.0) for i in range(spec.vertebra_count)],
        study_label=any(labels),
    )
    return vol, gt


@dataclass
class DemographicModel:
    """Two-class sex/age model, defaults shaped like a screening cohort
    where the fracture-positive class skews older and more female."""

    positive_female_fraction: float = 0.61
    positive_age_f: tuple[float, float] = (73.0, 12.4)
    positive_age_m: tuple[float, float] = (66.8, 16.8)
    negative_female_fraction: float = 0.47
    negative_age_f: tuple[float, float] = (56.7, 17.4)
    negative_age_m: tuple[float, float] = (56.1, 17.9)

    def sample(self, rng: np.random.Generator, positive: bool) -> tuple[str, float]:
        if positive:
            female_frac = self.positive_female_fraction
            age_f, age_m = self.positive_age_f, self.positive_age_m
        else:
            female_frac = self.negative_female_fraction
            age_f, age_m = self.negative_age_f, self.negative_age_m
        sex = "F" if rng.random() < female_frac else "M"
        mean, std = age_f if sex == "F" else age_m
        age = float(np.clip(rng.normal(mean, std), 18.0, 110.0))
        return sex, round(age, 1)


@dataclass
class CohortVariation:
    """Per-study geometry/noise sampling ranges for cohort generation."""

    body_radius_mm: tuple[float, float] = (13.0, 17.0)
    vertebra_height_mm: tuple[float, float] = (18.0, 23.0)
    disc_height_mm: tuple[float, float] = (5.0, 7.0)
    scoliosis_amplitude_mm: tuple[float, float] = (0.0, 8.0)
    scoliosis_period_mm: tuple[float, float] = (100.0, 180.0)
    noise_sigma_hu: tuple[float, float] = (5.0, 25.0)
    height_loss: tuple[float, float] = (0.30, 0.55)
    two_fracture_probability: float = 0.4


def _sample_study_spec(
    rng: np.random.Generator, positive: bool, base: PhantomSpec, var: CohortVariation
) -> PhantomSpec:
    def u(lohi: tuple[float, float]) -> float:
        return float(rng.uniform(*lohi))

    count = base.vertebra_count
    plan: tuple[tuple[int, float], ...] = ()
    if positive:
        n_frac = 2 if rng.random() < var.two_fracture_probability else 1
        idxs = sorted(int(i) for i in rng.choice(count, size=n_frac, replace=False))
        plan = tuple((i, round(u(var.height_loss), 3)) for i in idxs)
    return PhantomSpec(
        dims=base.dims,
        spacing_mm=base.spacing_mm,
        vertebra_count=count,
        vertebra_height_mm=u(var.vertebra_height_mm),
        disc_height_mm=u(var.disc_height_mm),
        body_radius_mm=u(var.body_radius_mm),
        scoliosis_amplitude_mm=u(var.scoliosis_amplitude_mm),
        scoliosis_period_mm=u(var.scoliosis_period_mm),
        scoliosis_phase_rad=u((0.0, 2.0 * math.pi)),
        fracture_plan=plan,
        noise_sigma_hu=u(var.noise_sigma_hu),
        seed=int(rng.integers(0, 2**63)),
    )


def generate_cohort(
    out_dir: str,
    n_studies: int,
    fracture_prevalence: float,
    demographics: DemographicModel | None = None,
    seed: int = 0,
    base_spec: PhantomSpec | None = None,
    variation: CohortVariation | None = None,
    id_prefix: str = "study",
) -> list[StudyRecord]:
    """Generate a labeled study cohort on disk.

    Writes one subdirectory per study (volume pair + ground_truth.json)
    and a manifest.csv at the top.  Fully deterministic per seed.
    """
    if n_studies < 2:
        raise ValueError("n_studies must be >= 2")
    if not 0.0 <= fracture_prevalence <= 1.0:
        raise ValueError("fracture_prevalence must be in [0, 1]")
    demographics = demographics or DemographicModel()
    base = base_spec or PhantomSpec()
    var = variation or CohortVariation()
    os.makedirs(out_dir, exist_ok=True)

    records: list[StudyRecord] = []
    children = np.random.SeedSequence(seed).spawn(n_studies)
    for i, child in enumerate(children):
        rng = np.random.default_rng(child)
        study_id = f"{id_prefix}{i:04d}"
        positive = bool(rng.random() < fracture_prevalence)
        sex, age = demographics.sample(rng, positive)
        spec = _sample_study_spec(rng, positive, base, var)

        study_dir = os.path.join(out_dir, study_id)
        os.makedirs(study_dir, exist_ok=True)
        vol, gt = generate_phantom(spec)
        save_volume(vol, os.path.join(study_dir, "volume"))
        with open(os.path.join(study_dir, "ground_truth.json"), "w", encoding="utf-8") as f:
            f.write(gt.to_json())

        records.append(
            StudyRecord(
                study_id=study_id,
                age=age,
                sex=sex,
                label=1 if positive else 0,
                volume_path=f"{study_id}/volume.vvol.json",
            )
        )

    write_manifest(os.path.join(out_dir, "manifest.csv"), records)
    return records


def load_ground_truth(path: str) -> GroundTruth:
    with open(path, encoding="utf-8") as f:
        return GroundTruth.from_json(f.read())
