"""Synthetic phantoms and analytically invertible deformations.

This module supplies the ground truth that image registration would normally
provide: every generated subject carries a closed-form backward mapping
psi(y) = y + d(y) from its own world space into atlas world space, where d is
a sum of Gaussian displacement bumps. Training targets and every evaluation
oracle are evaluated from psi exactly, so no registration error exists
anywhere in the pipeline by construction.

The backward (subject -> atlas) field is the primitive because it is exactly
the function the regressor learns; nothing ever needs a field inversion.

Phantoms are stacks of ellipsoids rasterized in painter's order: organs later
in the list overwrite earlier ones, so a containing body ellipsoid is listed
first and interior structures after it ("frontmost" = last listed). Voxels
get the organ intensity (plus seeded Gaussian noise) and the organ label.
"""

from __future__ import annotations

import json
import math
import os
from dataclasses import dataclass, field, replace

import numpy as np
from scipy.ndimage import map_coordinates

from .atlas import Atlas, to_normalized
from .volume import LabelVolume, Volume, load_volume

_SLAB = 8  # z-slices rasterized/warped per step, bounds peak memory on 512^3


class PhantomSpecError(ValueError):
    """Phantom spec violates its invariants (duplicate or zero labels, ...)."""


class FieldGenerationError(ValueError):
    """Requested deformation cannot satisfy the contraction bound."""


@dataclass(frozen=True)
class Organ:
    label: int
    name: str
    center: tuple[float, float, float]     # mm
    semi_axes: tuple[float, float, float]  # mm
    intensity: float
    rot_z_deg: float = 0.0


@dataclass(frozen=True)
class PhantomSpec:
    dims: tuple[int, int, int]
    spacing: tuple[float, float, float]
    organs: tuple[Organ, ...]
    background: float = -1024.0
    reference_name: str = "carina"
    reference_mm: tuple[float, float, float] = (0.0, 0.0, 0.0)
    landmarks: dict[str, tuple[float, float, float]] = field(default_factory=dict)
    noise_sd: float = 0.0
    scale_mm: float = 256.0
    origin: tuple[float, float, float] | None = None  # None -> centered on 0

    def resolved_origin(self) -> tuple[float, float, float]:
        if self.origin is not None:
            return self.origin
        return tuple(-(n - 1) * s / 2.0 for n, s in zip(self.dims, self.spacing))


@dataclass(frozen=True)
class DeformationField:
    """Backward displacement d(y) = sum_i a_i * exp(-|y - c_i|^2 / (2 s_i^2))."""

    centers: np.ndarray      # (n, 3) mm
    amplitudes: np.ndarray   # (n, 3) mm
    sigmas: np.ndarray       # (n,) mm

    def __post_init__(self):
        c = np.asarray(self.centers, dtype=np.float64).reshape(-1, 3)
        a = np.asarray(self.amplitudes, dtype=np.float64).reshape(-1, 3)
        s = np.asarray(self.sigmas, dtype=np.float64).reshape(-1)
        if not (len(c) == len(a) == len(s)):
            raise ValueError("centers, amplitudes, sigmas must have equal length")
        if len(s) and s.min() <= 0:
            raise ValueError("sigmas must be positive")
        for name, arr in (("centers", c), ("amplitudes", a), ("sigmas", s)):
            object.__setattr__(self, name, arr)

    @property
    def n_bumps(self) -> int:
        return self.centers.shape[0]

    @property
    def field_lipschitz(self) -> float:
        """Reported contraction bound: sum |a_i| / (sigma_i * e^{-1/2}).

        Conservative by construction; < 0.5 guarantees psi is invertible and
        that coordinate navigation contracts.
        """
        if self.n_bumps == 0:
            return 0.0
        norms = np.linalg.norm(self.amplitudes, axis=1)
        return float(np.sum(norms / (self.sigmas * math.exp(-0.5))))

    def to_dict(self) -> dict:
        return {"bumps": [
            {"center": [float(x) for x in c],
             "amplitude": [float(x) for x in a],
             "sigma": float(s)}
            for c, a, s in zip(self.centers, self.amplitudes, self.sigmas)]}

    @staticmethod
    def from_dict(d: dict) -> "DeformationField":
        bumps = d.get("bumps", [])
        return DeformationField(
            centers=np.asarray([b["center"] for b in bumps], dtype=np.float64).reshape(-1, 3),
            amplitudes=np.asarray([b["amplitude"] for b in bumps], dtype=np.float64).reshape(-1, 3),
            sigmas=np.asarray([b["sigma"] for b in bumps], dtype=np.float64))


def identity_field() -> DeformationField:
    return DeformationField(centers=np.zeros((0, 3)), amplitudes=np.zeros((0, 3)),
                            sigmas=np.zeros(0))


def displacement(f: DeformationField, y) -> np.ndarray:
    """d(y) for a (3,) point or (n, 3) batch, float64 mm."""
    y = np.asarray(y, dtype=np.float64)
    single = y.ndim == 1
    pts = y.reshape(-1, 3)
    out = np.zeros_like(pts)
    for c, a, s in zip(f.centers, f.amplitudes, f.sigmas):
        r2 = np.sum((pts - c) ** 2, axis=1)
        out += a * np.exp(-r2 / (2.0 * s * s))[:, None]
    return out[0] if single else out


def psi(f: DeformationField, y) -> np.ndarray:
    """Subject world -> atlas world mapping psi(y) = y + d(y)."""
    y = np.asarray(y, dtype=np.float64)
    return y + displacement(f, y)


def ground_truth_normalized(atlas: Atlas, f: DeformationField, pts) -> np.ndarray:
    """Exact normalized coordinate of subject-space point(s)."""
    return to_normalized(atlas, psi(f, pts))


def subject_landmark_position(f: DeformationField, atlas_point, tol: float = 1e-10,
                              max_iters: int = 500) -> np.ndarray:
    """Subject-space point y* with psi(y*) = atlas_point.

    Fixed-point iteration y <- atlas_point - d(y); converges geometrically
    because the generators keep d a contraction.
    """
    target = np.asarray(atlas_point, dtype=np.float64)
    y = target.copy()
    for _ in range(max_iters):
        y_next = target - displacement(f, y)
        if np.linalg.norm(y_next - y) < tol:
            return y_next
        y = y_next
    return y


@dataclass(frozen=True)
class SubjectSample:
    volume: Volume
    field: DeformationField
    id: str


# ---------------------------------------------------------------------------
# Generators

def _world_axes(dims, spacing, origin):
    return [origin[a] + np.arange(dims[a], dtype=np.float64) * spacing[a]
            for a in range(3)]


def make_atlas_phantom(spec: PhantomSpec, seed: int) -> Atlas:
    """Rasterize a PhantomSpec into an Atlas (image + mask + tables)."""
    labels = [o.label for o in spec.organs]
    if len(set(labels)) != len(labels):
        raise PhantomSpecError(f"duplicate organ labels: {sorted(labels)}")
    if any(l <= 0 or l > 255 for l in labels):
        raise PhantomSpecError(f"organ labels must be in [1, 255], got {sorted(labels)}")

    nx, ny, nz = spec.dims
    origin = spec.resolved_origin()
    xs, ys, zs = _world_axes(spec.dims, spec.spacing, origin)
    img = np.full((nz, ny, nx), np.float32(spec.background), dtype=np.float32)
    msk = np.zeros((nz, ny, nx), dtype=np.uint8)

    rots = [(math.cos(math.radians(o.rot_z_deg)), math.sin(math.radians(o.rot_z_deg)))
            for o in spec.organs]
    x_row = xs[None, None, :]
    y_col = ys[None, :, None]
    for z0 in range(0, nz, _SLAB):
        z1 = min(z0 + _SLAB, nz)
        z_sl = zs[z0:z1, None, None]
        for o, (cr, sr) in zip(spec.organs, rots):
            cx, cy, cz = o.center
            ax, ay, az = o.semi_axes
            dx = x_row - cx
            dy = y_col - cy
            u = (cr * dx + sr * dy) / ax
            w = (-sr * dx + cr * dy) / ay
            m = u * u + w * w + ((z_sl - cz) / az) ** 2 <= 1.0
            img[z0:z1][m] = np.float32(o.intensity)
            msk[z0:z1][m] = o.label
    if spec.noise_sd > 0:
        rng = np.random.default_rng(seed)
        img += rng.standard_normal(img.shape, dtype=np.float32) * np.float32(spec.noise_sd)

    image = Volume(data=img, spacing=spec.spacing, origin=origin,
                   background=spec.background, elem_type="MET_FLOAT")
    mask = LabelVolume(data=msk, spacing=spec.spacing, origin=origin)
    return Atlas(image=image, mask=mask,
                 landmarks={n: np.asarray(p, dtype=np.float64)
                            for n, p in spec.landmarks.items()},
                 reference_name=spec.reference_name,
                 reference_point=np.asarray(spec.reference_mm, dtype=np.float64),
                 scale_mm=spec.scale_mm,
                 label_names={o.label: o.name for o in spec.organs})


def make_deformation(seed: int, n_bumps: int, amp_max_mm: float,
                     sigma_range_mm: tuple[float, float],
                     bounds_mm: tuple[tuple[float, float, float],
                                      tuple[float, float, float]],
                     max_rescales: int = 100) -> DeformationField:
    """Seeded random bump field with field_lipschitz forced below 0.5.

    One draw is taken; if it violates the bound, amplitudes shrink by 0.9 per
    rescale. When max_rescales shrinks cannot reach the bound the requested
    amplitude/width combination is impossible and generation fails.
    """
    if n_bumps < 0:
        raise ValueError("n_bumps must be >= 0")
    if n_bumps == 0:
        return identity_field()
    if amp_max_mm <= 0:
        raise ValueError("amp_max_mm must be positive")
    s_lo, s_hi = sigma_range_mm
    if not (0 < s_lo <= s_hi):
        raise ValueError(f"sigma range must satisfy 0 < lo <= hi, got {sigma_range_mm}")
    lo = np.asarray(bounds_mm[0], dtype=np.float64)
    hi = np.asarray(bounds_mm[1], dtype=np.float64)

    rng = np.random.default_rng(seed)
    centers = rng.uniform(lo, hi, size=(n_bumps, 3))
    sigmas = rng.uniform(s_lo, s_hi, size=n_bumps)
    amps = rng.uniform(-amp_max_mm, amp_max_mm, size=(n_bumps, 3))
    f = DeformationField(centers=centers, amplitudes=amps, sigmas=sigmas)
    for _ in range(max_rescales):
        if f.field_lipschitz < 0.5:
            return f
        f = replace(f, amplitudes=f.amplitudes * 0.9)
    if f.field_lipschitz < 0.5:
        return f
    raise FieldGenerationError(
        f"amp_max_mm={amp_max_mm} with sigmas in {sigma_range_mm} cannot reach "
        f"field_lipschitz < 0.5 after {max_rescales} rescales "
        f"(still {f.field_lipschitz:.3g})")


def warp_subject(atlas: Atlas, f: DeformationField, seed: int,
                 subject_id: str | None = None, noise_sd: float = 0.0,
                 dims=None, spacing=None, origin=None) -> SubjectSample:
    """Deformed subject: subject(y) = atlas image at psi(y), plus seeded noise.

    Trilinear interpolation is used here, on the generation side only; the
    query path never resamples. Geometry defaults to the atlas grid.
    """
    src = atlas.image
    dims = tuple(dims) if dims is not None else src.dims
    spacing = tuple(spacing) if spacing is not None else tuple(src.spacing)
    if origin is None:
        origin = tuple(-(n - 1) * s / 2.0 for n, s in zip(dims, spacing)) \
            if dims != src.dims or spacing != tuple(src.spacing) else tuple(src.origin)
    nx, ny, nz = dims
    xs, ys, zs = _world_axes(dims, spacing, origin)
    s_origin = np.asarray(src.origin, dtype=np.float64)
    s_spacing = np.asarray(src.spacing, dtype=np.float64)

    out = np.empty((nz, ny, nx), dtype=np.float32)
    gx, gy = np.meshgrid(xs, ys, indexing="xy")  # (ny, nx) world x / y
    for z0 in range(0, nz, _SLAB):
        z1 = min(z0 + _SLAB, nz)
        m = (z1 - z0) * ny * nx
        pts = np.empty((m, 3), dtype=np.float64)
        pts[:, 0] = np.broadcast_to(gx, (z1 - z0, ny, nx)).reshape(-1)
        pts[:, 1] = np.broadcast_to(gy, (z1 - z0, ny, nx)).reshape(-1)
        pts[:, 2] = np.repeat(zs[z0:z1], ny * nx)
        mapped = psi(f, pts)
        vox = (mapped - s_origin) / s_spacing
        vals = map_coordinates(src.data, [vox[:, 2], vox[:, 1], vox[:, 0]],
                               order=1, mode="constant", cval=src.background,
                               prefilter=False)
        out[z0:z1] = vals.reshape(z1 - z0, ny, nx).astype(np.float32)
    if noise_sd > 0:
        rng = np.random.default_rng(seed)
        out += rng.standard_normal(out.shape, dtype=np.float32) * np.float32(noise_sd)

    vol = Volume(data=out, spacing=spacing, origin=origin,
                 background=src.background, elem_type="MET_FLOAT")
    return SubjectSample(volume=vol, field=f,
                         id=subject_id if subject_id is not None else f"subject-{seed}")


def sample_training_points(s: SubjectSample, atlas: Atlas, n_base: int = 1500,
                           n_perturb: int = 1500, perturb_mm: float = 5.0,
                           seed: int = 0, body_frac: float = 0.8,
                           body_threshold: float | None = None
                           ) -> tuple[np.ndarray, np.ndarray]:
    """Training pairs: subject-space points with exact normalized targets.

    n_base points over the subject bounding box (body_frac of them biased
    into above-threshold voxels, the rest uniform), then n_perturb points
    formed by cycling through the base points and adding uniform offsets in
    [-perturb_mm, perturb_mm]^3. Targets are to_normalized(atlas, psi(p)).
    """
    if n_base < 1:
        raise ValueError("n_base must be >= 1")
    v = s.volume
    rng = np.random.default_rng(seed)
    spacing = np.asarray(v.spacing, dtype=np.float64)
    origin = np.asarray(v.origin, dtype=np.float64)
    nx, ny, nz = v.dims
    box_lo = origin - spacing / 2.0
    box_hi = origin + (np.array([nx, ny, nz]) - 0.5) * spacing

    if body_threshold is None:
        body_threshold = v.background + 100.0
    body_flat = np.flatnonzero(v.voxels > body_threshold)
    n_body = int(round(n_base * body_frac)) if body_flat.size else 0
    n_unif = n_base - n_body

    parts = []
    if n_body:
        picks = body_flat[rng.integers(0, body_flat.size, n_body)]
        kk, rem = np.divmod(picks, nx * ny)
        jj, ii = np.divmod(rem, nx)
        centers = origin + np.stack([ii, jj, kk], axis=1) * spacing
        parts.append(centers + rng.uniform(-0.5, 0.5, (n_body, 3)) * spacing)
    if n_unif:
        parts.append(rng.uniform(box_lo, box_hi, (n_unif, 3)))
    base = np.concatenate(parts, axis=0)

    if n_perturb:
        src = base[np.arange(n_perturb) % n_base]
        pts = np.concatenate(
            [base, src + rng.uniform(-perturb_mm, perturb_mm, (n_perturb, 3))], axis=0)
    else:
        pts = base
    targets = ground_truth_normalized(atlas, s.field, pts)
    return pts, targets


# ---------------------------------------------------------------------------
# Built-in phantom specs

def thorax_spec(dims=(96, 96, 96), spacing=(2.0, 2.0, 2.0),
                noise_sd: float = 0.0) -> PhantomSpec:
    """Thorax-like phantom: body, lungs, airway (carina inside), heart,
    spine, liver, stomach. Deliberately asymmetric so position is decodable
    from local appearance at several scales."""
    organs = (
        Organ(1, "body", (0, 0, 0), (80, 62, 200), 40.0),
        Organ(2, "lung_left", (-40, 2, 12), (30, 40, 68), -800.0),
        Organ(3, "lung_right", (38, -4, 10), (33, 42, 72), -780.0),
        Organ(4, "airway", (0, -16, 42), (9, 9, 53), -950.0),
        Organ(5, "heart", (-14, 16, -8), (28, 25, 30), 90.0, rot_z_deg=20.0),
        Organ(6, "spine", (0, 44, 0), (11, 10, 92), 500.0),
        Organ(7, "liver", (26, 6, -56), (36, 33, 27), 110.0),
        Organ(8, "stomach", (-26, 4, -58), (22, 20, 21), 30.0),
    )
    return PhantomSpec(
        dims=tuple(dims), spacing=tuple(spacing), organs=organs,
        reference_name="carina", reference_mm=(0.0, -16.0, -6.0),
        landmarks={"sternum_notch": (0.0, -54.0, 70.0),
                   "liver_dome": (26.0, 6.0, -32.0)},
        noise_sd=noise_sd)


def ankle_spec(dims=(96, 96, 96), spacing=(2.0, 2.0, 2.0),
               noise_sd: float = 0.0) -> PhantomSpec:
    """Ankle-like phantom for the landmark task: two long bones (the thin
    lateral one carries the target landmark at its tip), talus, calcaneus."""
    organs = (
        Organ(1, "soft_tissue", (0, 0, 10), (46, 46, 82), 40.0),
        Organ(2, "tibia", (-12, 4, 28), (13, 12, 62), 800.0),
        Organ(3, "fibula", (20, -10, 30), (7, 6, 58), 750.0),
        Organ(4, "talus", (-2, -6, -46), (24, 19, 14), 600.0),
        Organ(5, "calcaneus", (0, 22, -58), (18, 22, 17), 550.0),
    )
    return PhantomSpec(
        dims=tuple(dims), spacing=tuple(spacing), organs=organs,
        reference_name="ankle_center", reference_mm=(-2.0, 0.0, -30.0),
        landmarks={"fibula_tip": (20.0, -10.0, -24.0),
                   "tibia_plafond": (-12.0, 4.0, -30.0)},
        noise_sd=noise_sd)


_BUILTIN_SPECS = {"thorax": thorax_spec, "ankle": ankle_spec}


def organ_to_dict(o: Organ) -> dict:
    return {"label": o.label, "name": o.name, "center": list(o.center),
            "semi_axes": list(o.semi_axes), "intensity": o.intensity,
            "rot_z_deg": o.rot_z_deg}


def spec_to_dict(spec: PhantomSpec) -> dict:
    d = {"dims": list(spec.dims), "spacing": list(spec.spacing),
         "organs": [organ_to_dict(o) for o in spec.organs],
         "background": spec.background,
         "reference_name": spec.reference_name,
         "reference_mm": list(spec.reference_mm),
         "landmarks": {n: list(p) for n, p in spec.landmarks.items()},
         "noise_sd": spec.noise_sd, "scale_mm": spec.scale_mm}
    if spec.origin is not None:
        d["origin"] = list(spec.origin)
    return d


def spec_from_dict(d: dict) -> PhantomSpec:
    organs = tuple(Organ(label=int(o["label"]), name=str(o["name"]),
                         center=tuple(o["center"]), semi_axes=tuple(o["semi_axes"]),
                         intensity=float(o["intensity"]),
                         rot_z_deg=float(o.get("rot_z_deg", 0.0)))
                   for o in d["organs"])
    return PhantomSpec(
        dims=tuple(int(x) for x in d["dims"]),
        spacing=tuple(float(x) for x in d["spacing"]),
        organs=organs,
        background=float(d.get("background", -1024.0)),
        reference_name=str(d.get("reference_name", "reference")),
        reference_mm=tuple(float(x) for x in d["reference_mm"]),
        landmarks={str(n): tuple(float(x) for x in p)
                   for n, p in d.get("landmarks", {}).items()},
        noise_sd=float(d.get("noise_sd", 0.0)),
        scale_mm=float(d.get("scale_mm", 256.0)),
        origin=tuple(float(x) for x in d["origin"]) if "origin" in d else None)


def load_spec(ref: str) -> PhantomSpec:
    """PhantomSpec from a builtin name ("thorax", "ankle") or a JSON file."""
    if ref in _BUILTIN_SPECS:
        return _BUILTIN_SPECS[ref]()
    with open(ref, encoding="utf-8") as f:
        return spec_from_dict(json.load(f))


# ---------------------------------------------------------------------------
# Dataset manifest: enough to reload subjects with exact ground truth

def write_manifest(path: str, atlas_dir: str, subjects: list[dict],
                   seed: int, spec: PhantomSpec | None = None) -> None:
    """subjects entries: {id, volume (relative path), seed, noise_sd, role, field}."""
    doc = {"seed": seed, "atlas": atlas_dir, "subjects": subjects}
    if spec is not None:
        doc["spec"] = spec_to_dict(spec)
    with open(path, "w", encoding="utf-8") as f:
        json.dump(doc, f, indent=2, sort_keys=True)
        f.write("\n")


def read_manifest(path: str) -> dict:
    """Manifest with fields parsed and paths resolved against its directory."""
    base = os.path.dirname(os.path.abspath(path))
    with open(path, encoding="utf-8") as f:
        doc = json.load(f)
    doc["atlas"] = os.path.join(base, doc["atlas"])
    for rec in doc["subjects"]:
        rec["volume"] = os.path.join(base, rec["volume"])
        rec["field"] = DeformationField.from_dict(rec["field"])
    return doc


def load_manifest_subjects(doc: dict, role: str | None = None) -> list[SubjectSample]:
    """Load SubjectSamples from a read_manifest result, optionally by role."""
    out = []
    for rec in doc["subjects"]:
        if role is not None and rec.get("role", "train") != role:
            continue
        vol = load_volume(rec["volume"])
        out.append(SubjectSample(volume=vol, field=rec["field"], id=rec["id"]))
    return out
