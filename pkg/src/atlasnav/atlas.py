"""Reference-space semantics: normalized coordinates and atlas lookups.

An Atlas is one labeled reference volume plus a landmark table. Positions are
expressed relative to a named reference point (the carina, the tracheal
bifurcation, for a thorax atlas): normalized = (world − reference)/scale_mm,
so the reference point itself sits at exactly (0, 0, 0). The inverse adds the
offset back. A single isotropic scale (default 256 mm) keeps normalized
values O(1) across a whole-body field of view.

On disk an atlas is a directory: image.mha, mask.mha, atlas.json. The JSON
carries the reference point, scale, landmark table, and label names, so a
bundle is human-inspectable and diffable.
"""

from __future__ import annotations

import json
import os
from dataclasses import dataclass, field

import numpy as np

from .volume import (LabelVolume, Volume, load_label_volume, load_volume,
                     round_half_away, same_geometry, save_volume,
                     world_to_voxel)

DEFAULT_SCALE_MM = 256.0


class MissingLandmarkError(KeyError):
    """Requested landmark name is not in the atlas table."""


class AtlasBundleError(ValueError):
    """Atlas directory is missing files or has inconsistent contents."""


@dataclass(frozen=True)
class Atlas:
    image: Volume
    mask: LabelVolume
    landmarks: dict[str, np.ndarray]     # name -> world mm (3,)
    reference_name: str                  # "carina" for the thorax atlas
    reference_point: np.ndarray          # world mm (3,)
    scale_mm: float = DEFAULT_SCALE_MM
    label_names: dict[int, str] = field(default_factory=dict)

    def __post_init__(self):
        if not same_geometry(self.image, self.mask):
            raise AtlasBundleError("mask geometry differs from image geometry")
        if self.scale_mm <= 0:
            raise AtlasBundleError(f"scale_mm must be positive, got {self.scale_mm}")
        ref = np.asarray(self.reference_point, dtype=np.float64)
        object.__setattr__(self, "reference_point", ref)
        vox = world_to_voxel(self.image, ref)
        nx, ny, nz = self.image.dims
        if not ((-0.5 <= vox[0] < nx - 0.5) and (-0.5 <= vox[1] < ny - 0.5)
                and (-0.5 <= vox[2] < nz - 0.5)):
            raise AtlasBundleError(
                f"reference point {ref.tolist()} lies outside the image")
        marks = {n: np.asarray(p, dtype=np.float64) for n, p in self.landmarks.items()}
        # reference point is always addressable as a landmark of its own name
        marks.setdefault(self.reference_name, ref)
        object.__setattr__(self, "landmarks", marks)
        names = dict(self.label_names)
        names.setdefault(0, "background")
        object.__setattr__(self, "label_names", names)

    def label_name(self, label: int) -> str:
        return self.label_names.get(int(label), f"label {int(label)}")


def to_normalized(a: Atlas, p) -> np.ndarray:
    """(p − reference)/scale, componentwise; accepts (3,) or (n, 3)."""
    p = np.asarray(p, dtype=np.float64)
    return (p - a.reference_point) / a.scale_mm


def from_normalized(a: Atlas, c) -> np.ndarray:
    """reference + c·scale; exact inverse of to_normalized."""
    c = np.asarray(c, dtype=np.float64)
    return a.reference_point + c * a.scale_mm


def label_at(a: Atlas, c) -> tuple[int, str]:
    """Mask label at a normalized coordinate via nearest-voxel lookup.

    Points outside the mask map to label 0 ("background").
    """
    p = from_normalized(a, c)
    idx = round_half_away(world_to_voxel(a.mask, p))
    nx, ny, nz = a.mask.dims
    i, j, k = idx
    if 0 <= i < nx and 0 <= j < ny and 0 <= k < nz:
        label = int(a.mask.data[int(k), int(j), int(i)])
    else:
        label = 0
    return label, a.label_name(label)


def labels_at(a: Atlas, c: np.ndarray) -> np.ndarray:
    """Vectorized label_at over an (n, 3) batch of normalized coords."""
    p = from_normalized(a, c)
    idx = round_half_away(world_to_voxel(a.mask, p))
    nx, ny, nz = a.mask.dims
    i, j, k = idx[:, 0], idx[:, 1], idx[:, 2]
    inside = (i >= 0) & (i < nx) & (j >= 0) & (j < ny) & (k >= 0) & (k < nz)
    out = np.zeros(idx.shape[0], dtype=np.uint8)
    if inside.any():
        out[inside] = a.mask.data[k[inside].astype(np.intp),
                                  j[inside].astype(np.intp),
                                  i[inside].astype(np.intp)]
    return out


def landmark_normalized(a: Atlas, name: str) -> np.ndarray:
    """Normalized coordinate of a named landmark."""
    try:
        mark = a.landmarks[name]
    except KeyError:
        available = ", ".join(sorted(a.landmarks))
        raise MissingLandmarkError(
            f"unknown landmark {name!r}; available: {available}") from None
    return to_normalized(a, mark)


def atlas_metadata(a: Atlas) -> dict:
    """The atlas.json payload as a plain dict."""
    return {
        "reference_point": {"name": a.reference_name,
                            "world_mm": [float(x) for x in a.reference_point]},
        "scale_mm": float(a.scale_mm),
        "landmarks": {n: [float(x) for x in p] for n, p in sorted(a.landmarks.items())},
        "labels": {str(k): v for k, v in sorted(a.label_names.items())},
    }


def save_atlas(a: Atlas, out_dir: str) -> None:
    """Write image.mha, mask.mha, atlas.json into out_dir."""
    os.makedirs(out_dir, exist_ok=True)
    save_volume(a.image, os.path.join(out_dir, "image.mha"))
    save_volume(a.mask, os.path.join(out_dir, "mask.mha"))
    with open(os.path.join(out_dir, "atlas.json"), "w", encoding="utf-8") as f:
        json.dump(atlas_metadata(a), f, indent=2, sort_keys=True)
        f.write("\n")


def load_atlas(bundle_dir: str) -> Atlas:
    """Load an atlas bundle directory written by save_atlas."""
    meta_path = os.path.join(bundle_dir, "atlas.json")
    if not os.path.isfile(meta_path):
        raise AtlasBundleError(f"{bundle_dir}: no atlas.json")
    with open(meta_path, encoding="utf-8") as f:
        meta = json.load(f)
    for key in ("reference_point", "scale_mm", "landmarks", "labels"):
        if key not in meta:
            raise AtlasBundleError(f"{meta_path}: missing key {key!r}")
    image = load_volume(os.path.join(bundle_dir, "image.mha"))
    mask = load_label_volume(os.path.join(bundle_dir, "mask.mha"))
    return Atlas(
        image=image, mask=mask,
        landmarks={n: np.asarray(p, dtype=np.float64)
                   for n, p in meta["landmarks"].items()},
        reference_name=meta["reference_point"]["name"],
        reference_point=np.asarray(meta["reference_point"]["world_mm"], dtype=np.float64),
        scale_mm=float(meta["scale_mm"]),
        label_names={int(k): str(v) for k, v in meta["labels"].items()})
