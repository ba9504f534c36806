"""Sparse 3.5D descriptor extraction.

A descriptor is a flat vector of window-normalized intensities read by
nearest-neighbor lookup at fixed millimeter offsets around a query point:
three orthogonal 2D plane grids plus a stack of 3D cube grids at multiple
resolutions. Offsets are applied in world mm and converted to voxel indices
through the volume's spacing, so no resampling ever happens and the cost of
one extraction is independent of volume size.

Offset enumeration order is part of the contract (trained weights depend on
it): planes in listed order, then cubes in listed order; within a grid,
lexicographic by (k, j, i) with i fastest; index ranges are symmetric about
zero and a plane grid keeps index 0 along its normal axis.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .volume import round_half_away

#: Descriptor values are float32 vectors of length layout.total_len.
Descriptor = np.ndarray

_AXES = ("x", "y", "z")


@dataclass(frozen=True)
class PlaneGridSpec:
    """2D sampling plane: odd side x side grid, zero offset along normal_axis."""

    normal_axis: str
    side: int
    step_mm: float

    def __post_init__(self):
        if self.normal_axis not in _AXES:
            raise ValueError(f"normal_axis must be one of {_AXES}, got {self.normal_axis!r}")
        if self.side < 1 or self.side % 2 == 0:
            raise ValueError(f"side must be odd and positive, got {self.side}")
        if self.step_mm <= 0:
            raise ValueError(f"step_mm must be positive, got {self.step_mm}")


@dataclass(frozen=True)
class CubeGridSpec:
    """3D sampling cube: odd side^3 grid."""

    side: int
    step_mm: float

    def __post_init__(self):
        if self.side < 1 or self.side % 2 == 0:
            raise ValueError(f"side must be odd and positive, got {self.side}")
        if self.step_mm <= 0:
            raise ValueError(f"step_mm must be positive, got {self.step_mm}")


@dataclass(frozen=True)
class IntensityWindow:
    """Affine intensity normalization window; values clamp to [lo, hi]."""

    lo: float
    hi: float

    def __post_init__(self):
        if not self.lo < self.hi:
            raise ValueError(f"window requires lo < hi, got ({self.lo}, {self.hi})")


#: Default CT-like window.
WINDOW_CT = IntensityWindow(-1024.0, 3071.0)


def _grid_offsets(sizes: tuple[int, int, int], step: float) -> np.ndarray:
    """Offsets of a (sx, sy, sz)-sized grid, (k, j, i) lexicographic, i fastest."""
    axes = [np.arange(-(s - 1) // 2, (s - 1) // 2 + 1, dtype=np.float64) * step
            for s in sizes]
    kk, jj, ii = np.meshgrid(axes[2], axes[1], axes[0], indexing="ij")
    return np.stack([ii, jj, kk], axis=-1).reshape(-1, 3)


@dataclass(frozen=True)
class DescriptorLayout:
    """Ordered list of plane and cube grids defining one descriptor."""

    planes: tuple[PlaneGridSpec, ...]
    cubes: tuple[CubeGridSpec, ...]
    _cache: dict = field(default_factory=dict, repr=False, compare=False)

    @property
    def total_len(self) -> int:
        return (sum(p.side ** 2 for p in self.planes)
                + sum(c.side ** 3 for c in self.cubes))

    def offsets(self) -> np.ndarray:
        """(total_len, 3) mm offsets in enumeration order."""
        cached = self._cache.get("offsets")
        if cached is not None:
            return cached
        parts = []
        for p in self.planes:
            sizes = [p.side, p.side, p.side]
            sizes[_AXES.index(p.normal_axis)] = 1
            parts.append(_grid_offsets(tuple(sizes), p.step_mm))
        for c in self.cubes:
            parts.append(_grid_offsets((c.side, c.side, c.side), c.step_mm))
        offs = np.concatenate(parts, axis=0) if parts else np.zeros((0, 3))
        offs.setflags(write=False)
        self._cache["offsets"] = offs
        return offs

    def canonical_text(self) -> str:
        """Canonical serialized form, one grid per line; hashed for model files."""
        lines = [f"plane {p.normal_axis} {p.side} {p.step_mm:g}" for p in self.planes]
        lines += [f"cube {c.side} {c.step_mm:g}" for c in self.cubes]
        return "\n".join(lines) + "\n"

    def fingerprint(self) -> int:
        """64-bit FNV-1a hash of the canonical text."""
        return fnv1a64(self.canonical_text().encode("utf-8"))


def fnv1a64(data: bytes) -> int:
    h = 0xCBF29CE484222325
    for b in data:
        h ^= b
        h = (h * 0x100000001B3) & 0xFFFFFFFFFFFFFFFF
    return h


def default_layout() -> DescriptorLayout:
    """Three 27x27 planes at 4 mm plus seven 9^3 cubes at 2..64 mm (7290 values).

    Cube steps use a near-geometric, mostly coprime progression so different
    resolutions rarely sample the same voxel twice.
    """
    planes = tuple(PlaneGridSpec(axis, 27, 4.0) for axis in _AXES)
    cubes = tuple(CubeGridSpec(9, s) for s in (2.0, 3.0, 5.0, 8.0, 12.0, 28.0, 64.0))
    return DescriptorLayout(planes=planes, cubes=cubes)


def normalize_intensity(raw, w: IntensityWindow):
    """Clamp raw to [w.lo, w.hi] then rescale to [0, 1]; float32 arithmetic."""
    raw32 = np.asarray(raw, dtype=np.float32)
    lo = np.float32(w.lo)
    scale = np.float32(1.0) / (np.float32(w.hi) - lo)
    out = (np.clip(raw32, lo, np.float32(w.hi)) - lo) * scale
    return np.float32(out) if np.isscalar(raw) or raw32.ndim == 0 else out


def _voxel_offsets(v, layout: DescriptorLayout) -> np.ndarray:
    """Layout offsets pre-divided by this volume's spacing (cached per volume)."""
    key = ("voxoffs", layout.fingerprint())
    cached = v._cache.get(key)
    if cached is None:
        cached = layout.offsets() / np.asarray(v.spacing, dtype=np.float64)
        v._cache[key] = cached
    return cached


def extract(v, p, layout: DescriptorLayout, w: IntensityWindow) -> Descriptor:
    """Descriptor at world point p: nearest-neighbor lookups at p + offsets.

    Pure function of (volume contents, p, layout, w); p may be anywhere,
    including outside the volume (background fill applies).
    """
    return extract_batch(v, np.asarray(p, dtype=np.float64).reshape(1, 3), layout, w)[0]


def extract_batch(v, pts, layout: DescriptorLayout, w: IntensityWindow,
                  chunk: int = 256) -> np.ndarray:
    """Descriptors for an (n, 3) array of world points; returns (n, total_len) float32."""
    pts = np.asarray(pts, dtype=np.float64)
    voxoffs = _voxel_offsets(v, layout)
    nx, ny, nz = v.dims
    flat = v.data.reshape(-1)
    lo = np.float32(w.lo)
    scale = np.float32(1.0) / (np.float32(w.hi) - lo)
    bg = np.float32(v.background)
    out = np.empty((pts.shape[0], voxoffs.shape[0]), dtype=np.float32)
    for start in range(0, pts.shape[0], chunk):
        block = pts[start:start + chunk]
        pvox = (block - np.asarray(v.origin)) / np.asarray(v.spacing)
        idx = round_half_away(pvox[:, None, :] + voxoffs[None, :, :])
        i, j, k = idx[..., 0], idx[..., 1], idx[..., 2]
        inside = (i >= 0) & (i < nx) & (j >= 0) & (j < ny) & (k >= 0) & (k < nz)
        lin = (i + nx * (j + ny * k)).astype(np.intp)
        lin[~inside] = 0
        vals = flat[lin]
        vals[~inside] = bg
        np.clip(vals, lo, np.float32(w.hi), out=vals)
        vals -= lo
        vals *= scale
        out[start:start + chunk] = vals
    return out


class _SingleQuerySampler:
    """Preallocated fast path for one-point extraction (latency-sensitive)."""

    def __init__(self, v, layout: DescriptorLayout, w: IntensityWindow):
        self.voxoffs = _voxel_offsets(v, layout)
        self.flat = v.data.reshape(-1)
        self.dims = v.dims
        self.inv_spacing = 1.0 / np.asarray(v.spacing, dtype=np.float64)
        self.origin = np.asarray(v.origin, dtype=np.float64)
        self.lo = np.float32(w.lo)
        self.scale = np.float32(1.0) / (np.float32(w.hi) - self.lo)
        self.hi = np.float32(w.hi)
        self.bg = np.float32(v.background)

    def extract(self, p) -> Descriptor:
        nx, ny, nz = self.dims
        pvox = (np.asarray(p, dtype=np.float64) - self.origin) * self.inv_spacing
        idx = round_half_away(self.voxoffs + pvox)
        i, j, k = idx[:, 0], idx[:, 1], idx[:, 2]
        inside = (i >= 0) & (i < nx) & (j >= 0) & (j < ny) & (k >= 0) & (k < nz)
        lin = (i + nx * (j + ny * k)).astype(np.intp)
        lin[~inside] = 0
        vals = self.flat[lin]
        vals[~inside] = self.bg
        np.clip(vals, self.lo, self.hi, out=vals)
        vals -= self.lo
        vals *= self.scale
        return vals
