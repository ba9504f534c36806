"""Axis-aligned voxel volumes: geometry, nearest-neighbor lookup, MetaImage I/O.

All world geometry is in millimeters. A volume is a diagonal affine map from
voxel index space to world space: world = origin + index * spacing, with the
origin at the center of voxel (0, 0, 0). Voxel data is kept as a C-contiguous
(nz, ny, nx) array so the flat (x-fastest) order matches the on-disk layout:
flat index i + nx*(j + ny*k) for voxel (i, j, k).

Out-of-bounds reads are not an error; they return the volume's background
value (air-equivalent fill, -1024 by default for CT-like data).
"""

from __future__ import annotations

import os
import warnings
from dataclasses import dataclass, field

import numpy as np


class VolumeFormatError(ValueError):
    """Malformed or unsupported volume file header."""


class UnsupportedElementTypeError(VolumeFormatError):
    """ElementType outside the supported MET_SHORT / MET_UCHAR / MET_FLOAT set."""


class PayloadSizeError(VolumeFormatError):
    """Raw payload does not hold the number of elements the header declares."""


_ELEMENT_DTYPES = {
    "MET_SHORT": np.dtype("<i2"),
    "MET_UCHAR": np.dtype("u1"),
    "MET_FLOAT": np.dtype("<f4"),
}


@dataclass(frozen=True)
class Volume:
    """Scalar voxel grid with world geometry.

    data is float32 regardless of the file element type (single code path for
    sampling); elem_type remembers the on-disk representation so that a
    save/load round trip is bit-exact.
    """

    data: np.ndarray                       # (nz, ny, nx) float32
    spacing: tuple[float, float, float]    # mm per voxel, (sx, sy, sz)
    origin: tuple[float, float, float]     # world mm of voxel (0,0,0) center
    background: float = -1024.0
    elem_type: str = "MET_FLOAT"
    _cache: dict = field(default_factory=dict, repr=False, compare=False)

    def __post_init__(self):
        if self.data.ndim != 3:
            raise ValueError(f"expected 3D data, got shape {self.data.shape}")
        if any(s <= 0 for s in self.spacing):
            raise ValueError(f"spacing must be positive, got {self.spacing}")

    @property
    def dims(self) -> tuple[int, int, int]:
        """(nx, ny, nz) voxel counts."""
        nz, ny, nx = self.data.shape
        return nx, ny, nz

    @property
    def voxels(self) -> np.ndarray:
        """Flat view in x-fastest order."""
        return self.data.reshape(-1)


@dataclass(frozen=True)
class LabelVolume:
    """Small-integer label grid sharing Volume's geometry; 0 is background."""

    data: np.ndarray                       # (nz, ny, nx) uint8
    spacing: tuple[float, float, float]
    origin: tuple[float, float, float]
    background: float = 0.0
    elem_type: str = "MET_UCHAR"
    _cache: dict = field(default_factory=dict, repr=False, compare=False)

    def __post_init__(self):
        if self.data.ndim != 3:
            raise ValueError(f"expected 3D data, got shape {self.data.shape}")
        if any(s <= 0 for s in self.spacing):
            raise ValueError(f"spacing must be positive, got {self.spacing}")

    @property
    def dims(self) -> tuple[int, int, int]:
        nz, ny, nx = self.data.shape
        return nx, ny, nz

    @property
    def voxels(self) -> np.ndarray:
        return self.data.reshape(-1)


def same_geometry(a, b, tol: float = 0.0) -> bool:
    """True when two volumes share dims, spacing, and origin."""
    if a.dims != b.dims:
        return False
    sa, sb = np.asarray(a.spacing), np.asarray(b.spacing)
    oa, ob = np.asarray(a.origin), np.asarray(b.origin)
    return bool(np.all(np.abs(sa - sb) <= tol) and np.all(np.abs(oa - ob) <= tol))


def world_to_voxel(v, p) -> np.ndarray:
    """Continuous voxel coordinates of world point(s) p; no clamping.

    p may be a single (3,) point or an (n, 3) batch.
    """
    p = np.asarray(p, dtype=np.float64)
    return (p - np.asarray(v.origin)) / np.asarray(v.spacing)


def voxel_to_world(v, i, j=None, k=None) -> np.ndarray:
    """World mm of voxel index (i, j, k); indices may be out of bounds."""
    if j is None:
        idx = np.asarray(i, dtype=np.float64)
    else:
        idx = np.asarray([i, j, k], dtype=np.float64)
    return np.asarray(v.origin) + idx * np.asarray(v.spacing)


def world_bounds(v) -> tuple[np.ndarray, np.ndarray]:
    """(lo, hi) world mm of the first and last voxel centers."""
    o = np.asarray(v.origin, dtype=np.float64)
    return o, o + (np.asarray(v.dims, dtype=np.float64) - 1) * np.asarray(v.spacing)


def world_center(v) -> np.ndarray:
    """World mm midpoint of the voxel-center bounding box."""
    lo, hi = world_bounds(v)
    return (lo + hi) / 2.0


def round_half_away(x: np.ndarray) -> np.ndarray:
    """Round half away from zero (0.5 -> 1, -0.5 -> -1)."""
    x = np.asarray(x, dtype=np.float64)
    return np.trunc(x + np.copysign(0.5, x))


def sample_nearest(v, p):
    """Nearest-voxel intensity at world point(s) p; background when out of bounds.

    Continuous voxel coordinates are rounded half-away-from-zero to the
    nearest integer index. Accepts a (3,) point (returns a scalar) or an
    (n, 3) batch (returns (n,)).
    """
    p = np.asarray(p, dtype=np.float64)
    single = p.ndim == 1
    idx = round_half_away(world_to_voxel(v, p.reshape(-1, 3)))
    nx, ny, nz = v.dims
    i, j, k = idx[:, 0], idx[:, 1], idx[:, 2]
    inside = (i >= 0) & (i < nx) & (j >= 0) & (j < ny) & (k >= 0) & (k < nz)
    out = np.full(idx.shape[0], v.background, dtype=np.float64)
    if inside.any():
        ii = i[inside].astype(np.intp)
        jj = j[inside].astype(np.intp)
        kk = k[inside].astype(np.intp)
        out[inside] = v.data[kk, jj, ii]
    return float(out[0]) if single else out


# ---------------------------------------------------------------------------
# MetaImage subset I/O (.mha single file, .mhd + raw pair)

_REQUIRED_KEYS = ("ObjectType", "NDims", "DimSize", "ElementSpacing", "Offset",
                  "ElementType", "ElementDataFile")
_KNOWN_KEYS = set(_REQUIRED_KEYS) | {
    "BinaryData", "BinaryDataByteOrderMSB", "CompressedData",
    "TransformMatrix", "CenterOfRotation", "AnatomicalOrientation",
    "HeaderSize",
}


def _parse_header(raw: bytes, source: str):
    """Parse ASCII `Key = Value` lines up to ElementDataFile.

    Returns (header dict, payload offset in bytes).
    """
    header: dict[str, str] = {}
    pos = 0
    while True:
        nl = raw.find(b"\n", pos)
        if nl < 0:
            raise VolumeFormatError(f"{source}: header ended without ElementDataFile")
        line = raw[pos:nl].decode("ascii", errors="replace").strip()
        pos = nl + 1
        if not line:
            continue
        if "=" not in line:
            raise VolumeFormatError(f"{source}: malformed header line {line!r}")
        key, value = (part.strip() for part in line.split("=", 1))
        header[key] = value
        if key == "ElementDataFile":
            return header, pos


def _header_int_triple(header: dict, key: str, source: str) -> tuple[int, int, int]:
    try:
        parts = tuple(int(x) for x in header[key].split())
    except ValueError:
        raise VolumeFormatError(f"{source}: cannot parse {key} = {header[key]!r}")
    if len(parts) != 3:
        raise VolumeFormatError(f"{source}: {key} must have 3 entries, got {header[key]!r}")
    return parts


def _header_float_triple(header: dict, key: str, source: str) -> tuple[float, float, float]:
    try:
        parts = tuple(float(x) for x in header[key].split())
    except ValueError:
        raise VolumeFormatError(f"{source}: cannot parse {key} = {header[key]!r}")
    if len(parts) != 3:
        raise VolumeFormatError(f"{source}: {key} must have 3 entries, got {header[key]!r}")
    return parts


def _validate_header(header: dict, source: str):
    for key in _REQUIRED_KEYS:
        if key not in header:
            raise VolumeFormatError(f"{source}: missing required key {key}")
    if header["ObjectType"] != "Image":
        raise VolumeFormatError(f"{source}: ObjectType must be Image, got {header['ObjectType']!r}")
    if header["NDims"] != "3":
        raise VolumeFormatError(f"{source}: NDims must be 3, got {header['NDims']!r}")
    if header.get("CompressedData", "False").lower() == "true":
        raise VolumeFormatError(f"{source}: CompressedData is not supported")
    if header.get("BinaryDataByteOrderMSB", "False").lower() == "true":
        raise VolumeFormatError(f"{source}: BinaryDataByteOrderMSB (big-endian) is not supported")
    if header["ElementType"] not in _ELEMENT_DTYPES:
        raise UnsupportedElementTypeError(
            f"{source}: ElementType {header['ElementType']!r} not supported "
            f"(supported: {', '.join(sorted(_ELEMENT_DTYPES))})")
    unknown = set(header) - _KNOWN_KEYS
    if unknown:
        warnings.warn(f"{source}: ignoring unknown header keys {sorted(unknown)}")


def _decode(raw: bytes, source: str, base_dir: str | None):
    header, payload_at = _parse_header(raw, source)
    _validate_header(header, source)
    dims = _header_int_triple(header, "DimSize", source)
    spacing = _header_float_triple(header, "ElementSpacing", source)
    origin = _header_float_triple(header, "Offset", source)
    dtype = _ELEMENT_DTYPES[header["ElementType"]]

    data_file = header["ElementDataFile"]
    if data_file == "LOCAL":
        payload = raw[payload_at:]
    else:
        if base_dir is None:
            raise VolumeFormatError(f"{source}: ElementDataFile refers to a file "
                                    "but no base directory is available")
        with open(os.path.join(base_dir, data_file), "rb") as f:
            payload = f.read()

    n_expected = dims[0] * dims[1] * dims[2]
    n_have = len(payload) // dtype.itemsize
    if n_have != n_expected or len(payload) % dtype.itemsize:
        raise PayloadSizeError(
            f"{source}: payload holds {n_have} elements but DimSize "
            f"{dims[0]} {dims[1]} {dims[2]} requires {n_expected}")
    arr = np.frombuffer(payload[:n_expected * dtype.itemsize], dtype=dtype)
    arr = arr.reshape(dims[2], dims[1], dims[0])  # x-fastest on disk
    return arr, dims, spacing, origin, header["ElementType"]


def volume_from_bytes(raw: bytes, source: str = "<bytes>", base_dir: str | None = None,
                      background: float = -1024.0) -> Volume:
    """Decode a MetaImage buffer into a Volume (float32 voxels)."""
    arr, _, spacing, origin, elem = _decode(raw, source, base_dir)
    return Volume(data=np.ascontiguousarray(arr, dtype=np.float32),
                  spacing=spacing, origin=origin,
                  background=background, elem_type=elem)


def load_volume(path: str, background: float = -1024.0) -> Volume:
    """Load a .mha or .mhd volume as float32."""
    with open(path, "rb") as f:
        raw = f.read()
    return volume_from_bytes(raw, source=str(path), base_dir=os.path.dirname(path) or ".",
                             background=background)


def load_label_volume(path: str) -> LabelVolume:
    """Load a label mask; element values must fit in [0, 255]."""
    with open(path, "rb") as f:
        raw = f.read()
    arr, _, spacing, origin, elem = _decode(raw, str(path), os.path.dirname(path) or ".")
    if arr.min() < 0 or arr.max() > 255:
        raise VolumeFormatError(f"{path}: label values outside [0, 255]")
    return LabelVolume(data=np.ascontiguousarray(arr, dtype=np.uint8),
                       spacing=spacing, origin=origin, elem_type="MET_UCHAR")


def save_volume(v, path: str) -> None:
    """Write a Volume or LabelVolume as .mha (LOCAL payload) or .mhd + .raw."""
    elem = v.elem_type
    if elem not in _ELEMENT_DTYPES:
        raise UnsupportedElementTypeError(f"cannot write ElementType {elem!r}")
    dtype = _ELEMENT_DTYPES[elem]
    nx, ny, nz = v.dims
    pair = str(path).endswith(".mhd")
    data_file = os.path.splitext(os.path.basename(path))[0] + ".raw" if pair else "LOCAL"
    header = (
        "ObjectType = Image\n"
        "NDims = 3\n"
        "BinaryData = True\n"
        "BinaryDataByteOrderMSB = False\n"
        "CompressedData = False\n"
        f"DimSize = {nx} {ny} {nz}\n"
        f"ElementSpacing = {v.spacing[0]:.17g} {v.spacing[1]:.17g} {v.spacing[2]:.17g}\n"
        f"Offset = {v.origin[0]:.17g} {v.origin[1]:.17g} {v.origin[2]:.17g}\n"
        f"ElementType = {elem}\n"
        f"ElementDataFile = {data_file}\n"
    )
    payload = np.ascontiguousarray(v.data, dtype=dtype).tobytes()
    if pair:
        with open(path, "w", encoding="ascii") as f:
            f.write(header)
        with open(os.path.join(os.path.dirname(path) or ".", data_file), "wb") as f:
            f.write(payload)
    else:
        with open(path, "wb") as f:
            f.write(header.encode("ascii"))
            f.write(payload)
