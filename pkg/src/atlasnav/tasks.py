"""The three applications over a trained regressor, plus their metrics.

* Point query: descriptor -> normalized coordinate -> atlas label, with the
  extract+forward wall time measured (the latency-critical path).
* Segmentation by label transfer: query a coarse world-mm grid, look each
  coordinate up in the atlas mask, and fill every voxel from its nearest
  grid point.
* Navigation: fixed-point iteration p <- p + scale * (target - f(p)) moving
  a point until its predicted coordinate matches a target (point matching),
  or p <- p + g(p) following predicted mm displacements (landmarking). With
  a contractive deformation behind f, the iteration error decays
  geometrically, which the oracle tests verify.

An Engine binds model, layout, window, and atlas. OracleEngine exposes the
same coords interface but computes coordinates from a known deformation
field; tasks accept either, so every procedure can be exercised against
exact ground truth.
"""

from __future__ import annotations

import time
from dataclasses import dataclass, field

import numpy as np

from .atlas import Atlas, from_normalized, label_at, labels_at
from .model import (OUTPUT_DISPLACEMENT_MM, IncompatibleModelError,
                    RegressorParams, forward, forward_batch)
from .sampler import (DescriptorLayout, IntensityWindow, _SingleQuerySampler,
                      extract_batch)
from .synth import DeformationField, ground_truth_normalized
from .volume import (LabelVolume, Volume, round_half_away, same_geometry,
                     world_bounds, world_center)


class OutputModeError(ValueError):
    """Model's declared output mode does not fit the requested task."""


def _cached_sampler(v, layout: DescriptorLayout, w: IntensityWindow):
    key = ("sqs", layout.fingerprint(), w)
    got = v._cache.get(key)
    if got is None:
        got = _SingleQuerySampler(v, layout, w)
        v._cache[key] = got
    return got


@dataclass(frozen=True)
class Engine:
    """Immutable bundle of trained params + layout + window + atlas."""

    params: RegressorParams
    layout: DescriptorLayout
    window: IntensityWindow
    atlas: Atlas

    def __post_init__(self):
        if self.params.layout_hash != self.layout.fingerprint():
            raise IncompatibleModelError(
                f"model layout hash {self.params.layout_hash:#018x} does not "
                f"match layout {self.layout.fingerprint():#018x}")

    @property
    def scale_mm(self) -> float:
        return self.atlas.scale_mm

    def coords(self, v: Volume, p) -> np.ndarray:
        """Predicted normalized coordinate of one point (no timing)."""
        d = _cached_sampler(v, self.layout, self.window).extract(p)
        return np.asarray(forward(self.params, d), dtype=np.float64)

    def coords_batch(self, v: Volume, pts: np.ndarray,
                     chunk: int = 2048) -> np.ndarray:
        pts = np.asarray(pts, dtype=np.float64)
        out = np.empty((pts.shape[0], 3), dtype=np.float64)
        for s in range(0, pts.shape[0], chunk):
            desc = extract_batch(v, pts[s:s + chunk], self.layout, self.window)
            out[s:s + chunk] = forward_batch(self.params, desc)
        return out


@dataclass
class OracleEngine:
    """Ground-truth stand-in: coordinates from a known deformation field.

    Bound to one field by default; register() attaches other fields to other
    volumes so cross-volume procedures (matching) stay exact.
    """

    field: DeformationField
    atlas: Atlas
    _by_volume: dict = field(default_factory=dict, repr=False)

    @property
    def scale_mm(self) -> float:
        return self.atlas.scale_mm

    def register(self, v: Volume, f: DeformationField) -> "OracleEngine":
        self._by_volume[id(v)] = f
        return self

    def _field_for(self, v) -> DeformationField:
        return self._by_volume.get(id(v), self.field)

    def coords(self, v: Volume, p) -> np.ndarray:
        return ground_truth_normalized(self.atlas, self._field_for(v), p)

    def coords_batch(self, v: Volume, pts: np.ndarray, chunk: int = 0) -> np.ndarray:
        return ground_truth_normalized(self.atlas, self._field_for(v), pts)


@dataclass(frozen=True)
class QueryResult:
    coord: np.ndarray        # normalized (3,)
    atlas_point: np.ndarray  # world mm (3,)
    label: int
    label_name: str
    latency_us: float


def query(e, v: Volume, p) -> QueryResult:
    """Single-point query; latency covers coordinate prediction only.

    For a model Engine that is descriptor extraction + forward; an oracle
    engine is timed around its closed-form coords call.
    """
    if isinstance(e, Engine):
        sampler = _cached_sampler(v, e.layout, e.window)
        t0 = time.perf_counter()
        d = sampler.extract(p)
        c = forward(e.params, d)
        t1 = time.perf_counter()
    else:
        t0 = time.perf_counter()
        c = e.coords(v, p)
        t1 = time.perf_counter()
    c = np.asarray(c, dtype=np.float64)
    label, name = label_at(e.atlas, c)
    return QueryResult(coord=c, atlas_point=from_normalized(e.atlas, c),
                       label=label, label_name=name,
                       latency_us=(t1 - t0) * 1e6)


def segment(e, v: Volume, grid_mm: float = 3.0) -> LabelVolume:
    """Label transfer over a world-mm query grid with nearest-point fill.

    The grid starts at the volume origin and steps grid_mm per axis; every
    output voxel copies the label of its nearest grid point. Output geometry
    equals the input volume's.
    """
    if grid_mm <= 0:
        raise ValueError(f"grid_mm must be positive, got {grid_mm}")
    nx, ny, nz = v.dims
    origin = np.asarray(v.origin, dtype=np.float64)
    spacing = np.asarray(v.spacing, dtype=np.float64)
    counts = [int(np.floor((n - 1) * s / grid_mm)) + 1 for n, s in zip((nx, ny, nz), spacing)]
    gx = origin[0] + grid_mm * np.arange(counts[0])
    gy = origin[1] + grid_mm * np.arange(counts[1])
    gz = origin[2] + grid_mm * np.arange(counts[2])
    zz, yy, xx = np.meshgrid(gz, gy, gx, indexing="ij")
    pts = np.stack([xx, yy, zz], axis=-1).reshape(-1, 3)

    coords = e.coords_batch(v, pts)
    grid_labels = labels_at(e.atlas, coords).reshape(counts[2], counts[1], counts[0])

    # nearest grid point of voxel center i: round(i * spacing / grid_mm)
    ix = np.clip(round_half_away(np.arange(nx) * spacing[0] / grid_mm), 0,
                 counts[0] - 1).astype(np.intp)
    jy = np.clip(round_half_away(np.arange(ny) * spacing[1] / grid_mm), 0,
                 counts[1] - 1).astype(np.intp)
    kz = np.clip(round_half_away(np.arange(nz) * spacing[2] / grid_mm), 0,
                 counts[2] - 1).astype(np.intp)
    data = grid_labels[np.ix_(kz, jy, ix)]
    return LabelVolume(data=np.ascontiguousarray(data), spacing=tuple(v.spacing),
                       origin=tuple(v.origin))


def dice_micro(pred: LabelVolume, gt: LabelVolume, labels=None) -> float:
    """Micro-average Dice: 2*sum TP / sum(|pred|+|gt|) over nonzero gt labels."""
    if not same_geometry(pred, gt):
        raise ValueError("pred and gt geometry differ")
    if labels is None:
        labels = sorted(int(l) for l in np.unique(gt.data) if l != 0)
    tp = 0
    denom = 0
    for l in labels:
        pm = pred.data == l
        gm = gt.data == l
        tp += int(np.count_nonzero(pm & gm))
        denom += int(np.count_nonzero(pm)) + int(np.count_nonzero(gm))
    if denom == 0:
        return 1.0
    return 2.0 * tp / denom


@dataclass(frozen=True)
class NavigationResult:
    final: np.ndarray        # world mm (3,)
    path: np.ndarray         # (k, 3) world mm, path[0] == start
    iterations: int
    converged: bool


def _clamp(p: np.ndarray, lo: np.ndarray, hi: np.ndarray) -> np.ndarray:
    return np.minimum(np.maximum(p, lo), hi)


def navigate(e, v: Volume, target, start, max_iters: int = 50,
             tol_mm: float = 0.1, damping: float = 1.0) -> NavigationResult:
    """Move a point until its predicted coordinate matches target.

    Update: p <- clamp(p + damping * scale_mm * (target - f(p))), stopping
    when the step norm drops below tol_mm. Non-convergence is a reported
    state, not an error.
    """
    if max_iters < 1:
        raise ValueError("max_iters must be >= 1")
    target = np.asarray(target, dtype=np.float64)
    lo, hi = world_bounds(v)
    p = np.asarray(start, dtype=np.float64).copy()
    path = [p.copy()]
    scale = e.scale_mm
    converged = False
    iterations = 0
    for it in range(1, max_iters + 1):
        c = e.coords(v, p)
        step = damping * scale * (target - c)
        p = _clamp(p + step, lo, hi)
        path.append(p.copy())
        iterations = it
        if float(np.linalg.norm(step)) < tol_mm:
            converged = True
            break
    return NavigationResult(final=p, path=np.asarray(path),
                            iterations=iterations, converged=converged)


def match_point(e, source_vol: Volume, source_point, target_vol: Volume,
                max_iters: int = 50, tol_mm: float = 0.1) -> NavigationResult:
    """Corresponding point: normalize in the source, navigate in the target.

    The search starts at the target volume's center.
    """
    c_star = e.coords(source_vol, np.asarray(source_point, dtype=np.float64))
    return navigate(e, target_vol, c_star, start=world_center(target_vol),
                    max_iters=max_iters, tol_mm=tol_mm)


def sensitivity_at_thresholds(errors_mm, thresholds_mm) -> list[tuple[float, float]]:
    """Empirical CDF of localization errors at each threshold."""
    err = np.asarray(errors_mm, dtype=np.float64)
    if err.size == 0:
        raise ValueError("need at least one error value")
    return [(float(t), float(np.count_nonzero(err <= t) / err.size))
            for t in thresholds_mm]


def navigate_landmark(predictor, v: Volume, start=None, max_iters: int = 50,
                      tol_mm: float = 0.1, damping: float = 1.0,
                      layout: DescriptorLayout | None = None,
                      window: IntensityWindow | None = None) -> NavigationResult:
    """Follow predicted mm displacements to a landmark.

    predictor is either a displacement-mode RegressorParams (layout and
    window required) or a callable p -> displacement mm (the oracle form).
    Start defaults to the volume center.
    """
    if callable(predictor):
        g = predictor
    else:
        params = predictor
        if params.output_mode != OUTPUT_DISPLACEMENT_MM:
            raise OutputModeError(
                f"landmark navigation needs a {OUTPUT_DISPLACEMENT_MM!r} model, "
                f"got {params.output_mode!r}")
        if layout is None or window is None:
            raise ValueError("layout and window are required with model params")
        if params.layout_hash != layout.fingerprint():
            raise IncompatibleModelError(
                f"model layout hash {params.layout_hash:#018x} does not match "
                f"layout {layout.fingerprint():#018x}")
        sampler = _cached_sampler(v, layout, window)

        def g(p):
            return np.asarray(forward(params, sampler.extract(p)), dtype=np.float64)

    if max_iters < 1:
        raise ValueError("max_iters must be >= 1")
    lo, hi = world_bounds(v)
    p = (world_center(v) if start is None
         else np.asarray(start, dtype=np.float64)).copy()
    path = [p.copy()]
    converged = False
    iterations = 0
    for it in range(1, max_iters + 1):
        step = damping * np.asarray(g(p), dtype=np.float64)
        p = _clamp(p + step, lo, hi)
        path.append(p.copy())
        iterations = it
        if float(np.linalg.norm(step)) < tol_mm:
            converged = True
            break
    return NavigationResult(final=p, path=np.asarray(path),
                            iterations=iterations, converged=converged)


def default_agent_starts(v: Volume, offset_mm: float = 25.0) -> np.ndarray:
    """Volume center plus the six axis offsets of +-offset_mm (7 starts)."""
    c = world_center(v)
    starts = [c]
    for axis in range(3):
        for sign in (+1.0, -1.0):
            s = c.copy()
            s[axis] += sign * offset_mm
            starts.append(s)
    return np.asarray(starts)


def multi_agent_landmark(predictor, v: Volume, starts=None, max_iters: int = 50,
                         tol_mm: float = 0.1, damping: float = 1.0,
                         layout: DescriptorLayout | None = None,
                         window: IntensityWindow | None = None
                         ) -> tuple[np.ndarray, list[NavigationResult]]:
    """Landmark navigation from several starts, aggregated by coordinate-wise
    median of the final points (robust to one diverged agent)."""
    if starts is None:
        starts = default_agent_starts(v)
    starts = np.asarray(starts, dtype=np.float64)
    if starts.shape[0] < 1:
        raise ValueError("need at least one start")
    results = [navigate_landmark(predictor, v, start=s, max_iters=max_iters,
                                 tol_mm=tol_mm, damping=damping,
                                 layout=layout, window=window)
               for s in starts]
    finals = np.asarray([r.final for r in results])
    return np.median(finals, axis=0), results


def froc_curve(errors_mm, thresholds_mm=None) -> list[dict]:
    """Sensitivity-vs-threshold table; always includes the 5 and 10 mm points."""
    if thresholds_mm is None:
        thresholds_mm = [1.0, 2.0, 3.0, 4.0, 5.0, 6.0, 8.0, 10.0, 12.0, 15.0, 20.0]
    ts = sorted(set(float(t) for t in thresholds_mm) | {5.0, 10.0})
    return [{"threshold_mm": t, "sensitivity": s}
            for t, s in sensitivity_at_thresholds(errors_mm, ts)]
