"""Sparse descriptor pattern: offset enumeration, windowing, extraction."""

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from atlasnav.sampler import (CubeGridSpec, DescriptorLayout, IntensityWindow,
                              PlaneGridSpec, WINDOW_CT, _SingleQuerySampler,
                              default_layout, extract, extract_batch, fnv1a64,
                              normalize_intensity)
from atlasnav.volume import Volume

DEFAULT_FINGERPRINT = 0xBBCB297775F198E0


def vol(dims=(10, 10, 10), spacing=(4.0, 4.0, 4.0), origin=None, seed=0):
    nx, ny, nz = dims
    if origin is None:
        origin = tuple(-(n - 1) * s / 2 for n, s in zip(dims, spacing))
    data = np.random.default_rng(seed).uniform(-1000, 2000,
                                               size=(nz, ny, nx)).astype(np.float32)
    return Volume(data=data, spacing=spacing, origin=origin)


# ---------------------------------------------------------------------------
# Default layout

def test_default_layout_shape():
    lay = default_layout()
    assert lay.total_len == 7290
    assert len(lay.planes) == 3 and len(lay.cubes) == 7
    assert [p.normal_axis for p in lay.planes] == ["x", "y", "z"]
    assert all(p.side == 27 and p.step_mm == 4.0 for p in lay.planes)
    assert [c.step_mm for c in lay.cubes] == [2, 3, 5, 8, 12, 28, 64]
    assert all(c.side == 9 for c in lay.cubes)


def test_default_fingerprint_frozen():
    assert default_layout().fingerprint() == DEFAULT_FINGERPRINT


def test_fnv1a64_reference_values():
    assert fnv1a64(b"") == 0xCBF29CE484222325
    assert fnv1a64(b"a") == 0xAF63DC4C8601EC8C


def test_fingerprint_is_fnv_of_canonical_text():
    lay = DescriptorLayout(planes=(PlaneGridSpec("y", 3, 1.5),),
                           cubes=(CubeGridSpec(5, 2.0),))
    text = lay.canonical_text()
    assert text == "plane y 3 1.5\ncube 5 2\n"
    # independent FNV-1a transcription
    h = 0xCBF29CE484222325
    for b in text.encode():
        h = ((h ^ b) * 0x100000001B3) & 0xFFFFFFFFFFFFFFFF
    assert lay.fingerprint() == h


def test_fingerprint_sensitive_to_every_field():
    base = DescriptorLayout(planes=(PlaneGridSpec("x", 3, 2.0),),
                            cubes=(CubeGridSpec(3, 3.0),))
    variants = [
        DescriptorLayout(planes=(PlaneGridSpec("y", 3, 2.0),), cubes=base.cubes),
        DescriptorLayout(planes=(PlaneGridSpec("x", 5, 2.0),), cubes=base.cubes),
        DescriptorLayout(planes=(PlaneGridSpec("x", 3, 2.5),), cubes=base.cubes),
        DescriptorLayout(planes=base.planes, cubes=(CubeGridSpec(5, 3.0),)),
        DescriptorLayout(planes=base.planes, cubes=(CubeGridSpec(3, 4.0),)),
    ]
    prints = {v.fingerprint() for v in variants}
    assert base.fingerprint() not in prints
    assert len(prints) == len(variants)


def test_sides_must_be_odd():
    with pytest.raises(ValueError):
        PlaneGridSpec("x", 4, 2.0)
    with pytest.raises(ValueError):
        CubeGridSpec(8, 2.0)


# ---------------------------------------------------------------------------
# Offsets

def test_offset_count_matches_total_len():
    lay = default_layout()
    assert lay.offsets().shape == (7290, 3)


def test_offset_goldens():
    offs = default_layout().offsets()
    assert np.array_equal(offs[0], [0, -52, -52])        # x plane, first
    assert np.array_equal(offs[1458], [-52, -52, 0])     # z plane, first
    assert np.array_equal(offs[6561], [-256, -256, -256])  # 64 mm cube, first
    assert np.array_equal(offs[-1], [256, 256, 256])
    assert np.array_equal(offs[364], [0, 0, 0])          # center of first grid


def test_every_grid_centered_and_symmetric():
    lay = default_layout()
    offs = lay.offsets()
    start = 0
    for n in [729] * 3 + [729] * 7:
        grid = offs[start:start + n]
        assert np.array_equal(grid[(n - 1) // 2], [0, 0, 0])
        assert np.array_equal(grid, -grid[::-1])
        start += n
    assert start == lay.total_len


def test_plane_grids_zero_along_normal():
    lay = default_layout()
    offs = lay.offsets()
    for g, axis in enumerate([0, 1, 2]):
        grid = offs[g * 729:(g + 1) * 729]
        assert np.all(grid[:, axis] == 0)


def test_max_offset_equals_half_span():
    lay = default_layout()
    offs = lay.offsets()
    spans = [(13 * 4.0, g * 729) for g in range(3)]
    spans += [(4 * s, 2187 + n * 729) for n, s in enumerate([2, 3, 5, 8, 12, 28, 64])]
    for span, start in spans:
        assert np.abs(offs[start:start + 729]).max() == span


def test_offset_order_i_fastest():
    lay = DescriptorLayout(planes=(), cubes=(CubeGridSpec(3, 2.0),))
    offs = lay.offsets()
    expect = [(2 * i, 2 * j, 2 * k)
              for k in (-1, 0, 1) for j in (-1, 0, 1) for i in (-1, 0, 1)]
    assert np.array_equal(offs, np.asarray(expect, dtype=float))


# ---------------------------------------------------------------------------
# Intensity window

def test_normalize_examples():
    w = IntensityWindow(-1024.0, 3071.0)
    assert normalize_intensity(-1024.0, w) == 0.0
    assert normalize_intensity(3071.0 + 1000.0, w) == 1.0
    assert normalize_intensity(1023.5, w) == 0.5
    assert normalize_intensity(-5000.0, w) == 0.0


def test_window_requires_ordered_bounds():
    with pytest.raises(ValueError):
        IntensityWindow(3.0, 3.0)


# ---------------------------------------------------------------------------
# Extraction

def test_extract_length_and_dtype(tiny_layout, ct_window):
    d = extract(vol(), (0, 0, 0), tiny_layout, ct_window)
    assert d.shape == (36,)
    assert d.dtype == np.float32
    assert np.all(np.isfinite(d)) and np.all((d >= 0) & (d <= 1))


def test_extract_constant_volume(tiny_layout, ct_window):
    v = vol()
    v.data[:] = 1023.5
    d = extract(v, (3.3, -2.0, 1.0), tiny_layout, ct_window)
    assert np.all(d == np.float32(0.5))


def test_extract_far_outside_is_background_fill(tiny_layout, ct_window):
    d = extract(vol(), (1e5, 1e5, 1e5), tiny_layout, ct_window)
    assert np.all(d == normalize_intensity(-1024.0, ct_window))


def test_extract_matches_manual_lookup(tiny_layout, ct_window):
    from atlasnav.volume import sample_nearest
    v = vol(seed=4)
    p = np.asarray([1.7, -3.1, 5.2])
    d = extract(v, p, tiny_layout, ct_window)
    expect = [normalize_intensity(sample_nearest(v, p + o), ct_window)
              for o in tiny_layout.offsets()]
    assert np.allclose(d, np.asarray(expect, dtype=np.float32), rtol=0, atol=0)


def test_translation_equivariance_exact(tiny_layout, ct_window):
    rng = np.random.default_rng(9)
    base = vol(seed=2)
    for _ in range(5):
        t = rng.uniform(-40, 40, size=3)
        moved = Volume(data=base.data, spacing=base.spacing,
                       origin=tuple(np.asarray(base.origin) + t))
        p = rng.uniform(-15, 15, size=3)
        a = extract(base, p, tiny_layout, ct_window)
        b = extract(moved, p + t, tiny_layout, ct_window)
        assert np.array_equal(a, b)


def test_spacing_independence_on_blocky_signal(tiny_layout, ct_window):
    # same world signal (16 mm stripes along x) at 1 mm and 2 mm spacing;
    # all sample points stay > 1 mm from stripe boundaries, so nearest
    # lookup quantization cannot cross a feature edge
    def stripes(xs):
        return np.where((np.floor(xs / 16.0) % 2) == 0, 200.0, -800.0)

    def build(spacing):
        n = int(64 / spacing)
        xs = np.arange(n) * spacing + spacing / 2.0
        row = stripes(xs).astype(np.float32)
        data = np.broadcast_to(row, (n, n, n)).copy()
        return Volume(data=data, spacing=(spacing,) * 3,
                      origin=(spacing / 2.0,) * 3)

    v1, v2 = build(1.0), build(2.0)
    for p in ([8.0, 32.0, 32.0], [24.0, 20.0, 40.0], [40.5, 30.0, 30.0]):
        a = extract(v1, p, tiny_layout, ct_window)
        b = extract(v2, p, tiny_layout, ct_window)
        assert np.array_equal(a, b)


def test_extract_batch_matches_singles(tiny_layout, ct_window):
    v = vol(seed=5)
    pts = np.random.default_rng(3).uniform(-25, 25, size=(40, 3))
    batch = extract_batch(v, pts, tiny_layout, ct_window)
    assert batch.shape == (40, 36)
    for n in range(40):
        assert np.array_equal(batch[n], extract(v, pts[n], tiny_layout, ct_window))


def test_single_query_sampler_matches_extract(tiny_layout, ct_window):
    v = vol(seed=6)
    s = _SingleQuerySampler(v, tiny_layout, ct_window)
    for p in np.random.default_rng(8).uniform(-25, 25, size=(20, 3)):
        assert np.array_equal(s.extract(p), extract(v, p, tiny_layout, ct_window))


@settings(max_examples=30, deadline=None)
@given(side_p=st.sampled_from([1, 3, 5]), side_c=st.sampled_from([1, 3]),
       step=st.sampled_from([1.0, 2.5, 4.0]),
       axis=st.sampled_from(["x", "y", "z"]))
def test_extract_length_property(side_p, side_c, step, axis):
    lay = DescriptorLayout(planes=(PlaneGridSpec(axis, side_p, step),),
                           cubes=(CubeGridSpec(side_c, step),))
    d = extract(vol(), (1.0, 2.0, 3.0), lay, WINDOW_CT)
    assert d.shape == (side_p ** 2 + side_c ** 3,)
    assert lay.offsets().shape == (lay.total_len, 3)
