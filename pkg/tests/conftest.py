"""Shared fixtures: small layouts, a coarse phantom atlas, deformed subjects."""

import numpy as np
import pytest

from atlasnav.sampler import (CubeGridSpec, DescriptorLayout, IntensityWindow,
                              PlaneGridSpec)
from atlasnav.synth import (make_atlas_phantom, make_deformation, thorax_spec,
                            warp_subject)
from atlasnav.volume import Volume


@pytest.fixture
def ct_window():
    return IntensityWindow(-1024.0, 3071.0)


@pytest.fixture
def tiny_layout():
    # 9 + 27 = 36 entries, small enough for brute-force oracles
    return DescriptorLayout(
        planes=(PlaneGridSpec(normal_axis="z", side=3, step_mm=2.0),),
        cubes=(CubeGridSpec(side=3, step_mm=3.0),))


@pytest.fixture
def make_volume():
    def build(dims=(8, 9, 10), spacing=(1.0, 2.0, 3.0), origin=(0.0, 0.0, 0.0),
              seed=0, background=-1024.0):
        nx, ny, nz = dims
        rng = np.random.default_rng(seed)
        data = rng.uniform(-1000.0, 2000.0, size=(nz, ny, nx)).astype(np.float32)
        return Volume(data=data, spacing=tuple(float(s) for s in spacing),
                      origin=tuple(float(o) for o in origin), background=background)
    return build


@pytest.fixture(scope="session")
def coarse_atlas():
    """Thorax phantom at 48 voxels / 4 mm; cheap but anatomically structured."""
    return make_atlas_phantom(thorax_spec(dims=(48, 48, 48),
                                          spacing=(4.0, 4.0, 4.0)), seed=11)


@pytest.fixture(scope="session")
def coarse_field(coarse_atlas):
    from atlasnav.volume import world_bounds
    lo, hi = world_bounds(coarse_atlas.image)
    return make_deformation(seed=5, n_bumps=4, amp_max_mm=10.0,
                            sigma_range_mm=(40.0, 80.0),
                            bounds_mm=(tuple(lo), tuple(hi)))


@pytest.fixture(scope="session")
def coarse_subject(coarse_atlas, coarse_field):
    return warp_subject(coarse_atlas, coarse_field, seed=3, subject_id="s000")
