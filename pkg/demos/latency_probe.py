"""Measure single-query latency: descriptor extraction + 32-bit forward.

Latency is independent of volume size because the descriptor reads a fixed
number of voxels by nearest-neighbor lookup; the model is a fixed-cost
matrix pipeline. Run on an idle machine for stable numbers.
"""

import numpy as np

from atlasnav.model import init
from atlasnav.sampler import WINDOW_CT, default_layout
from atlasnav.synth import make_atlas_phantom, thorax_spec
from atlasnav.tasks import Engine, query


def body_points(v, n, seed):
    flat = np.flatnonzero(v.data.reshape(-1) > v.background + 100.0)
    rng = np.random.default_rng(seed)
    idx = flat[rng.integers(flat.size, size=n)]
    nz_, ny_, nx_ = v.data.shape
    z, rem = np.divmod(idx, ny_ * nx_)
    y, x = np.divmod(rem, nx_)
    ijk = np.stack([x, y, z], axis=1) + rng.uniform(-0.5, 0.5, size=(n, 3))
    return np.asarray(v.origin) + ijk * np.asarray(v.spacing)


def main():
    lay = default_layout()
    atlas = make_atlas_phantom(thorax_spec(), seed=6)
    params = init(seed=0, layout_hash=lay.fingerprint()).astype(np.float32)
    engine = Engine(params=params, layout=lay, window=WINDOW_CT, atlas=atlas)
    print(f"model: {params.width} wide, {len(params.blocks)} blocks, "
          f"input {params.input_len}")

    v = atlas.image
    pts = body_points(v, 2100, seed=0)
    for p in pts[:100]:  # first queries pay the per-volume cache setup
        query(engine, v, p)
    lat = np.asarray([query(engine, v, p).latency_us for p in pts[100:]])

    print(f"\n{lat.size} in-body queries on a "
          f"{v.dims[0]}x{v.dims[1]}x{v.dims[2]} volume")
    for q in (50, 95, 99):
        print(f"  p{q}: {np.percentile(lat, q):7.1f} us")
    print(f"  mean: {lat.mean():6.1f} us")


if __name__ == "__main__":
    main()
