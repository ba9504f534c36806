"""Atlas bundle: normalized coordinates, label lookup, landmark table, I/O."""

import json

import numpy as np
import pytest

from atlasnav.atlas import (Atlas, AtlasBundleError, MissingLandmarkError,
                            atlas_metadata, from_normalized, label_at,
                            labels_at, landmark_normalized, load_atlas,
                            save_atlas, to_normalized)
from atlasnav.volume import LabelVolume, Volume


def flat_atlas(dims=(48, 48, 48), spacing=(1.0, 1.0, 1.0),
               origin=(10.0, 20.0, 400.0), reference=(10.0, 20.0, 400.0),
               scale=256.0):
    nx, ny, nz = dims
    img = Volume(data=np.zeros((nz, ny, nx), np.float32), spacing=spacing,
                 origin=origin)
    mask = LabelVolume(data=np.zeros((nz, ny, nx), np.uint8), spacing=spacing,
                       origin=origin)
    mask.data[:, :, :nx // 2] = 3  # left half carries label 3
    return Atlas(image=img, mask=mask, landmarks={"notch": (12.0, 22.0, 401.0)},
                 reference_name="carina", reference_point=reference,
                 scale_mm=scale, label_names={3: "left_block"})


# ---------------------------------------------------------------------------
# Coordinate map

def test_to_normalized_examples():
    a = flat_atlas()
    assert np.array_equal(to_normalized(a, (266.0, 20.0, 400.0)), [1, 0, 0])
    assert np.array_equal(to_normalized(a, (10.0, 20.0, 400.0)), [0, 0, 0])


def test_from_normalized_examples():
    a = flat_atlas()
    assert np.array_equal(from_normalized(a, (-0.5, 0.0, 0.0)), [-118, 20, 400])


def test_normalized_round_trip_batch():
    a = flat_atlas()
    pts = np.random.default_rng(0).uniform(-300, 700, size=(50, 3))
    back = from_normalized(a, to_normalized(a, pts))
    assert np.allclose(back, pts, rtol=0, atol=1e-9)


def test_to_normalized_shapes():
    a = flat_atlas()
    assert to_normalized(a, (0, 0, 0)).shape == (3,)
    assert to_normalized(a, np.zeros((7, 3))).shape == (7, 3)


# ---------------------------------------------------------------------------
# Labels

def test_label_at_named_region():
    a = flat_atlas()
    # voxel x < 24 carries label 3; world x = 10 + i
    assert label_at(a, to_normalized(a, (15.0, 30.0, 410.0))) == (3, "left_block")
    got = label_at(a, to_normalized(a, (40.0, 30.0, 410.0)))
    assert got == (0, "background")


def test_label_outside_mask_is_background():
    a = flat_atlas()
    assert label_at(a, (5.0, 5.0, 5.0)) == (0, "background")


def test_unnamed_label_gets_numeric_name():
    a = flat_atlas()
    a.mask.data[0, 0, 0] = 9
    assert label_at(a, to_normalized(a, (10.0, 20.0, 400.0))) == (9, "label 9")


def test_labels_at_matches_scalar_lookup():
    a = flat_atlas()
    pts = np.random.default_rng(1).uniform(-0.3, 0.3, size=(100, 3))
    vec = labels_at(a, pts)
    assert vec.dtype == np.uint8
    for n in range(100):
        assert int(vec[n]) == label_at(a, pts[n])[0]


# ---------------------------------------------------------------------------
# Landmarks

def test_reference_is_addressable_landmark():
    a = flat_atlas()
    assert "carina" in a.landmarks
    assert np.array_equal(landmark_normalized(a, "carina"), [0, 0, 0])


def test_landmark_normalized():
    a = flat_atlas()
    assert np.allclose(landmark_normalized(a, "notch"),
                       np.asarray([2.0, 2.0, 1.0]) / 256.0, rtol=0, atol=1e-15)


def test_unknown_landmark_lists_available():
    with pytest.raises(MissingLandmarkError, match="carina.*notch|notch.*carina"):
        landmark_normalized(flat_atlas(), "nope")


# ---------------------------------------------------------------------------
# Construction contracts

def test_geometry_mismatch_rejected():
    img = Volume(data=np.zeros((4, 4, 4), np.float32), spacing=(1, 1, 1),
                 origin=(0, 0, 0))
    mask = LabelVolume(data=np.zeros((4, 4, 4), np.uint8), spacing=(2, 2, 2),
                       origin=(0, 0, 0))
    with pytest.raises(AtlasBundleError, match="geometry"):
        Atlas(image=img, mask=mask, landmarks={}, reference_name="c",
              reference_point=(0, 0, 0))


def test_reference_outside_image_rejected():
    with pytest.raises(AtlasBundleError, match="outside"):
        flat_atlas(reference=(1000.0, 20.0, 400.0))


def test_nonpositive_scale_rejected():
    with pytest.raises(AtlasBundleError, match="scale"):
        flat_atlas(scale=0.0)


def test_background_label_name_default():
    a = flat_atlas()
    assert a.label_names[0] == "background"


# ---------------------------------------------------------------------------
# Bundle I/O

def test_bundle_round_trip(tmp_path, coarse_atlas):
    out = str(tmp_path / "bundle")
    save_atlas(coarse_atlas, out)
    got = load_atlas(out)
    assert np.array_equal(got.image.data, coarse_atlas.image.data)
    assert np.array_equal(got.mask.data, coarse_atlas.mask.data)
    assert got.reference_name == coarse_atlas.reference_name
    assert np.array_equal(got.reference_point, coarse_atlas.reference_point)
    assert got.scale_mm == coarse_atlas.scale_mm
    assert got.label_names == coarse_atlas.label_names
    assert set(got.landmarks) == set(coarse_atlas.landmarks)
    for name in got.landmarks:
        assert np.array_equal(got.landmarks[name], coarse_atlas.landmarks[name])


def test_metadata_shape(coarse_atlas):
    meta = atlas_metadata(coarse_atlas)
    assert meta["reference_point"]["name"] == "carina"
    assert meta["scale_mm"] == 256.0
    assert "carina" in meta["landmarks"]
    assert meta["labels"]["0"] == "background"
    json.dumps(meta)  # plain-JSON serializable


def test_missing_metadata_file(tmp_path):
    with pytest.raises(AtlasBundleError, match="atlas.json"):
        load_atlas(str(tmp_path))


def test_metadata_missing_key_rejected(tmp_path, coarse_atlas):
    out = str(tmp_path / "bundle")
    save_atlas(coarse_atlas, out)
    meta_path = tmp_path / "bundle" / "atlas.json"
    meta = json.loads(meta_path.read_text())
    del meta["scale_mm"]
    meta_path.write_text(json.dumps(meta))
    with pytest.raises(AtlasBundleError, match="scale_mm"):
        load_atlas(out)
