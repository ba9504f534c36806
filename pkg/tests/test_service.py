"""HTTP service: uploads, slices, queries, landmark navigation, eviction."""

import io
import json

import numpy as np
import pytest
from fastapi.testclient import TestClient
from PIL import Image

from atlasnav.atlas import atlas_metadata
from atlasnav.service import create_app
from atlasnav.synth import subject_landmark_position
from atlasnav.tasks import OracleEngine
from atlasnav.volume import Volume, save_volume


@pytest.fixture(scope="module")
def subject_bytes(tmp_path_factory, coarse_subject):
    path = tmp_path_factory.mktemp("svc") / "subject.mha"
    save_volume(coarse_subject.volume, str(path))
    return path.read_bytes()


@pytest.fixture(scope="module")
def tiny_bytes(tmp_path_factory):
    data = np.arange(8 * 8 * 8, dtype=np.float32).reshape(8, 8, 8)
    v = Volume(data=data, spacing=(1.0, 1.0, 1.0), origin=(0.0, 0.0, 0.0))
    path = tmp_path_factory.mktemp("svc2") / "tiny.mha"
    save_volume(v, str(path))
    return path.read_bytes()


@pytest.fixture(scope="module")
def client(coarse_atlas, coarse_field):
    engine = OracleEngine(field=coarse_field, atlas=coarse_atlas)
    return TestClient(create_app(engine))


@pytest.fixture
def sid(client, subject_bytes):
    return client.post("/volumes", content=subject_bytes).json()["session_id"]


# ---------------------------------------------------------------------------
# Upload

def test_upload_reports_geometry(client, subject_bytes, coarse_subject):
    res = client.post("/volumes", content=subject_bytes)
    assert res.status_code == 200
    body = res.json()
    assert body["dims"] == list(coarse_subject.volume.dims)
    assert body["spacing"] == [4.0, 4.0, 4.0]
    assert len(body["session_id"]) == 32
    lo, hi = body["intensity_range"]
    assert lo < hi


def test_upload_malformed_is_400(client):
    res = client.post("/volumes", content=b"not a header")
    assert res.status_code == 400


def test_upload_body_cap_is_413(coarse_atlas, coarse_field, subject_bytes):
    engine = OracleEngine(field=coarse_field, atlas=coarse_atlas)
    small = TestClient(create_app(engine, max_body_bytes=1000))
    res = small.post("/volumes", content=subject_bytes)
    assert res.status_code == 413


def test_lru_eviction_order(coarse_atlas, coarse_field, tiny_bytes):
    engine = OracleEngine(field=coarse_field, atlas=coarse_atlas)
    c = TestClient(create_app(engine, max_sessions=2))
    a = c.post("/volumes", content=tiny_bytes).json()["session_id"]
    b = c.post("/volumes", content=tiny_bytes).json()["session_id"]
    # touching a refreshes it, so the next upload evicts b instead
    assert c.post(f"/volumes/{a}/query",
                  json={"point_mm": [0, 0, 0]}).status_code == 200
    d = c.post("/volumes", content=tiny_bytes).json()["session_id"]
    assert c.get(f"/volumes/{a}/slice?axis=z&index=0").status_code == 200
    assert c.get(f"/volumes/{b}/slice?axis=z&index=0").status_code == 404
    assert c.get(f"/volumes/{d}/slice?axis=z&index=0").status_code == 200


# ---------------------------------------------------------------------------
# Slices

def test_slice_png_content(client, tiny_bytes):
    sid = client.post("/volumes", content=tiny_bytes).json()["session_id"]
    res = client.get(f"/volumes/{sid}/slice?axis=z&index=3&window=0,511")
    assert res.status_code == 200
    assert res.headers["content-type"] == "image/png"
    img = Image.open(io.BytesIO(res.content))
    assert img.size == (8, 8) and img.mode == "L"
    arr = np.asarray(img)
    raw = np.arange(512, dtype=np.float32).reshape(8, 8, 8)[3]
    expect = np.rint(np.clip(raw / 511.0, 0, 1) * 255).astype(np.uint8)
    assert np.array_equal(arr, expect)


@pytest.mark.parametrize("axis,size", [("x", (8, 8)), ("y", (8, 8))])
def test_slice_other_axes(client, tiny_bytes, axis, size):
    sid = client.post("/volumes", content=tiny_bytes).json()["session_id"]
    res = client.get(f"/volumes/{sid}/slice?axis={axis}&index=0")
    assert res.status_code == 200
    assert Image.open(io.BytesIO(res.content)).size == size


def test_slice_index_out_of_range_is_416(client, sid):
    assert client.get(f"/volumes/{sid}/slice?axis=z&index=48").status_code == 416
    assert client.get(f"/volumes/{sid}/slice?axis=z&index=-1").status_code == 416


def test_slice_bad_axis_is_400(client, sid):
    assert client.get(f"/volumes/{sid}/slice?axis=w&index=0").status_code == 400


def test_slice_bad_window_is_400(client, sid):
    assert client.get(f"/volumes/{sid}/slice?axis=z&index=0&window=abc"
                      ).status_code == 400
    assert client.get(f"/volumes/{sid}/slice?axis=z&index=0&window=5,5"
                      ).status_code == 400


def test_slice_unknown_session_is_404(client):
    assert client.get("/volumes/feed/slice?axis=z&index=0").status_code == 404


# ---------------------------------------------------------------------------
# Query

def test_query_returns_exact_engine_answer(client, sid, coarse_atlas,
                                           coarse_field):
    from atlasnav.synth import ground_truth_normalized
    p = [8.0, -12.0, 20.0]
    res = client.post(f"/volumes/{sid}/query", json={"point_mm": p})
    assert res.status_code == 200
    body = res.json()
    expect = ground_truth_normalized(coarse_atlas, coarse_field, np.asarray(p))
    assert np.allclose(body["normalized"], expect, rtol=0, atol=1e-12)
    assert body["latency_us"] > 0
    assert isinstance(body["label"], int)
    assert body["label_name"] == coarse_atlas.label_name(body["label"])


def test_query_missing_point_is_400(client, sid):
    assert client.post(f"/volumes/{sid}/query", json={}).status_code == 400


def test_query_bad_point_shape_is_400(client, sid):
    res = client.post(f"/volumes/{sid}/query", json={"point_mm": [1, 2]})
    assert res.status_code == 400
    res = client.post(f"/volumes/{sid}/query",
                      json={"point_mm": [1, 2, "x"]})
    assert res.status_code == 400


def test_query_malformed_json_is_400(client, sid):
    res = client.post(f"/volumes/{sid}/query", content=b"{nope",
                      headers={"content-type": "application/json"})
    assert res.status_code == 400


def test_query_unknown_session_is_404(client):
    res = client.post("/volumes/beef/query", json={"point_mm": [0, 0, 0]})
    assert res.status_code == 404


# ---------------------------------------------------------------------------
# Landmark navigation

def test_landmark_by_name_converges_to_subject_position(client, sid,
                                                        coarse_atlas,
                                                        coarse_field):
    res = client.post(f"/volumes/{sid}/landmark", json={"name": "carina"})
    assert res.status_code == 200
    body = res.json()
    truth = subject_landmark_position(coarse_field,
                                      coarse_atlas.reference_point)
    assert np.linalg.norm(np.asarray(body["point_mm"]) - truth) < 0.3
    assert body["converged"] is True
    assert 1 <= body["iterations"] <= 50
    path = np.asarray(body["path"])
    assert path.ndim == 2 and path.shape[1] == 3
    assert path.shape[0] <= 51
    assert np.allclose(path[-1], body["point_mm"], rtol=0, atol=1e-9)


def test_landmark_by_target_normalized(client, sid, coarse_field):
    res = client.post(f"/volumes/{sid}/landmark",
                      json={"target_normalized": [0.05, -0.02, 0.01],
                            "max_iters": 80})
    assert res.status_code == 200
    assert res.json()["converged"] is True


def test_landmark_multi_start_median(client, sid):
    res = client.post(f"/volumes/{sid}/landmark",
                      json={"name": "carina",
                            "starts": [[0, 0, 0], [20, 0, 0], [0, -20, 10]]})
    assert res.status_code == 200
    single = client.post(f"/volumes/{sid}/landmark",
                         json={"name": "carina"}).json()
    assert np.allclose(res.json()["point_mm"], single["point_mm"], atol=0.5)


def test_landmark_unknown_name_is_422_with_choices(client, sid):
    res = client.post(f"/volumes/{sid}/landmark", json={"name": "patella"})
    assert res.status_code == 422
    detail = res.json()["detail"]
    assert "patella" in detail["message"]
    assert "carina" in detail["available"]
    assert "liver_dome" in detail["available"]


def test_landmark_needs_name_or_target(client, sid):
    assert client.post(f"/volumes/{sid}/landmark", json={}).status_code == 400


def test_landmark_max_iters_validation(client, sid):
    for bad in (0, 1001, "ten", True):
        res = client.post(f"/volumes/{sid}/landmark",
                          json={"name": "carina", "max_iters": bad})
        assert res.status_code == 400


def test_landmark_starts_validation(client, sid):
    res = client.post(f"/volumes/{sid}/landmark",
                      json={"name": "carina", "starts": []})
    assert res.status_code == 400
    res = client.post(f"/volumes/{sid}/landmark",
                      json={"name": "carina", "starts": [[1, 2]]})
    assert res.status_code == 400


# ---------------------------------------------------------------------------
# Atlas metadata and CORS

def test_atlas_endpoint_matches_metadata(client, coarse_atlas):
    res = client.get("/atlas")
    assert res.status_code == 200
    assert res.json() == json.loads(json.dumps(atlas_metadata(coarse_atlas)))


def test_cors_allows_any_origin(client):
    res = client.get("/atlas", headers={"Origin": "http://localhost:5173"})
    assert res.headers.get("access-control-allow-origin") == "*"
