"""HTTP facade for interactive use: volume sessions, slices, queries, landmarks.

Volumes are uploaded once into in-memory sessions (LRU-capped) and then
queried point by point, so the per-click cost is one engine query. Slice
images are rendered server-side as 8-bit PNG for direct canvas display;
clients never parse volume data.

Request bodies are parsed by hand rather than through a validation layer so
the error codes stay exactly as specified: 400 malformed input, 404 unknown
session, 413 oversized upload, 416 slice index out of range, 422 unknown
landmark (with the available names listed).
"""

from __future__ import annotations

import io
import math
import time
import uuid
from collections import OrderedDict
from dataclasses import dataclass

import numpy as np
from fastapi import FastAPI, HTTPException, Request, Response
from fastapi.middleware.cors import CORSMiddleware
from PIL import Image

from . import tasks
from .atlas import MissingLandmarkError, atlas_metadata, landmark_normalized
from .sampler import WINDOW_CT
from .volume import Volume, VolumeFormatError, volume_from_bytes, world_center

DEFAULT_MAX_BODY = 1 << 30   # 1 GiB
DEFAULT_MAX_SESSIONS = 8


@dataclass
class Session:
    id: str
    volume: Volume
    created_at: float


def _point3(value, what: str) -> np.ndarray:
    if (not isinstance(value, (list, tuple)) or len(value) != 3
            or not all(isinstance(x, (int, float)) and not isinstance(x, bool)
                       and math.isfinite(x) for x in value)):
        raise HTTPException(status_code=400,
                            detail=f"{what} must be a list of 3 finite numbers")
    return np.asarray(value, dtype=np.float64)


async def _json_body(request: Request) -> dict:
    try:
        body = await request.json()
    except Exception:
        raise HTTPException(status_code=400, detail="body is not valid JSON") from None
    if not isinstance(body, dict):
        raise HTTPException(status_code=400, detail="body must be a JSON object")
    return body


def create_app(engine, max_body_bytes: int = DEFAULT_MAX_BODY,
               max_sessions: int = DEFAULT_MAX_SESSIONS) -> FastAPI:
    """App bound to one engine (model or oracle) and its atlas."""
    app = FastAPI(title="anatomical positioning service")
    app.add_middleware(CORSMiddleware, allow_origins=["*"], allow_methods=["*"],
                       allow_headers=["*"])
    sessions: OrderedDict[str, Session] = OrderedDict()
    app.state.engine = engine
    app.state.sessions = sessions
    default_window = getattr(engine, "window", WINDOW_CT)

    def get_session(sid: str) -> Session:
        sess = sessions.get(sid)
        if sess is None:
            raise HTTPException(status_code=404, detail=f"unknown session {sid!r}")
        sessions.move_to_end(sid)
        return sess

    @app.post("/volumes")
    async def upload_volume(request: Request):
        body = await request.body()
        if len(body) > max_body_bytes:
            raise HTTPException(status_code=413,
                                detail=f"body exceeds {max_body_bytes} bytes")
        try:
            vol = volume_from_bytes(body, source="upload")
        except VolumeFormatError as exc:
            raise HTTPException(status_code=400, detail=str(exc)) from None
        sess = Session(id=uuid.uuid4().hex, volume=vol, created_at=time.time())
        sessions[sess.id] = sess
        while len(sessions) > max_sessions:
            sessions.popitem(last=False)
        return {"session_id": sess.id,
                "dims": list(vol.dims),
                "spacing": [float(s) for s in vol.spacing],
                "origin": [float(o) for o in vol.origin],
                "intensity_range": [float(vol.data.min()), float(vol.data.max())]}

    @app.get("/volumes/{sid}/slice")
    def get_slice(sid: str, axis: str = "z", index: int = 0,
                  window: str | None = None):
        sess = get_session(sid)
        v = sess.volume
        nx, ny, nz = v.dims
        sizes = {"x": nx, "y": ny, "z": nz}
        if axis not in sizes:
            raise HTTPException(status_code=400, detail="axis must be x, y, or z")
        if not 0 <= index < sizes[axis]:
            raise HTTPException(
                status_code=416,
                detail=f"index {index} out of range [0, {sizes[axis] - 1}] on {axis}")
        if window is None:
            lo, hi = default_window.lo, default_window.hi
        else:
            try:
                lo_s, hi_s = window.split(",")
                lo, hi = float(lo_s), float(hi_s)
            except ValueError:
                raise HTTPException(status_code=400,
                                    detail="window must be 'lo,hi'") from None
            if not (math.isfinite(lo) and math.isfinite(hi) and lo < hi):
                raise HTTPException(status_code=400, detail="window needs lo < hi")
        if axis == "z":
            sl = v.data[index, :, :]
        elif axis == "y":
            sl = v.data[:, index, :]
        else:
            sl = v.data[:, :, index]
        scaled = np.clip((sl.astype(np.float64) - lo) / (hi - lo), 0.0, 1.0)
        u8 = np.rint(scaled * 255.0).astype(np.uint8)
        buf = io.BytesIO()
        Image.fromarray(u8, mode="L").save(buf, format="PNG")
        return Response(content=buf.getvalue(), media_type="image/png")

    @app.post("/volumes/{sid}/query")
    async def query_point(sid: str, request: Request):
        sess = get_session(sid)
        body = await _json_body(request)
        if "point_mm" not in body:
            raise HTTPException(status_code=400, detail="missing point_mm")
        p = _point3(body["point_mm"], "point_mm")
        res = tasks.query(engine, sess.volume, p)
        return {"normalized": [float(x) for x in res.coord],
                "atlas_point_mm": [float(x) for x in res.atlas_point],
                "label": res.label,
                "label_name": res.label_name,
                "latency_us": res.latency_us}

    @app.post("/volumes/{sid}/landmark")
    async def find_landmark(sid: str, request: Request):
        sess = get_session(sid)
        body = await _json_body(request)
        if "name" in body:
            try:
                target = landmark_normalized(engine.atlas, str(body["name"]))
            except MissingLandmarkError:
                raise HTTPException(
                    status_code=422,
                    detail={"message": f"unknown landmark {body['name']!r}",
                            "available": sorted(engine.atlas.landmarks)}) from None
        elif "target_normalized" in body:
            target = _point3(body["target_normalized"], "target_normalized")
        else:
            raise HTTPException(status_code=400,
                                detail="need name or target_normalized")
        max_iters = body.get("max_iters", 50)
        if not isinstance(max_iters, int) or isinstance(max_iters, bool) \
                or not 1 <= max_iters <= 1000:
            raise HTTPException(status_code=400,
                                detail="max_iters must be an integer in [1, 1000]")
        raw_starts = body.get("starts")
        if raw_starts is None:
            starts = [world_center(sess.volume)]
        else:
            if not isinstance(raw_starts, list) or not raw_starts:
                raise HTTPException(status_code=400,
                                    detail="starts must be a non-empty list of points")
            starts = [_point3(s, "starts[]") for s in raw_starts]
        runs = [tasks.navigate(engine, sess.volume, target, start=s,
                               max_iters=max_iters) for s in starts]
        finals = np.asarray([r.final for r in runs])
        point = np.median(finals, axis=0)
        best = min(runs, key=lambda r: float(np.linalg.norm(r.final - point)))
        return {"point_mm": [float(x) for x in point],
                "path": [[float(x) for x in row] for row in best.path],
                "converged": bool(all(r.converged for r in runs)),
                "iterations": max(r.iterations for r in runs)}

    @app.get("/atlas")
    def get_atlas():
        return atlas_metadata(engine.atlas)

    return app
