"""HTTP service exposing a loaded face model to the interactive editor.

Vertex data travels as little-endian float32 binary buffers (xyz
interleaved) with an ``x-vertex-count`` header; JSON is reserved for small
metadata and request bodies. Each client session (selected by the
``x-session-id`` header, default ``"default"``) owns its edit state — the
current pose and the last thickness edit — with a revision counter that
increases on every mutation. Edits are absolute: reposting an earlier
payload restores the earlier surface, and nothing ever writes back to the
checkpoint on disk.
"""

from __future__ import annotations

import hashlib
from dataclasses import dataclass, field
from pathlib import Path
from threading import Lock

import numpy as np
from fastapi import FastAPI, HTTPException, Request, Response
from fastapi.middleware.cors import CORSMiddleware

from .model import (AimModel, eval_anatomy, eval_posed, load_model,
                    manipulate_thickness, skinning_weights)

BUFFER_DTYPE = "<f4"
ANATOMY_LAYOUT = "bone:3,thickness:1,normal:3,skinning:1"


@dataclass
class EditSession:
    """Per-client pose and edit state; revision bumps on every mutation."""

    head: np.ndarray | None = None    # (9,) rigid transform or None = identity
    jaw: np.ndarray | None = None
    coeffs: np.ndarray | None = None  # (N-1,) or None = zeros
    mask: np.ndarray = field(default_factory=lambda: np.zeros(0, dtype=np.int64))
    scale: float = 1.0
    revision: int = 0


def _f32(*arrays: np.ndarray) -> bytes:
    return b"".join(np.ascontiguousarray(a, dtype=BUFFER_DTYPE).tobytes()
                    for a in arrays)


def _parse_transform(value, name: str) -> np.ndarray | None:
    if value is None:
        return None
    arr = np.asarray(value, dtype=np.float64)
    if arr.shape != (9,):
        raise HTTPException(422, detail=f"{name} must be a 9-vector "
                                        f"(6D rotation | translation), got shape {arr.shape}")
    return arr


def create_app(model: AimModel | None = None,
               model_path: str | Path | None = None) -> FastAPI:
    """App factory. With neither a model nor a path, endpoints answer 503
    until a model is available; a path is loaded lazily on first use."""
    app = FastAPI(title="aimface service")
    app.add_middleware(CORSMiddleware, allow_origins=["*"],
                       allow_methods=["*"], allow_headers=["*"],
                       expose_headers=["x-vertex-count", "x-revision",
                                       "x-buffer-layout"])
    state: dict = {"model": model, "path": model_path}
    sessions: dict[str, EditSession] = {}
    lock = Lock()

    def need_model() -> AimModel:
        if state["model"] is None and state["path"] is not None:
            state["model"] = load_model(state["path"])
            state["path"] = None
        if state["model"] is None:
            raise HTTPException(503, detail="model not loaded")
        return state["model"]

    def session_of(request: Request) -> EditSession:
        sid = request.headers.get("x-session-id", "default")
        with lock:
            return sessions.setdefault(sid, EditSession())

    def parse_coeffs(value, n_shapes: int) -> np.ndarray | None:
        want = n_shapes - 1
        if value is None:
            return None
        if np.isscalar(value):
            return np.full(want, float(value))
        arr = np.asarray(value, dtype=np.float64)
        if arr.shape != (want,):
            raise HTTPException(422, detail=f"coefficients must have length "
                                            f"{want}, got {arr.size}")
        return arr

    def posed_surface(m: AimModel, s: EditSession) -> np.ndarray:
        """Pure pose evaluation; never includes the thickness overlay, so
        identical /evaluate payloads always return identical buffers."""
        coeffs = s.coeffs if s.coeffs is not None else np.zeros(m.n_shapes - 1)
        return eval_posed(m, coeffs, jaw_transform=s.jaw, head_transform=s.head)

    def edited_surface(m: AimModel, s: EditSession) -> np.ndarray:
        coeffs = s.coeffs if s.coeffs is not None else np.zeros(m.n_shapes - 1)
        return manipulate_thickness(m, s.mask, s.scale, coeffs=coeffs,
                                    jaw_transform=s.jaw,
                                    head_transform=s.head).vertices

    def buffer_response(verts: np.ndarray, revision: int) -> Response:
        return Response(content=_f32(verts),
                        media_type="application/octet-stream",
                        headers={"x-vertex-count": str(len(verts)),
                                 "x-revision": str(revision)})

    @app.get("/model/meta")
    def model_meta():
        m = need_model()
        v = m.template.vertices
        plane = None
        if m.symmetry_plane is not None:
            plane = {"normal": np.asarray(m.symmetry_plane.normal).tolist(),
                     "offset": float(m.symmetry_plane.offset)}
        return {
            "vertex_count": int(m.template.n_vertices),
            "face_count": int(len(m.template.faces)),
            "face_digest": hashlib.sha256(
                np.ascontiguousarray(m.template.faces, dtype="<i8").tobytes()
            ).hexdigest(),
            "n_shapes": int(m.n_shapes),
            "bbox": {"min": v.min(axis=0).tolist(), "max": v.max(axis=0).tolist()},
            "symmetry_plane": plane,
        }

    @app.get("/model/faces")
    def model_faces():
        m = need_model()
        data = np.ascontiguousarray(m.template.faces, dtype="<u4").tobytes()
        return Response(content=data, media_type="application/octet-stream",
                        headers={"x-face-count": str(len(m.template.faces))})

    @app.post("/evaluate")
    async def evaluate(request: Request):
        m = need_model()
        s = session_of(request)
        raw = await request.body()
        if raw.strip():
            try:
                body = await request.json()
            except Exception:
                raise HTTPException(422, detail="body must be JSON")
            if not isinstance(body, dict):
                raise HTTPException(422, detail="body must be a JSON object")
        else:
            body = {}
        head = _parse_transform(body.get("head"), "head")
        jaw = _parse_transform(body.get("jaw"), "jaw")
        coeffs = parse_coeffs(body.get("coeffs"), m.n_shapes)
        with lock:
            s.head, s.jaw, s.coeffs = head, jaw, coeffs
            s.revision += 1
            verts = posed_surface(m, s)
            rev = s.revision
        return buffer_response(verts, rev)

    @app.post("/edit/thickness")
    async def edit_thickness(request: Request):
        m = need_model()
        s = session_of(request)
        try:
            body = await request.json()
        except Exception:
            raise HTTPException(422, detail="body must be JSON")
        if not isinstance(body, dict) or "scale" not in body:
            raise HTTPException(422, detail="body needs {mask, scale}")
        try:
            scale = float(body["scale"])
        except (TypeError, ValueError):
            raise HTTPException(422, detail="scale must be a number")
        if not np.isfinite(scale) or scale < 0.0:
            raise HTTPException(422, detail="scale must be finite and >= 0")
        mask_raw = body.get("mask", [])
        try:
            mask = np.asarray(mask_raw, dtype=np.int64).reshape(-1)
        except (TypeError, ValueError):
            raise HTTPException(422, detail="mask must be a list of vertex indices")
        if mask.size and (mask.min() < 0 or mask.max() >= m.template.n_vertices):
            raise HTTPException(422, detail=f"mask index out of range "
                                            f"[0, {m.template.n_vertices})")
        with lock:
            s.mask, s.scale = np.unique(mask), scale
            s.revision += 1
            verts = edited_surface(m, s)
            rev = s.revision
        return buffer_response(verts, rev)

    @app.get("/anatomy")
    def anatomy():
        m = need_model()
        sample = eval_anatomy(m, m.template.vertices)
        weights = skinning_weights(m, m.template.vertices)
        data = _f32(sample.bone_points, sample.thickness,
                    sample.directions, weights)
        return Response(content=data, media_type="application/octet-stream",
                        headers={"x-vertex-count": str(m.template.n_vertices),
                                 "x-buffer-layout": ANATOMY_LAYOUT})

    return app
