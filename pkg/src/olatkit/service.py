"""HTTP facade over lightrig + relight for the interactive UI.

Sessions are OLAT stacks loaded at startup and immutable afterwards; the only
mutable state is each session's decoded-frame cache (byte-budgeted, internally
synchronized) and its registry of uploaded environment maps. Responses are
pure functions of the request parameters, so identical requests return
byte-identical bodies and eviction can only change latency.
"""

from __future__ import annotations

import threading
from pathlib import Path

import numpy as np
from fastapi import FastAPI, HTTPException, Query, Request, Response
from fastapi.middleware.cors import CORSMiddleware
from fastapi.responses import JSONResponse
from pydantic import BaseModel, model_validator

from . import imagecore, lightrig, relight
from .errors import OlatkitError

DEFAULT_CACHE_BYTES = 2 << 30
DEFAULT_MAX_ENV_BYTES = 64 << 20


class WeightsRequest(BaseModel):
    env_id: str
    rotation: float = 0.0


class RelightRequest(BaseModel):
    weights: list | None = None
    env_id: str | None = None
    rotation: float = 0.0
    exposure: float = 0.0
    gamma: float = 2.2
    max_lights: int | None = None

    @model_validator(mode="after")
    def _exactly_one_source(self):
        if (self.weights is None) == (self.env_id is None):
            raise ValueError("provide exactly one of 'weights' or 'env_id'")
        return self


class _Session:
    def __init__(self, session_id: str, stack: lightrig.OlatStack):
        self.id = session_id
        self.stack = stack
        self.envs: dict = {}
        self._env_lock = threading.Lock()
        self._env_counter = 0

    def register_env(self, env: lightrig.EnvMap) -> str:
        with self._env_lock:
            env_id = f"env{self._env_counter}"
            self._env_counter += 1
            self.envs[env_id] = env
            return env_id


def create_app(
    manifest_paths,
    cache_bytes: int = DEFAULT_CACHE_BYTES,
    max_env_bytes: int = DEFAULT_MAX_ENV_BYTES,
    ui_dir=None,
) -> FastAPI:
    """Build the service over one session per manifest path."""
    sessions: dict = {}
    for i, path in enumerate(manifest_paths):
        stack = lightrig.load_manifest(path)
        stack.cache_bytes = cache_bytes // max(1, len(manifest_paths))
        sessions[f"s{i}"] = _Session(f"s{i}", stack)

    app = FastAPI(title="olatkit relighting service")
    app.add_middleware(
        CORSMiddleware, allow_origins=["*"], allow_methods=["*"], allow_headers=["*"]
    )

    @app.exception_handler(OlatkitError)
    async def _olatkit_error(request: Request, exc: OlatkitError):
        return JSONResponse(status_code=500, content={"error": str(exc)})

    def get_session(session_id: str) -> _Session:
        session = sessions.get(session_id)
        if session is None:
            raise HTTPException(status_code=404, detail=f"unknown session {session_id!r}")
        return session

    def image_response(image: imagecore.HdrImage, exposure: float, gamma: float,
                       fmt: str) -> Response:
        if fmt == "hdr":
            return Response(content=imagecore.encode_hdr(image), media_type="image/vnd.radiance")
        params = imagecore.ToneMapParams(exposure=exposure, gamma=gamma)
        png = imagecore.encode_png(imagecore.tone_map(image, params))
        return Response(content=png, media_type="image/png")

    @app.get("/api/sessions")
    def list_sessions():
        return [
            {
                "id": s.id,
                "subject": s.stack.subject,
                "lights": s.stack.count,
                "resolution": list(s.stack.resolution),
            }
            for s in sessions.values()
        ]

    @app.get("/api/sessions/{session_id}/lights")
    def list_lights(session_id: str):
        s = get_session(session_id)
        return [
            {
                "index": i,
                "label": s.stack.rig.labels[i],
                "direction": [float(v) for v in s.stack.rig.directions[i]],
            }
            for i in range(s.stack.count)
        ]

    @app.post("/api/sessions/{session_id}/envs")
    async def upload_env(session_id: str, request: Request):
        s = get_session(session_id)
        body = await request.body()
        if len(body) > max_env_bytes:
            raise HTTPException(status_code=413, detail="environment map too large")
        try:
            env = lightrig.EnvMap(image=imagecore.decode_hdr(body))
        except OlatkitError as exc:
            raise HTTPException(status_code=422, detail=f"not a usable env map: {exc}")
        env_id = s.register_env(env)
        return {"env_id": env_id, "width": env.image.width, "height": env.image.height}

    def weights_for(s: _Session, env_id: str, rotation: float) -> lightrig.WeightVector:
        env = s.envs.get(env_id)
        if env is None:
            raise HTTPException(status_code=404, detail=f"unknown env {env_id!r}")
        return lightrig.env_to_weights(env, s.stack.rig, rotation=rotation)

    @app.post("/api/sessions/{session_id}/weights")
    def compute_weights(session_id: str, req: WeightsRequest):
        s = get_session(session_id)
        w = weights_for(s, req.env_id, req.rotation)
        return {"weights": [[float(v) for v in row] for row in w.weights]}

    @app.post("/api/sessions/{session_id}/relight")
    def relight_endpoint(session_id: str, req: RelightRequest,
                         format: str = Query("png", pattern="^(png|hdr)$")):
        s = get_session(session_id)
        if req.weights is not None:
            arr = np.asarray(req.weights, dtype=np.float64)
            if arr.shape != (s.stack.count, 3):
                raise HTTPException(
                    status_code=422,
                    detail=f"weights must be {s.stack.count}x3, got {list(arr.shape)}",
                )
            if not np.all(np.isfinite(arr)) or np.any(arr < 0):
                raise HTTPException(status_code=422, detail="weights must be finite and >= 0")
            weights = lightrig.WeightVector(weights=arr, rig=s.stack.rig)
        else:
            weights = weights_for(s, req.env_id, req.rotation)
        if req.max_lights:
            weights = relight.truncate_weights(weights, req.max_lights)
        image = relight.combine(s.stack, weights)
        return image_response(image, req.exposure, req.gamma, format)

    @app.get("/api/sessions/{session_id}/olat/{index}")
    def get_olat(session_id: str, index: int, exposure: float = 0.0, gamma: float = 2.2,
                 format: str = Query("png", pattern="^(png|hdr)$")):
        s = get_session(session_id)
        if not (0 <= index < s.stack.count):
            raise HTTPException(status_code=404, detail=f"light index {index} out of range")
        return image_response(s.stack.image(index), exposure, gamma, format)

    if ui_dir is not None and Path(ui_dir).is_dir():
        from fastapi.staticfiles import StaticFiles

        app.mount("/", StaticFiles(directory=str(ui_dir), html=True), name="ui")

    return app
