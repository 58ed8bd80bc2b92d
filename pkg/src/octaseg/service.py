"""Point-prompt inference service.

Encodes an uploaded image once per session and answers any number of prompt
queries against the cached embedding. Request/response bodies are JSON; the
mask comes back as a base64 1-bit PNG in original image coordinates.
"""

from __future__ import annotations

import base64
import io
import json
import threading
import time
import uuid
from collections import OrderedDict
from dataclasses import dataclass, field
from pathlib import Path
from typing import Literal

import numpy as np
import torch
from fastapi import FastAPI, HTTPException
from PIL import Image, UnidentifiedImageError
from pydantic import BaseModel, Field

from .data import StandardizedInput, standardize_input, unstandardize_mask
from .model import (
    AdaptedModel,
    ImageEmbedding,
    decode_masks,
    encode_image,
    encode_prompt_arrays,
    load_checkpoint,
    select_best,
)

DEFAULT_TTL_SECONDS = 30 * 60
DEFAULT_CACHE_CAPACITY = 64
MANIFEST_NAME = "manifest.json"


# ---------------------------------------------------------------------------
# schemas


class CreateSessionRequest(BaseModel):
    task: str
    image_b64: str


class SessionMeta(BaseModel):
    session_id: str
    task: str
    width: int
    height: int


class PointIn(BaseModel):
    x: float
    y: float
    label: Literal[0, 1]


class PredictRequest(BaseModel):
    points: list[PointIn] = Field(default_factory=list)


class PredictResponse(BaseModel):
    mask_png_b64: str
    confidence: float
    all_confidences: list[float]
    width: int
    height: int


class TaskInfo(BaseModel):
    task: str
    checkpoint: str
    lora_rank: int
    input_side: int


class HealthResponse(BaseModel):
    status: str
    models_loaded: int
    active_sessions: int


# ---------------------------------------------------------------------------
# sessions


@dataclass
class Session:
    session_id: str
    task: str
    std_input: StandardizedInput
    embedding: ImageEmbedding
    created_at: float
    last_access: float
    encode_calls: int = 1  # embedding computed exactly once, at creation


class SessionStore:
    """TTL + LRU session cache; safe for concurrent create/read/expire."""

    def __init__(self, ttl_seconds: float = DEFAULT_TTL_SECONDS,
                 capacity: int = DEFAULT_CACHE_CAPACITY) -> None:
        self.ttl_seconds = ttl_seconds
        self.capacity = capacity
        self._sessions: OrderedDict[str, Session] = OrderedDict()
        self._lock = threading.Lock()

    def _expire_locked(self, now: float) -> None:
        dead = [sid for sid, s in self._sessions.items()
                if now - s.last_access > self.ttl_seconds]
        for sid in dead:
            del self._sessions[sid]

    def put(self, session: Session) -> None:
        with self._lock:
            now = time.monotonic()
            self._expire_locked(now)
            self._sessions[session.session_id] = session
            self._sessions.move_to_end(session.session_id)
            while len(self._sessions) > self.capacity:
                self._sessions.popitem(last=False)

    def get(self, session_id: str) -> Session | None:
        with self._lock:
            now = time.monotonic()
            self._expire_locked(now)
            session = self._sessions.get(session_id)
            if session is not None:
                session.last_access = now
                self._sessions.move_to_end(session_id)
            return session

    def delete(self, session_id: str) -> bool:
        with self._lock:
            return self._sessions.pop(session_id, None) is not None

    def __len__(self) -> int:
        with self._lock:
            return len(self._sessions)


# ---------------------------------------------------------------------------
# model registry


@dataclass
class LoadedModel:
    model: AdaptedModel
    checkpoint: str


def load_bundle(bundle_dir: str | Path) -> dict[str, LoadedModel]:
    """Read a serve-export bundle: manifest.json naming one checkpoint per task."""
    bundle = Path(bundle_dir)
    manifest_path = bundle / MANIFEST_NAME
    if not manifest_path.is_file():
        raise FileNotFoundError(f"no {MANIFEST_NAME} in {bundle}")
    manifest = json.loads(manifest_path.read_text())
    models = {}
    for entry in manifest.get("tasks", []):
        path = bundle / entry["checkpoint"]
        adapted = load_checkpoint(path).eval()
        models[entry["task"]] = LoadedModel(model=adapted, checkpoint=str(path))
    return models


# ---------------------------------------------------------------------------
# prediction helpers (shared with the CLI so mask bytes match exactly)


def image_to_stack(arr: np.ndarray) -> np.ndarray:
    """Grayscale (H, W) or channel-last RGB to a (3, H, W) float32 stack."""
    if arr.ndim == 2:
        chan = (arr / 255.0).astype(np.float32) if arr.dtype == np.uint8 else arr.astype(np.float32)
        return np.stack([chan] * 3)
    if arr.ndim == 3 and arr.shape[-1] in (3, 4):
        chan = arr[..., :3]
        chan = (chan / 255.0).astype(np.float32) if chan.dtype == np.uint8 else chan.astype(np.float32)
        return np.transpose(chan, (2, 0, 1))
    raise ValueError(f"cannot interpret image array of shape {arr.shape}")


def decode_image_bytes(data: bytes) -> np.ndarray:
    with Image.open(io.BytesIO(data)) as img:
        if img.mode in ("L", "I;16", "I"):
            return np.asarray(img.convert("L"))
        return np.asarray(img.convert("RGB"))


def predict_mask_png(
    model: AdaptedModel,
    std_input: StandardizedInput,
    embedding: ImageEmbedding,
    points: list[dict],
    threshold: float = 0.5,
) -> tuple[bytes, float, list[float]]:
    """Decode one prompt query into a 1-bit PNG in original coordinates."""
    h, w = std_input.transform.original_hw
    for i, p in enumerate(points):
        if not (0 <= p["x"] < w and 0 <= p["y"] < h):
            raise ValueError(
                f"point {i} at ({p['x']:g}, {p['y']:g}) is outside the {w}x{h} image"
            )
    with torch.inference_mode():
        if points:
            xy = np.array([[p["x"], p["y"]] for p in points], dtype=np.float64)
            coords = std_input.transform.apply_coords(xy)
            labels = np.array([p["label"] for p in points], dtype=np.int64)
            prompt_emb = encode_prompt_arrays(coords, labels, model)
        else:
            prompt_emb = None
        pred = decode_masks(embedding, prompt_emb, model)
        best_logits, confidence = select_best(pred)
        probs = torch.sigmoid(best_logits).cpu().numpy()
    mask = unstandardize_mask(probs, std_input.transform) >= threshold
    buf = io.BytesIO()
    Image.fromarray(mask).convert("1").save(buf, format="PNG")
    all_conf = [float(c) for c in pred.confidences.cpu().numpy()]
    return buf.getvalue(), confidence, all_conf


# ---------------------------------------------------------------------------
# app


def create_app(
    bundle_dir: str | Path | None = None,
    models: dict[str, AdaptedModel] | None = None,
    ttl_seconds: float = DEFAULT_TTL_SECONDS,
    cache_capacity: int = DEFAULT_CACHE_CAPACITY,
) -> FastAPI:
    registry: dict[str, LoadedModel] = {}
    if bundle_dir is not None:
        registry.update(load_bundle(bundle_dir))
    if models:
        registry.update({
            task: LoadedModel(model=m.eval(), checkpoint="<in-memory>")
            for task, m in models.items()
        })

    app = FastAPI(title="octaseg inference service")
    store = SessionStore(ttl_seconds=ttl_seconds, capacity=cache_capacity)
    app.state.sessions = store
    app.state.registry = registry

    @app.post("/sessions", response_model=SessionMeta)
    def create_session(request: CreateSessionRequest) -> SessionMeta:
        loaded = registry.get(request.task)
        if loaded is None:
            raise HTTPException(
                status_code=404,
                detail=f"no model for task {request.task!r}; available: {sorted(registry)}",
            )
        try:
            data = base64.b64decode(request.image_b64, validate=True)
            arr = decode_image_bytes(data)
        except (ValueError, UnidentifiedImageError) as exc:
            raise HTTPException(status_code=400, detail=f"cannot decode image: {exc}")
        stack = image_to_stack(arr)
        std = standardize_input(stack, side=loaded.model.model_config.input_side)
        with torch.inference_mode():
            embedding = encode_image(std, loaded.model)
        now = time.monotonic()
        session = Session(
            session_id=uuid.uuid4().hex, task=request.task, std_input=std,
            embedding=embedding, created_at=now, last_access=now,
        )
        store.put(session)
        h, w = std.transform.original_hw
        return SessionMeta(session_id=session.session_id, task=request.task,
                           width=w, height=h)

    @app.post("/sessions/{session_id}/predict", response_model=PredictResponse)
    def predict(session_id: str, request: PredictRequest) -> PredictResponse:
        session = store.get(session_id)
        if session is None:
            raise HTTPException(status_code=404, detail=f"session {session_id!r} not found")
        loaded = registry[session.task]
        points = [p.model_dump() for p in request.points]
        try:
            png, confidence, all_conf = predict_mask_png(
                loaded.model, session.std_input, session.embedding, points
            )
        except ValueError as exc:
            raise HTTPException(status_code=422, detail=str(exc))
        h, w = session.std_input.transform.original_hw
        return PredictResponse(
            mask_png_b64=base64.b64encode(png).decode("ascii"),
            confidence=confidence, all_confidences=all_conf,
            width=w, height=h,
        )

    @app.get("/tasks", response_model=list[TaskInfo])
    def list_tasks() -> list[TaskInfo]:
        return [
            TaskInfo(
                task=task, checkpoint=loaded.checkpoint,
                lora_rank=loaded.model.lora_config.rank,
                input_side=loaded.model.model_config.input_side,
            )
            for task, loaded in sorted(registry.items())
        ]

    @app.get("/health", response_model=HealthResponse)
    def health() -> HealthResponse:
        return HealthResponse(status="ok", models_loaded=len(registry),
                              active_sessions=len(store))

    @app.delete("/sessions/{session_id}")
    def delete_session(session_id: str) -> dict:
        if not store.delete(session_id):
            raise HTTPException(status_code=404, detail=f"session {session_id!r} not found")
        return {"deleted": session_id}

    return app


def main() -> None:
    import click
    import uvicorn

    @click.command()
    @click.option("--bundle", "bundle_dir", required=True, type=click.Path(exists=True),
                  help="serve-export bundle directory (manifest + checkpoints)")
    @click.option("--host", default="127.0.0.1", show_default=True)
    @click.option("--port", default=8008, show_default=True, type=int)
    @click.option("--ttl", default=DEFAULT_TTL_SECONDS, show_default=True, type=float,
                  help="session idle TTL in seconds")
    @click.option("--capacity", default=DEFAULT_CACHE_CAPACITY, show_default=True, type=int,
                  help="max cached sessions")
    def run(bundle_dir, host, port, ttl, capacity):
        app = create_app(bundle_dir=bundle_dir, ttl_seconds=ttl, cache_capacity=capacity)
        uvicorn.run(app, host=host, port=port)

    run()


if __name__ == "__main__":
    main()
