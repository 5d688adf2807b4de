"""Session-based HTTP annotation service.

Sessions are event-sourced: the ordered click list is the source of truth
and the cached probability maps (one per click) are pure functions of it,
so undo is a pop and replay reproduces state exactly. The user-facing
threshold only re-binarizes the cached probabilities; the edge-prior chain
always binarizes at 0.5 internally.
"""

from __future__ import annotations

import io
import json
import threading
import time
import uuid
from dataclasses import dataclass, field
from pathlib import Path
from typing import List, Optional

import numpy as np
from fastapi import FastAPI, HTTPException, Response, UploadFile
from fastapi.middleware.cors import CORSMiddleware
from fastapi.staticfiles import StaticFiles
from PIL import Image
from pydantic import BaseModel
from scipy import ndimage

from .clicks import Click, NEGATIVE, POSITIVE, binarize
from .exports import (
    EXPORT_FORMATS,
    coco_json_like,
    encode_rle,
    mask_png,
    pseudo_color_png,
    voc_xml_like,
)
from .model import Model, predict_step
from .polygons import extract_polygon, rasterize_polygon

_CROSS = np.array([[0, 1, 0], [1, 1, 1], [0, 1, 0]], dtype=bool)

# Half-pixel tolerance keeps every lattice staircase corner, so a polygon
# re-rasterizes to its source mask exactly; the library default of 1.0 is
# coarser than this tool wants.
POLYGON_EPSILON = 0.5


class ClickRequest(BaseModel):
    x: int
    y: int
    polarity: str


class ConfigRequest(BaseModel):
    threshold: Optional[float] = None
    largest_cc_only: Optional[bool] = None


class PolygonEdit(BaseModel):
    op: str  # move | insert | delete
    index: int
    x: Optional[float] = None
    y: Optional[float] = None


@dataclass
class Session:
    id: str
    image: np.ndarray                      # (3, H, W) float64
    clicks: List[Click] = field(default_factory=list)
    prob_history: List[np.ndarray] = field(default_factory=list)
    threshold: float = 0.5
    largest_cc_only: bool = False
    polygons: list = field(default_factory=list)
    dirty: bool = False
    lock: threading.Lock = field(default_factory=threading.Lock)

    @property
    def prob(self) -> Optional[np.ndarray]:
        return self.prob_history[-1] if self.prob_history else None

    @property
    def size_hw(self):
        return self.image.shape[1], self.image.shape[2]


def largest_component(mask: np.ndarray) -> np.ndarray:
    """Keep only the largest 4-connected component (tie: the one whose
    first pixel comes earliest in row-major order)."""
    m = mask > 0.5
    if not m.any():
        return mask
    labels, _ = ndimage.label(m, structure=_CROSS)
    areas = np.bincount(labels.ravel())
    values, firsts = np.unique(labels.ravel(), return_index=True)
    best = min((-int(areas[v]), int(f), int(v)) for v, f in zip(values, firsts) if v != 0)
    return (labels == best[2]).astype(np.float64)


def replay_clicks(model: Model, image: np.ndarray, clicks: List[Click]) -> Optional[np.ndarray]:
    """Run the full interaction chain from scratch; the reference
    implementation that session state must always agree with."""
    prob = None
    prev = None
    for k in range(len(clicks)):
        prob, _ = predict_step(model, image, clicks[: k + 1], prev)
        prev = binarize(prob)
    return prob


def create_app(model: Model, max_side: int = 2048, ui_dir=None,
               event_log_path=None) -> FastAPI:
    app = FastAPI(title="edgeflow annotation service")
    app.add_middleware(
        CORSMiddleware,
        allow_origin_regex=r"^https?://(localhost|127\.0\.0\.1)(:\d+)?$",
        allow_methods=["*"],
        allow_headers=["*"],
    )
    app.state.model = model
    app.state.sessions = {}
    app.state.inference_count = 0
    app.state.event_log_path = Path(event_log_path) if event_log_path else None

    def log_event(session_id: str, event: str, detail: dict) -> None:
        if app.state.event_log_path is None:
            return
        record = {"ts": time.time(), "session": session_id, "event": event, **detail}
        with open(app.state.event_log_path, "a") as f:
            f.write(json.dumps(record) + "\n")

    def get_session(session_id: str) -> Session:
        session = app.state.sessions.get(session_id)
        if session is None:
            raise HTTPException(status_code=404, detail=f"no session {session_id}")
        return session

    def display_mask(session: Session) -> np.ndarray:
        """Threshold + optional largest-component filter on cached probs."""
        h, w = session.size_hw
        if session.prob is None:
            return np.zeros((h, w), dtype=np.float64)
        mask = binarize(session.prob, session.threshold)
        if session.largest_cc_only:
            mask = largest_component(mask)
        return mask

    def export_mask(session: Session) -> np.ndarray:
        """What export sees: the edited polygon wins over the model mask."""
        if session.dirty and session.polygons:
            h, w = session.size_hw
            return rasterize_polygon(session.polygons, h, w)
        return display_mask(session)

    def refresh_polygons(session: Session) -> None:
        session.polygons = extract_polygon(display_mask(session), epsilon=POLYGON_EPSILON)
        session.dirty = False

    def state_payload(session: Session, **extra) -> dict:
        payload = {
            "mask_rle": encode_rle(export_mask(session)),
            "polygon": [[float(x), float(y)] for x, y in
                        (session.polygons[0] if session.polygons else [])],
            "probs_available": session.prob is not None,
            "dirty": session.dirty,
            "click_count": len(session.clicks),
            "threshold": session.threshold,
            "largest_cc_only": session.largest_cc_only,
        }
        payload.update(extra)
        return payload

    def hold_lock(session: Session) -> None:
        if not session.lock.acquire(blocking=False):
            raise HTTPException(status_code=409,
                                detail="another request is updating this session")

    @app.get("/healthz")
    def healthz():
        return {
            "status": "ok",
            "sessions": len(app.state.sessions),
            "inference_count": app.state.inference_count,
        }

    @app.post("/sessions", status_code=201)
    def create_session(image: UploadFile):
        raw = image.file.read()
        try:
            decoded = Image.open(io.BytesIO(raw))
            decoded.load()
        except Exception:
            raise HTTPException(status_code=400, detail="image could not be decoded")
        if max(decoded.size) > max_side:
            raise HTTPException(status_code=413,
                                detail=f"image exceeds the {max_side}px side limit")
        arr = np.asarray(decoded.convert("RGB"), dtype=np.float64) / 255.0
        session = Session(id=uuid.uuid4().hex, image=arr.transpose(2, 0, 1))
        app.state.sessions[session.id] = session
        log_event(session.id, "create", {"width": decoded.size[0], "height": decoded.size[1]})
        return {"id": session.id, "width": decoded.size[0], "height": decoded.size[1]}

    @app.get("/sessions/{session_id}")
    def session_state(session_id: str):
        return state_payload(get_session(session_id))

    @app.post("/sessions/{session_id}/clicks")
    def add_click(session_id: str, body: ClickRequest):
        session = get_session(session_id)
        h, w = session.size_hw
        if body.polarity not in (POSITIVE, NEGATIVE):
            raise HTTPException(status_code=400,
                                detail=f"polarity must be '{POSITIVE}' or '{NEGATIVE}'")
        if not (0 <= body.x < w and 0 <= body.y < h):
            raise HTTPException(status_code=400,
                                detail=f"click ({body.x}, {body.y}) outside {w}x{h} image")
        hold_lock(session)
        try:
            click = Click(x=body.x, y=body.y, polarity=body.polarity,
                          index=len(session.clicks) + 1)
            prev = binarize(session.prob) if session.prob is not None else None
            started = time.perf_counter()
            prob, _ = predict_step(app.state.model, session.image,
                                   session.clicks + [click], prev)
            elapsed_ms = (time.perf_counter() - started) * 1000.0
            app.state.inference_count += 1
            session.clicks.append(click)
            session.prob_history.append(prob)
            refresh_polygons(session)
        finally:
            session.lock.release()
        log_event(session_id, "click", {"x": body.x, "y": body.y, "polarity": body.polarity})
        return state_payload(session, inference_ms=elapsed_ms)

    @app.post("/sessions/{session_id}/undo")
    def undo(session_id: str):
        session = get_session(session_id)
        hold_lock(session)
        try:
            if not session.clicks:
                raise HTTPException(status_code=400, detail="nothing to undo")
            session.clicks.pop()
            session.prob_history.pop()
            refresh_polygons(session)
        finally:
            session.lock.release()
        log_event(session_id, "undo", {})
        return state_payload(session)

    @app.patch("/sessions/{session_id}/config")
    def configure(session_id: str, body: ConfigRequest):
        session = get_session(session_id)
        if body.threshold is not None and not 0.0 < body.threshold < 1.0:
            raise HTTPException(status_code=400,
                                detail=f"threshold must be in (0, 1), got {body.threshold}")
        hold_lock(session)
        try:
            if body.threshold is not None:
                session.threshold = body.threshold
            if body.largest_cc_only is not None:
                session.largest_cc_only = body.largest_cc_only
            refresh_polygons(session)
        finally:
            session.lock.release()
        log_event(session_id, "config",
                  {"threshold": session.threshold, "largest_cc_only": session.largest_cc_only})
        return state_payload(session)

    @app.patch("/sessions/{session_id}/polygon")
    def edit_polygon(session_id: str, body: PolygonEdit):
        session = get_session(session_id)
        hold_lock(session)
        try:
            if not session.polygons:
                raise HTTPException(status_code=400, detail="session has no polygon yet")
            ring = session.polygons[0]
            if body.op == "move":
                if not 0 <= body.index < len(ring):
                    raise HTTPException(status_code=400, detail="vertex index out of range")
                if body.x is None or body.y is None:
                    raise HTTPException(status_code=400, detail="move needs x and y")
                ring[body.index] = (float(body.x), float(body.y))
            elif body.op == "insert":
                if not 0 <= body.index <= len(ring):
                    raise HTTPException(status_code=400, detail="vertex index out of range")
                if body.x is None or body.y is None:
                    raise HTTPException(status_code=400, detail="insert needs x and y")
                ring.insert(body.index, (float(body.x), float(body.y)))
            elif body.op == "delete":
                if not 0 <= body.index < len(ring):
                    raise HTTPException(status_code=400, detail="vertex index out of range")
                if len(ring) <= 3:
                    raise HTTPException(status_code=400,
                                        detail="cannot delete below 3 vertices")
                del ring[body.index]
            else:
                raise HTTPException(status_code=400,
                                    detail="op must be move, insert, or delete")
            session.dirty = True
        finally:
            session.lock.release()
        log_event(session_id, "polygon", {"op": body.op, "index": body.index})
        return {
            "polygon": [[float(x), float(y)] for x, y in session.polygons[0]],
            "dirty": session.dirty,
        }

    @app.get("/sessions/{session_id}/export")
    def export(session_id: str, format: str):
        session = get_session(session_id)
        if format not in EXPORT_FORMATS:
            raise HTTPException(status_code=400,
                                detail=f"format must be one of {list(EXPORT_FORMATS)}")
        mask = export_mask(session)
        h, w = session.size_hw
        if format == "mask_png":
            return Response(content=mask_png(mask), media_type="image/png")
        if format == "pseudo_color_png":
            return Response(content=pseudo_color_png(mask), media_type="image/png")
        if format == "voc_xml_like":
            return Response(content=voc_xml_like(mask), media_type="application/xml")
        rings = session.polygons if session.dirty else extract_polygon(mask, epsilon=POLYGON_EPSILON)
        return Response(content=coco_json_like(rings, h, w), media_type="application/json")

    if ui_dir is not None:
        app.mount("/", StaticFiles(directory=str(ui_dir), html=True), name="ui")
    return app
