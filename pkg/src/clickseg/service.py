"""HTTP click-to-segment service.

The flow mirrors the interactive pipeline: an uploaded image is scored
for saliency, the salient blob seeds five foreground clicks, the model
produces the first mask, and the user refines it by posting clicks.
Every response is a pure function of (weights, stored image, click
history), so replaying the history reproduces the mask byte for byte.

Sessions live in memory behind an LRU cap; a single lock serializes all
session mutation and inference — adequate at desk scale, and it keeps
the replay guarantee trivially true.
"""
from __future__ import annotations

import base64
import io
import threading
import uuid
from collections import OrderedDict
from dataclasses import dataclass, field

import numpy as np
from fastapi import FastAPI, HTTPException, Request
from fastapi.responses import JSONResponse, Response

from . import saliency as S
from .data import resize_bilinear
from .model import Click, ClickSegNet, PromptSet, SegmentationOutput

DEFAULT_SESSION_CAP = 64
# base64 masks are inlined into JSON only below this edge length
INLINE_MASK_MAX_SIZE = 256


@dataclass
class Session:
    id: str
    image: np.ndarray                      # [3,S,S] uint8, already resized
    auto_clicks: list[Click] = field(default_factory=list)
    user_clicks: list[Click] = field(default_factory=list)
    output: SegmentationOutput | None = None

    def all_clicks(self) -> list[Click]:
        return [*self.auto_clicks, *self.user_clicks]


class SessionStore:
    """Insertion/access-ordered dict with least-recently-used eviction."""

    def __init__(self, cap: int):
        if cap < 1:
            raise ValueError("session cap must be >= 1")
        self.cap = cap
        self._items: OrderedDict[str, Session] = OrderedDict()

    def put(self, session: Session) -> None:
        self._items[session.id] = session
        self._items.move_to_end(session.id)
        while len(self._items) > self.cap:
            self._items.popitem(last=False)

    def get(self, session_id: str) -> Session:
        if session_id not in self._items:
            raise KeyError(session_id)
        self._items.move_to_end(session_id)
        return self._items[session_id]

    def __len__(self) -> int:
        return len(self._items)


def decode_image(data: bytes, size: int) -> np.ndarray:
    """Bytes -> [3,size,size] uint8, bilinearly resampled."""
    from PIL import Image, UnidentifiedImageError
    try:
        img = Image.open(io.BytesIO(data)).convert("RGB")
    except UnidentifiedImageError as exc:
        raise ValueError("image bytes are not decodable") from exc
    arr = np.asarray(img, dtype=np.float64).transpose(2, 0, 1)  # [3,H,W]
    if arr.shape[1:] != (size, size):
        arr = resize_bilinear(arr, (size, size))
    return np.clip(np.round(arr), 0, 255).astype(np.uint8)


def _mask_png(mask: np.ndarray) -> bytes:
    from PIL import Image
    buf = io.BytesIO()
    Image.fromarray((mask.astype(np.uint8)) * 255, mode="L").save(buf, format="PNG")
    return buf.getvalue()


def mask_from_output(output: SegmentationOutput) -> np.ndarray:
    logits = output.mask_logits[output.best_index]
    return logits > 0.0


def create_app(model: ClickSegNet, session_cap: int = DEFAULT_SESSION_CAP,
               studio_dir: str | None = None) -> FastAPI:
    app = FastAPI(title="clickseg", version="1")
    store = SessionStore(session_cap)
    lock = threading.Lock()
    size = model.config.input_size

    def run_model(session: Session) -> dict:
        clicks = session.all_clicks()
        if clicks:
            session.output = model.predict(session.image, PromptSet(clicks=tuple(clicks)))
        else:
            session.output = None
        return session_view(session)

    def session_view(session: Session) -> dict:
        view = {
            "session_id": session.id,
            "size": size,
            "auto_clicks": [click_json(c) for c in session.auto_clicks],
            "clicks": [click_json(c) for c in session.user_clicks],
            "mask_png_ref": None,
            "iou_scores": None,
            "best_index": None,
            "mask_b64": None,
        }
        if session.output is not None:
            view["mask_png_ref"] = f"/v1/session/{session.id}/mask.png"
            view["iou_scores"] = [float(s) for s in session.output.iou_scores]
            view["best_index"] = int(session.output.best_index)
            if size <= INLINE_MASK_MAX_SIZE:
                png = _mask_png(mask_from_output(session.output))
                view["mask_b64"] = base64.b64encode(png).decode("ascii")
        return view

    def click_json(c: Click) -> dict:
        return {"x": c.x, "y": c.y, "polarity": c.polarity}

    def get_session_or_404(session_id: str) -> Session:
        try:
            return store.get(session_id)
        except KeyError:
            raise HTTPException(status_code=404, detail=f"unknown session {session_id!r}")

    @app.get("/v1/healthz")
    def healthz():
        return {"status": "ok", "input_size": size}

    @app.get("/v1/model")
    def model_info():
        return {"config": model.config.to_dict(), "mask_count": model.config.mask_count}

    @app.post("/v1/session")
    async def create_session(request: Request):
        body = await request.body()
        content_type = request.headers.get("content-type", "")
        heatmap = None
        if content_type.startswith("image/"):
            image_bytes = body
        else:
            import json as _json
            try:
                payload = _json.loads(body)
                image_bytes = base64.b64decode(payload["image_b64"])
                if payload.get("heatmap_b64"):
                    heatmap = S.heatmap_from_bytes(base64.b64decode(payload["heatmap_b64"]))
            except (KeyError, ValueError, TypeError) as exc:
                raise HTTPException(status_code=400, detail=f"bad request body: {exc}")
        try:
            image = decode_image(image_bytes, size)
        except ValueError as exc:
            raise HTTPException(status_code=400, detail=str(exc))
        if heatmap is None:
            heatmap = S.baseline_saliency(image)
        elif heatmap.shape != (size, size):
            heatmap = np.clip(resize_bilinear(heatmap, (size, size)), 0.0, 1.0)
        session = Session(id=uuid.uuid4().hex, image=image)
        with lock:
            try:
                points = S.synthesize_clicks(heatmap)
                session.auto_clicks = [Click(x=x, y=y, polarity="fg") for x, y in points]
            except ValueError:
                # constant heatmap / no blob: start empty, the user clicks first
                session.auto_clicks = []
            view = run_model(session)
            store.put(session)
        return JSONResponse(view)

    @app.get("/v1/session/{session_id}")
    def get_session(session_id: str):
        with lock:
            return session_view(get_session_or_404(session_id))

    @app.post("/v1/session/{session_id}/clicks")
    def add_click(session_id: str, click: dict):
        try:
            x, y = int(click["x"]), int(click["y"])
            polarity = click.get("polarity", "fg")
            parsed = Click(x=x, y=y, polarity=polarity)
        except (KeyError, TypeError, ValueError) as exc:
            raise HTTPException(status_code=400, detail=f"bad click: {exc}")
        if not (0 <= parsed.x < size and 0 <= parsed.y < size):
            raise HTTPException(status_code=400,
                                detail=f"click ({parsed.x},{parsed.y}) outside [0,{size})")
        with lock:
            session = get_session_or_404(session_id)
            session.user_clicks.append(parsed)
            return run_model(session)

    @app.delete("/v1/session/{session_id}/clicks")
    def undo_click(session_id: str):
        with lock:
            session = get_session_or_404(session_id)
            if not session.user_clicks:
                raise HTTPException(status_code=400, detail="no user clicks to undo")
            session.user_clicks.pop()
            return run_model(session)

    @app.get("/v1/session/{session_id}/mask.png")
    def mask_png(session_id: str):
        with lock:
            session = get_session_or_404(session_id)
            if session.output is None:
                raise HTTPException(status_code=404, detail="session has no mask yet")
            png = _mask_png(mask_from_output(session.output))
        return Response(content=png, media_type="image/png")

    @app.get("/v1/session/{session_id}/candidate/{index}.png")
    def candidate_png(session_id: str, index: int):
        with lock:
            session = get_session_or_404(session_id)
            if session.output is None:
                raise HTTPException(status_code=404, detail="session has no mask yet")
            if not (0 <= index < session.output.mask_logits.shape[0]):
                raise HTTPException(status_code=404, detail=f"no candidate {index}")
            png = _mask_png(session.output.mask_logits[index] > 0.0)
        return Response(content=png, media_type="image/png")

    if studio_dir is not None:
        from fastapi.staticfiles import StaticFiles
        app.mount("/studio", StaticFiles(directory=studio_dir, html=True), name="studio")

    return app
