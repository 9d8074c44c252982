"""HTTP surface: POST /segment and GET /healthz.

/segment accepts either a JSON body carrying a base64 PNG or a multipart
upload, runs the selected backend, and answers with the mask-document
JSON itself (no wrapper). Malformed payloads get 400 with a
machine-readable error slug; the model backend answers 503 until a model
is actually installed. The stub path is stateless, so concurrent
requests need no coordination.
"""

from __future__ import annotations

import base64
import binascii
import io
import threading
from dataclasses import dataclass, field
from typing import Any

import numpy as np
from fastapi import FastAPI, Request
from fastapi.responses import JSONResponse
from PIL import Image
from starlette.datastructures import UploadFile

from .stub import StubParams, segment_image

_ALLOWED_FIELDS = {"backend", "threshold", "min_area", "connectivity",
                   "image_id"}
_INT_FIELDS = ("threshold", "min_area", "connectivity")


class PayloadError(Exception):
    """Client-side payload problem: slug plus human-readable detail."""

    def __init__(self, slug: str, detail: str):
        super().__init__(detail)
        self.slug = slug
        self.detail = detail


@dataclass
class ModelGate:
    """Where a wrapped segmentation model would live.

    None is shipped here; a real deployment loads one and serializes its
    inference behind the lock. The HTTP contract stays the same either
    way: the schema is the interface, not the model.
    """

    loaded: bool = False
    lock: threading.Lock = field(default_factory=threading.Lock, repr=False)


def _error(status: int, slug: str, detail: str) -> JSONResponse:
    return JSONResponse(status_code=status,
                        content={"error": slug, "detail": detail})


def _coerce_int(name: str, value: Any) -> int:
    # bools are ints and floats truncate; only int and digit strings pass
    if isinstance(value, (bool, float)):
        raise PayloadError("bad_field", f"{name} must be an integer")
    try:
        return int(value)
    except (TypeError, ValueError):
        raise PayloadError("bad_field", f"{name} must be an integer") from None


def _parse_fields(fields: dict[str, Any]) -> tuple[str, str, StubParams]:
    unknown = set(fields) - _ALLOWED_FIELDS
    if unknown:
        raise PayloadError("unknown_field",
                           f"unknown field(s): {', '.join(sorted(unknown))}")
    backend = fields.get("backend", "stub")
    if backend not in ("stub", "model"):
        raise PayloadError("unknown_backend",
                           f"backend must be 'stub' or 'model', got {backend!r}")
    image_id = fields.get("image_id", "upload")
    if not isinstance(image_id, str) or not image_id:
        raise PayloadError("bad_field", "image_id must be a non-empty string")
    kwargs = {name: _coerce_int(name, fields[name])
              for name in _INT_FIELDS if name in fields}
    try:
        params = StubParams(**kwargs)
    except ValueError as exc:
        raise PayloadError("bad_params", str(exc)) from None
    return backend, image_id, params


def _decode_png(data: bytes) -> np.ndarray:
    try:
        img = Image.open(io.BytesIO(data))
        img.load()
    except Exception:
        raise PayloadError("undecodable_image",
                           "image bytes are not a decodable image") from None
    if img.format != "PNG":
        raise PayloadError("unsupported_image_format",
                           f"expected PNG, got {img.format}")
    return np.asarray(img.convert("RGB"))


async def _extract_payload(request: Request) -> tuple[bytes, dict[str, Any]]:
    """Image bytes plus the remaining fields, from JSON or multipart."""
    content_type = request.headers.get("content-type", "")
    if content_type.startswith("application/json"):
        try:
            body = await request.json()
        except Exception:
            raise PayloadError("invalid_json",
                               "request body is not valid JSON") from None
        if not isinstance(body, dict):
            raise PayloadError("invalid_json",
                               "request body must be a JSON object")
        if "image_base64" not in body:
            raise PayloadError("missing_image", "image_base64 is required")
        encoded = body.pop("image_base64")
        if not isinstance(encoded, str):
            raise PayloadError("bad_field", "image_base64 must be a string")
        try:
            data = base64.b64decode(encoded, validate=True)
        except binascii.Error:
            raise PayloadError("bad_base64",
                               "image_base64 is not valid base64") from None
        return data, body
    if content_type.startswith("multipart/form-data"):
        form = await request.form()
        upload = form.get("image")
        if not isinstance(upload, UploadFile):
            raise PayloadError("missing_image",
                               "multipart uploads need an 'image' file part")
        data = await upload.read()
        fields = {key: form[key] for key in form if key != "image"}
        return data, fields
    raise PayloadError(
        "unsupported_content_type",
        "send application/json with image_base64 or multipart/form-data")


def create_app() -> FastAPI:
    app = FastAPI(title="seg-sidecar", docs_url=None, redoc_url=None)
    gate = ModelGate()

    @app.get("/healthz")
    def healthz() -> dict[str, Any]:
        return {"status": "ok", "backend": "stub",
                "model_loaded": gate.loaded}

    @app.post("/segment")
    async def segment(request: Request) -> JSONResponse:
        try:
            data, fields = await _extract_payload(request)
            backend, image_id, params = _parse_fields(fields)
            if backend == "model" and not gate.loaded:
                return _error(503, "model_unavailable",
                              "no segmentation model is installed; "
                              "use the stub backend")
            rgb = _decode_png(data)
        except PayloadError as exc:
            return _error(400, exc.slug, exc.detail)
        return JSONResponse(segment_image(rgb, params, image_id))

    return app
