"""Segmentation sidecar: an HTTP service that turns an uploaded image
into mask-document JSON.

The deterministic stub backend (luminance threshold plus connected
components) stands in for a real segmentation model so downstream
pipelines can run without model weights; the schema, not the model, is
the contract.
"""

from .app import ModelGate, PayloadError, create_app
from .stub import StubParams, luminance, rle_counts, segment_image

__version__ = "0.1.0"

__all__ = [
    "ModelGate",
    "PayloadError",
    "StubParams",
    "create_app",
    "luminance",
    "rle_counts",
    "segment_image",
]
