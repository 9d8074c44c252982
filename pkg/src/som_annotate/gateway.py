"""VLM gateway: prompt construction, HTTP submission with retry, transcript
record/replay, and reply parsing.

The wire protocol is an OpenAI-style chat-completions POST with base64 PNG
image parts; endpoint and model name are fully configurable, and the API
key comes from the SOM_ANNOTATE_API_KEY environment variable. Transcripts
are keyed by a digest of the request content (prompt hash, image hashes,
model name) so a replayed pipeline run is a pure function of its inputs
and the transcript store.
"""

from __future__ import annotations

import base64
import hashlib
import json
import math
import os
import re
import threading
import time
from dataclasses import dataclass, replace
from pathlib import Path
from tempfile import NamedTemporaryFile
from typing import Any, Mapping, Sequence

import requests

from .core import BBox, FeatureKind, SomAnnotateError, Strategy
from .filtering import Candidate

API_KEY_ENV = "SOM_ANNOTATE_API_KEY"


class MissingTemplate(SomAnnotateError):
    """No prompt template registered for the requested feature."""


class UnresolvedPlaceholder(SomAnnotateError):
    """A template references a placeholder with no supplied value."""


class TransportError(SomAnnotateError):
    """The endpoint stayed unreachable (or kept failing) through all retries."""


class EndpointError(SomAnnotateError):
    """The endpoint rejected the request (4xx other than 429)."""


class ReplayMiss(SomAnnotateError):
    """Replay mode found no stored transcript for the request digest."""


class UnparseableReply(SomAnnotateError):
    """The model reply carried neither a usable answer nor an explicit none."""


class UnknownMark(SomAnnotateError):
    """A selected mark has no corresponding candidate."""


@dataclass(frozen=True)
class PromptTemplate:
    """Two-part annotation guidance: what the feature looks like, then what
    to do with the image(s). Placeholders use {name} syntax."""

    feature_description: str
    instruction: str
    direct_instruction: str | None = None


_STRATEGY_NOTES = {
    Strategy.NC: (
        "You are given one image in which the candidate objects were cut out "
        "of a satellite photo and placed on a plain white background."),
    Strategy.IC: (
        "You are given one satellite image in which the candidate objects are "
        "outlined with boxes."),
    Strategy.COMB: (
        "You are given two images of the same candidates: the first shows them "
        "cut out on a plain white background, the second outlines them inside "
        "the original satellite image. Mark numbers agree across both."),
}

DEFAULT_TEMPLATES: Mapping[FeatureKind, PromptTemplate] = {
    FeatureKind.STOP_LINE: PromptTemplate(
        feature_description=(
            "A stop line is a solid, light-colored transverse bar painted "
            "across a traffic lane just before an intersection or crosswalk. "
            "Seen from above it is a short, thick stripe roughly perpendicular "
            "to the direction of travel, usually white paint on dark asphalt."),
        instruction=(
            "{strategy_note} Every candidate is labeled with a red numbered "
            "mark. Decide which candidate(s) are actually a {feature_name}."),
    ),
    FeatureKind.RAISED_TABLE: PromptTemplate(
        feature_description=(
            "A raised table is a flat-topped elevation of the road surface, "
            "such as a speed table or raised crossing. From above it is a "
            "broad patch spanning the roadway, often edged by light-colored "
            "triangle or chevron ramp markings."),
        instruction=(
            "{strategy_note} Every candidate is labeled with a red numbered "
            "mark. Decide which candidate(s) are actually a {feature_name}."),
    ),
}

DEFAULT_DIRECT_INSTRUCTION = (
    "Annotate every {feature_name} in this {width}x{height} satellite image. "
    "Reply with a JSON array of pixel bounding boxes, each as [x, y, w, h] "
    "measured from the top-left corner. Reply with [] if there is none.")

_PLACEHOLDER_RE = re.compile(r"\{([a-zA-Z0-9_]+)\}")


def render_template(text: str, values: Mapping[str, Any]) -> str:
    """Substitute every {name} placeholder; unknown names are an error."""

    def _sub(match: re.Match[str]) -> str:
        name = match.group(1)
        if name not in values:
            raise UnresolvedPlaceholder(f"no value for placeholder {{{name}}}")
        return str(values[name])

    return _PLACEHOLDER_RE.sub(_sub, text)


def _lookup_template(feature: FeatureKind,
                     templates: Mapping[FeatureKind, PromptTemplate]) -> PromptTemplate:
    try:
        return templates[feature]
    except KeyError:
        raise MissingTemplate(
            f"no prompt template registered for feature {feature.value!r}") from None


def build_prompt(feature: FeatureKind, strategy: Strategy, n_candidates: int,
                 templates: Mapping[FeatureKind, PromptTemplate] = DEFAULT_TEMPLATES,
                 image_id: str | None = None) -> str:
    """Render the mark-selection prompt for one SoM request.

    The reply protocol line is appended by this function rather than left
    to the template, so the stated mark range 1..n and the "number(s) or
    NONE" reply format are always present.
    """
    if strategy not in (Strategy.NC, Strategy.IC, Strategy.COMB):
        raise ValueError(f"mark-selection prompts are for SoM strategies, got {strategy}")
    if n_candidates < 1:
        raise ValueError(f"need at least one candidate, got {n_candidates}")
    template = _lookup_template(feature, templates)
    values = {
        "feature_name": feature.display_name.lower(),
        "strategy": strategy.value,
        "strategy_note": _STRATEGY_NOTES[strategy],
        "n_candidates": n_candidates,
    }
    if image_id is not None:
        values["image_id"] = image_id
    parts = []
    if image_id is not None:
        parts.append(f"Image id: {image_id}.")
    parts.append(render_template(template.feature_description, values))
    parts.append(render_template(template.instruction, values))
    parts.append(
        f"Valid marks are 1 through {n_candidates}. Reply with the mark "
        f"number(s) of the matching candidate(s), or NONE if no candidate matches.")
    return "\n\n".join(parts)


def build_direct_prompt(feature: FeatureKind, width: int, height: int,
                        templates: Mapping[FeatureKind, PromptTemplate] = DEFAULT_TEMPLATES,
                        image_id: str | None = None) -> str:
    """Render the direct-prompting baseline request (raw image, no marks)."""
    template = _lookup_template(feature, templates)
    values = {
        "feature_name": feature.display_name.lower(),
        "width": width,
        "height": height,
    }
    if image_id is not None:
        values["image_id"] = image_id
    parts = []
    if image_id is not None:
        parts.append(f"Image id: {image_id}.")
    parts.append(render_template(template.feature_description, values))
    instruction = template.direct_instruction or DEFAULT_DIRECT_INSTRUCTION
    parts.append(render_template(instruction, values))
    return "\n\n".join(parts)


@dataclass(frozen=True)
class VlmRequest:
    """One model call: rendered prompt plus one or two PNG payloads."""

    endpoint: str
    model_name: str
    prompt: str
    images: tuple[bytes, ...]
    timeout_s: float = 60.0
    max_retries: int = 3

    def __post_init__(self) -> None:
        if not 1 <= len(self.images) <= 2:
            raise ValueError(f"requests carry 1 or 2 images, got {len(self.images)}")
        if self.max_retries < 0:
            raise ValueError(f"max_retries must be >= 0, got {self.max_retries}")


@dataclass(frozen=True)
class Transcript:
    """A stored request/response pair enabling deterministic replay.

    The digest is a pure function of the request content; timing and
    attempt count are recorded for audit but never enter the digest.
    """

    digest: str
    model_name: str
    prompt: str
    image_sha256s: tuple[str, ...]
    response_text: str
    elapsed_s: float
    attempts: int

    def to_json_dict(self) -> dict:
        return {
            "digest": self.digest,
            "model_name": self.model_name,
            "prompt": self.prompt,
            "image_sha256s": list(self.image_sha256s),
            "response_text": self.response_text,
            "elapsed_s": self.elapsed_s,
            "attempts": self.attempts,
        }

    @classmethod
    def from_json_dict(cls, obj: Mapping[str, Any]) -> "Transcript":
        return cls(
            digest=obj["digest"],
            model_name=obj["model_name"],
            prompt=obj["prompt"],
            image_sha256s=tuple(obj["image_sha256s"]),
            response_text=obj["response_text"],
            elapsed_s=float(obj["elapsed_s"]),
            attempts=int(obj["attempts"]),
        )


@dataclass(frozen=True)
class MarkSelection:
    """Marks the model chose, in first-appearance order, plus the raw text."""

    chosen: tuple[int, ...]
    raw: str


def request_digest(req: VlmRequest) -> str:
    """Content digest: model name, prompt hash, and image content hashes.

    Stable under JSON key order and retry timing; any image byte change
    changes the digest.
    """
    payload = {
        "model": req.model_name,
        "prompt_sha256": hashlib.sha256(req.prompt.encode("utf-8")).hexdigest(),
        "images": [hashlib.sha256(img).hexdigest() for img in req.images],
    }
    canonical = json.dumps(payload, sort_keys=True, separators=(",", ":"))
    return hashlib.sha256(canonical.encode("utf-8")).hexdigest()


class TranscriptStore:
    """One JSON file per digest under a directory.

    Writes go through a temp file and an atomic rename, so concurrent
    readers never observe a partial transcript.
    """

    def __init__(self, root: Path | str):
        self.root = Path(root)

    def path_for(self, digest: str) -> Path:
        return self.root / f"{digest}.json"

    def get(self, digest: str) -> Transcript | None:
        path = self.path_for(digest)
        if not path.exists():
            return None
        return Transcript.from_json_dict(json.loads(path.read_text("utf-8")))

    def put(self, transcript: Transcript) -> None:
        self.root.mkdir(parents=True, exist_ok=True)
        payload = json.dumps(transcript.to_json_dict(), indent=2, sort_keys=True)
        with NamedTemporaryFile("w", dir=self.root, suffix=".tmp",
                                delete=False, encoding="utf-8") as tmp:
            tmp.write(payload)
            tmp_path = Path(tmp.name)
        os.replace(tmp_path, self.path_for(transcript.digest))


class RateLimiter:
    """Token bucket limiting requests per minute across worker threads."""

    def __init__(self, per_minute: float | None):
        self.per_minute = per_minute
        self._lock = threading.Lock()
        self._tokens = 1.0 if per_minute else 0.0
        self._last = time.monotonic()

    def acquire(self) -> None:
        if not self.per_minute:
            return
        rate = self.per_minute / 60.0
        while True:
            with self._lock:
                now = time.monotonic()
                self._tokens = min(1.0, self._tokens + (now - self._last) * rate)
                self._last = now
                if self._tokens >= 1.0:
                    self._tokens -= 1.0
                    return
                wait = (1.0 - self._tokens) / rate
            time.sleep(wait)


def build_wire_body(req: VlmRequest) -> dict:
    """Chat-completions JSON body with base64 PNG image parts."""
    content: list[dict] = [{"type": "text", "text": req.prompt}]
    for image in req.images:
        content.append({
            "type": "image",
            "image_base64": base64.b64encode(image).decode("ascii"),
        })
    return {"model": req.model_name,
            "messages": [{"role": "user", "content": content}]}


def _extract_reply_text(body: Any) -> str:
    try:
        content = body["choices"][0]["message"]["content"]
    except (KeyError, IndexError, TypeError) as exc:
        raise EndpointError(f"malformed endpoint response: {exc!r}") from exc
    if not isinstance(content, str):
        raise EndpointError(f"endpoint reply content is not text: {content!r}")
    return content


def _perform_request(req: VlmRequest, limiter: RateLimiter | None,
                     backoff_base: float) -> tuple[str, int]:
    body = build_wire_body(req)
    headers = {}
    api_key = os.environ.get(API_KEY_ENV)
    if api_key:
        headers["Authorization"] = f"Bearer {api_key}"
    attempts = 0
    last_failure = "no attempt made"
    while attempts <= req.max_retries:
        if attempts:
            time.sleep(backoff_base * 2 ** (attempts - 1))
        attempts += 1
        if limiter is not None:
            limiter.acquire()
        try:
            response = requests.post(req.endpoint, json=body, headers=headers,
                                     timeout=req.timeout_s)
        except requests.RequestException as exc:
            last_failure = f"transport failure: {exc}"
            continue
        if response.status_code == 200:
            try:
                parsed = response.json()
            except ValueError as exc:
                raise EndpointError(f"endpoint returned non-JSON body: {exc}") from exc
            return _extract_reply_text(parsed), attempts
        if response.status_code == 429 or response.status_code >= 500:
            last_failure = f"status {response.status_code}"
            continue
        raise EndpointError(
            f"endpoint rejected request: status {response.status_code}: "
            f"{response.text[:500]}")
    raise TransportError(
        f"giving up after {attempts} attempt(s); last failure: {last_failure}")


def request_annotation(req: VlmRequest, mode: str,
                       store: TranscriptStore | None = None,
                       limiter: RateLimiter | None = None,
                       backoff_base: float = 0.5) -> Transcript:
    """Submit a request (or replay it) and return its transcript.

    Modes: "live" performs the HTTP round trip with exponential backoff on
    transport errors, 5xx, and 429; "record" is live plus persisting the
    transcript keyed by digest; "replay" returns the stored transcript and
    never touches the network.
    """
    if mode not in ("live", "record", "replay"):
        raise ValueError(f"mode must be live, record, or replay, got {mode!r}")
    if mode in ("record", "replay") and store is None:
        raise ValueError(f"{mode} mode requires a transcript store")
    digest = request_digest(req)
    if mode == "replay":
        stored = store.get(digest)
        if stored is None:
            raise ReplayMiss(f"no stored transcript for digest {digest}")
        return stored
    start = time.monotonic()
    text, attempts = _perform_request(req, limiter, backoff_base)
    transcript = Transcript(
        digest=digest,
        model_name=req.model_name,
        prompt=req.prompt,
        image_sha256s=tuple(hashlib.sha256(i).hexdigest() for i in req.images),
        response_text=text,
        elapsed_s=time.monotonic() - start,
        attempts=attempts,
    )
    if mode == "record":
        store.put(transcript)
    return transcript


_INT_TOKEN_RE = re.compile(r"\d+")
_NONE_RE = re.compile(r"\bnone\b", re.IGNORECASE)


def parse_mark_selection(raw: str, valid_marks: set[int]) -> MarkSelection:
    """Extract chosen marks from a model reply.

    Integer tokens are scanned in order of first appearance, deduplicated,
    and kept only when they are valid marks. A standalone "none" (any
    case) with no valid mark present is an explicit empty selection. A
    reply with neither is unparseable.
    """
    if not valid_marks:
        raise ValueError("valid_marks must be nonempty")
    chosen: list[int] = []
    seen: set[int] = set()
    for token in _INT_TOKEN_RE.findall(raw):
        value = int(token)
        if value in seen:
            continue
        seen.add(value)
        if value in valid_marks:
            chosen.append(value)
    if chosen:
        return MarkSelection(chosen=tuple(chosen), raw=raw)
    if _NONE_RE.search(raw):
        return MarkSelection(chosen=(), raw=raw)
    raise UnparseableReply(
        f"reply contains neither a valid mark nor an explicit NONE: {raw[:200]!r}")


def parse_direct_boxes(raw: str, width: int, height: int) -> list[BBox]:
    """Extract [x, y, w, h] boxes from a direct-prompting reply.

    Takes the first JSON array (markdown fences are fine, the scan is
    position-based) whose entries are all 4-number arrays, clamps each box
    to the image bounds, and drops entries that clamp away to nothing. An
    empty array is a valid, empty result.
    """
    decoder = json.JSONDecoder()
    for pos, char in enumerate(raw):
        if char != "[":
            continue
        try:
            value, _ = decoder.raw_decode(raw, pos)
        except ValueError:
            continue
        if isinstance(value, list) and all(_is_box_entry(e) for e in value):
            return _clamp_boxes(value, width, height)
    raise UnparseableReply(
        f"no JSON array of [x, y, w, h] entries found in: {raw[:200]!r}")


def _is_box_entry(entry: Any) -> bool:
    return (isinstance(entry, list) and len(entry) == 4 and
            all(isinstance(v, (int, float)) and not isinstance(v, bool)
                for v in entry))


def _clamp_boxes(entries: Sequence[Sequence[float]], width: int,
                 height: int) -> list[BBox]:
    boxes: list[BBox] = []
    for x, y, w, h in entries:
        if not all(math.isfinite(v) for v in (x, y, w, h)):
            continue
        x0 = max(0.0, float(x))
        y0 = max(0.0, float(y))
        x1 = min(float(width), float(x) + float(w))
        y1 = min(float(height), float(y) + float(h))
        ix0, iy0 = int(math.floor(x0)), int(math.floor(y0))
        ix1, iy1 = int(math.ceil(x1)), int(math.ceil(y1))
        if ix1 - ix0 < 1 or iy1 - iy0 < 1:
            continue
        boxes.append(BBox(x=ix0, y=iy0, w=ix1 - ix0, h=iy1 - iy0))
    return boxes


def resolve_selection(selection: MarkSelection,
                      candidates: Sequence[Candidate]) -> list[BBox]:
    """Map chosen marks to their candidates' boxes, preserving order."""
    by_mark = {c.mark: c for c in candidates}
    boxes: list[BBox] = []
    for mark in selection.chosen:
        if mark not in by_mark:
            raise UnknownMark(f"selected mark {mark} has no candidate")
        boxes.append(by_mark[mark].bbox)
    return boxes
