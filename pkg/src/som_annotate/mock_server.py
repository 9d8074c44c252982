"""Local test double for the VLM endpoint.

Serves the same chat-completions wire protocol the gateway speaks, with a
pluggable reply policy. The oracle policy answers mark-selection prompts
by picking the candidate whose bbox maximizes IoU with the stored ground
truth, so end-to-end runs have an exactly predictable outcome.
"""

from __future__ import annotations

import json
import logging
import re
import threading
from dataclasses import dataclass, field
from http.server import BaseHTTPRequestHandler, ThreadingHTTPServer
from pathlib import Path
from typing import Protocol

from .core import BBox, RegionSet, SomAnnotateError, iou, union_pixels
from .masks import load_ground_truth

log = logging.getLogger(__name__)


class PolicyError(SomAnnotateError):
    """The policy could not produce a reply for this request."""


class ReplyPolicy(Protocol):
    def reply(self, prompt: str, n_images: int) -> str: ...


_IMAGE_ID_RE = re.compile(r"^Image id: (.+?)\.$", re.MULTILINE)
_DIRECT_MARKER = "JSON array"


def _image_id_from_prompt(prompt: str) -> str:
    match = _IMAGE_ID_RE.search(prompt)
    if match is None:
        raise PolicyError("prompt carries no 'Image id:' line to route on")
    return match.group(1)


@dataclass(frozen=True)
class OraclePolicy:
    """Answer from ground truth: best candidate by IoU, or GT boxes for
    direct prompts.

    Expects `<image_id>.json` ground-truth files under gt_dir and
    `<image_id>.candidates.json` sidecars under candidates_dir, as
    persisted by the annotate pipeline.
    """

    gt_dir: Path
    candidates_dir: Path

    def reply(self, prompt: str, n_images: int) -> str:
        image_id = _image_id_from_prompt(prompt)
        gt_path = self.gt_dir / f"{image_id}.json"
        if not gt_path.exists():
            raise PolicyError(f"no ground truth file {gt_path}")
        gt = load_ground_truth(gt_path.read_bytes())
        if _DIRECT_MARKER in prompt:
            boxes = [m.as_list() for m in gt.regions.members
                     if isinstance(m, BBox)]
            return json.dumps(boxes)
        sidecar_path = self.candidates_dir / f"{image_id}.candidates.json"
        if not sidecar_path.exists():
            raise PolicyError(f"no candidate sidecar {sidecar_path}")
        sidecar = json.loads(sidecar_path.read_text("utf-8"))
        width, height = sidecar["width"], sidecar["height"]
        candidates = {int(mark): BBox.from_list(box)
                      for mark, box in sidecar["candidates"].items()}
        if not candidates:
            return "NONE"
        gt_pixels = union_pixels(gt.regions)

        def score(mark: int):
            box_set = RegionSet.from_boxes(width, height, [candidates[mark]])
            return iou(gt_pixels, union_pixels(box_set))

        best = min(candidates, key=lambda m: (-score(m), m))
        return str(best)


@dataclass(frozen=True)
class FixedPolicy:
    """Always select the same mark."""

    mark: int

    def reply(self, prompt: str, n_images: int) -> str:
        return str(self.mark)


@dataclass(frozen=True)
class NonePolicy:
    """Always decline: no candidate matches."""

    def reply(self, prompt: str, n_images: int) -> str:
        return "NONE"


@dataclass
class ScriptPolicy:
    """Replay canned reply lines in order, one per request."""

    lines: tuple[str, ...]
    _cursor: int = 0
    _lock: threading.Lock = field(default_factory=threading.Lock, repr=False)

    @classmethod
    def from_file(cls, path: Path | str) -> "ScriptPolicy":
        text = Path(path).read_text("utf-8")
        return cls(lines=tuple(line for line in text.splitlines() if line))

    def reply(self, prompt: str, n_images: int) -> str:
        with self._lock:
            if self._cursor >= len(self.lines):
                raise PolicyError(
                    f"script exhausted after {len(self.lines)} replies")
            line = self.lines[self._cursor]
            self._cursor += 1
        return line


class _Handler(BaseHTTPRequestHandler):
    policy: ReplyPolicy  # set per-server via subclassing

    def do_POST(self) -> None:
        try:
            length = int(self.headers.get("Content-Length", "0"))
            body = json.loads(self.rfile.read(length).decode("utf-8"))
            content = body["messages"][0]["content"]
            prompts = [part["text"] for part in content if part.get("type") == "text"]
            n_images = sum(1 for part in content if part.get("type") == "image")
            if len(prompts) != 1:
                raise ValueError(f"expected exactly one text part, got {len(prompts)}")
        except (ValueError, KeyError, IndexError, TypeError) as exc:
            self._send(400, {"error": f"malformed request: {exc}"})
            return
        try:
            text = type(self).policy.reply(prompts[0], n_images)
        except Exception as exc:
            log.warning("policy failed: %s", exc)
            self._send(500, {"error": str(exc)})
            return
        self._send(200, {"choices": [{"message": {"content": text}}]})

    def _send(self, status: int, payload: dict) -> None:
        data = json.dumps(payload).encode("utf-8")
        self.send_response(status)
        self.send_header("Content-Type", "application/json")
        self.send_header("Content-Length", str(len(data)))
        self.end_headers()
        self.wfile.write(data)

    def log_message(self, format: str, *args) -> None:
        log.debug("mock server: " + format, *args)


@dataclass
class MockServerHandle:
    """A running mock endpoint; close() stops it and joins the thread."""

    server: ThreadingHTTPServer
    thread: threading.Thread

    @property
    def port(self) -> int:
        return self.server.server_address[1]

    @property
    def url(self) -> str:
        host = self.server.server_address[0]
        return f"http://{host}:{self.port}/v1/chat/completions"

    def close(self) -> None:
        self.server.shutdown()
        self.thread.join()
        self.server.server_close()

    def __enter__(self) -> "MockServerHandle":
        return self

    def __exit__(self, *exc_info) -> None:
        self.close()


def run_mock_server(policy: ReplyPolicy, host: str = "127.0.0.1",
                    port: int = 0) -> MockServerHandle:
    """Start the mock endpoint on a daemon thread and return its handle.

    Port 0 picks a free port; a busy explicit port raises OSError.
    """
    handler = type("BoundHandler", (_Handler,), {"policy": policy})
    server = ThreadingHTTPServer((host, port), handler)
    thread = threading.Thread(target=server.serve_forever, daemon=True)
    thread.start()
    log.info("mock server listening on port %d", server.server_address[1])
    return MockServerHandle(server=server, thread=thread)
