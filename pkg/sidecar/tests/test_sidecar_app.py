"""HTTP surface: /healthz, /segment payload handling, and error slugs."""

import base64
import concurrent.futures
import io
import json

import numpy as np
import pytest
from fastapi.testclient import TestClient
from PIL import Image

from seg_sidecar import create_app
from seg_sidecar.stub import StubParams, segment_image


@pytest.fixture(scope="module")
def client():
    with TestClient(create_app()) as c:
        yield c


def make_png(arr):
    buf = io.BytesIO()
    Image.fromarray(arr, mode="RGB").save(buf, format="PNG")
    return buf.getvalue()


def square_array():
    arr = np.zeros((10, 10, 3), dtype=np.uint8)
    arr[3:6, 4:7] = 255
    return arr


def square_b64():
    return base64.b64encode(make_png(square_array())).decode("ascii")


def post_json(client, body):
    return client.post("/segment", content=json.dumps(body),
                       headers={"content-type": "application/json"})


class TestHealthz:
    def test_reports_stub_backend(self, client):
        resp = client.get("/healthz")
        assert resp.status_code == 200
        assert resp.json() == {
            "status": "ok", "backend": "stub", "model_loaded": False}

    def test_stable_across_calls(self, client):
        assert client.get("/healthz").json() == client.get("/healthz").json()


class TestSegmentJson:
    def test_matches_direct_stub_call(self, client):
        resp = post_json(client, {"image_base64": square_b64()})
        assert resp.status_code == 200
        assert resp.json() == segment_image(square_array())

    def test_params_forwarded(self, client):
        body = {"image_base64": square_b64(), "threshold": 200,
                "min_area": 2, "connectivity": 8}
        resp = post_json(client, body)
        want = segment_image(square_array(), StubParams(200, 2, 8))
        assert resp.status_code == 200
        assert resp.json() == want

    def test_image_id_override(self, client):
        resp = post_json(client, {"image_base64": square_b64(),
                                  "image_id": "scene42"})
        assert resp.json()["image_id"] == "scene42"

    def test_explicit_stub_backend_accepted(self, client):
        resp = post_json(client, {"image_base64": square_b64(),
                                  "backend": "stub"})
        assert resp.status_code == 200


class TestSegmentMultipart:
    def test_file_upload(self, client):
        resp = client.post(
            "/segment", files={"image": ("t.png", make_png(square_array()))})
        assert resp.status_code == 200
        assert resp.json() == segment_image(square_array())

    def test_form_fields_are_coerced(self, client):
        resp = client.post(
            "/segment",
            files={"image": ("t.png", make_png(square_array()))},
            data={"threshold": "200", "min_area": "2", "connectivity": "8",
                  "image_id": "formcase"})
        want = segment_image(square_array(), StubParams(200, 2, 8),
                             image_id="formcase")
        assert resp.status_code == 200
        assert resp.json() == want


class TestRejections:
    def check(self, resp, slug):
        assert resp.status_code == 400
        body = resp.json()
        assert body["error"] == slug
        assert isinstance(body["detail"], str) and body["detail"]

    def test_unsupported_content_type(self, client):
        resp = client.post("/segment", content=b"raw",
                           headers={"content-type": "text/plain"})
        self.check(resp, "unsupported_content_type")

    def test_invalid_json_syntax(self, client):
        resp = client.post("/segment", content=b"{nope",
                           headers={"content-type": "application/json"})
        self.check(resp, "invalid_json")

    def test_json_array_body(self, client):
        resp = client.post("/segment", content=b"[1, 2]",
                           headers={"content-type": "application/json"})
        self.check(resp, "invalid_json")

    def test_missing_image_json(self, client):
        self.check(post_json(client, {"threshold": 10}), "missing_image")

    def test_missing_image_multipart(self, client):
        resp = client.post(
            "/segment", data={"threshold": "10"},
            files={"picture": ("t.png", make_png(square_array()))})
        self.check(resp, "missing_image")

    def test_urlencoded_form_rejected(self, client):
        resp = client.post("/segment", data={"threshold": "10"})
        self.check(resp, "unsupported_content_type")

    @pytest.mark.parametrize("body", [
        {"image_base64": 1234},
        {"image_base64": None},
    ])
    def test_non_string_image_field(self, client, body):
        self.check(post_json(client, body), "bad_field")

    @pytest.mark.parametrize("value", ["abc", True, 1.5, [1]])
    def test_non_integer_threshold(self, client, value):
        body = {"image_base64": square_b64(), "threshold": value}
        self.check(post_json(client, body), "bad_field")

    def test_bad_base64(self, client):
        self.check(post_json(client, {"image_base64": "@@not-base64@@"}),
                   "bad_base64")

    def test_undecodable_image(self, client):
        junk = base64.b64encode(b"\x89PNG but not really").decode("ascii")
        self.check(post_json(client, {"image_base64": junk}),
                   "undecodable_image")

    def test_non_png_image(self, client):
        buf = io.BytesIO()
        Image.fromarray(square_array(), mode="RGB").save(buf, format="JPEG")
        payload = base64.b64encode(buf.getvalue()).decode("ascii")
        self.check(post_json(client, {"image_base64": payload}),
                   "unsupported_image_format")

    @pytest.mark.parametrize("extra", [
        {"threshold": 999},
        {"threshold": -5},
        {"min_area": 0},
        {"connectivity": 3},
    ])
    def test_out_of_range_params(self, client, extra):
        body = {"image_base64": square_b64(), **extra}
        self.check(post_json(client, body), "bad_params")

    def test_unknown_backend(self, client):
        body = {"image_base64": square_b64(), "backend": "sam2"}
        self.check(post_json(client, body), "unknown_backend")

    def test_unknown_field(self, client):
        body = {"image_base64": square_b64(), "thresh": 5}
        self.check(post_json(client, body), "unknown_field")

    def test_empty_image_id(self, client):
        body = {"image_base64": square_b64(), "image_id": ""}
        self.check(post_json(client, body), "bad_field")


class TestModelBackend:
    def test_unloaded_model_returns_503(self, client):
        resp = post_json(client, {"image_base64": square_b64(),
                                  "backend": "model"})
        assert resp.status_code == 503
        assert resp.json()["error"] == "model_unavailable"

    def test_healthz_unchanged_after_model_request(self, client):
        post_json(client, {"image_base64": square_b64(), "backend": "model"})
        assert client.get("/healthz").json()["model_loaded"] is False


class TestConcurrency:
    def test_parallel_identical_requests_agree(self, client):
        body = {"image_base64": square_b64()}
        with concurrent.futures.ThreadPoolExecutor(max_workers=8) as pool:
            futures = [pool.submit(post_json, client, body)
                       for _ in range(8)]
            results = [f.result() for f in futures]
        assert all(r.status_code == 200 for r in results)
        first = results[0].json()
        assert all(r.json() == first for r in results)
