"""Record a real service conversation for the frontend end-to-end test.

Drives the annotation service through the scripted session the UI test
replays (upload, three clicks, threshold change, one vertex drag, export)
and stores every HTTP exchange plus the final export bytes. The frontend
test suite then runs the same event log through the client code against
these recorded responses and asserts the exported file is bitwise equal.

Run from the repository root after installing the Python package:

    python3 frontend/scripts/record_fixtures.py
"""

import base64
import io
import json
from pathlib import Path

import numpy as np
from fastapi.testclient import TestClient
from PIL import Image

from edgeflow.model import ModelConfig, build_model
from edgeflow.service import create_app

FIXTURE_PATH = Path(__file__).resolve().parent.parent / "tests" / "fixtures" / "e2e-session.json"

CLICKS = [(10, 8, "positive"), (22, 30, "positive"), (30, 20, "negative")]
THRESHOLD_CANDIDATES = [0.6, 0.55, 0.45, 0.4]
VERTEX_DELTA = (3.0, 2.0)


def scene_png(h: int = 40, w: int = 48, seed: int = 7) -> bytes:
    rng = np.random.default_rng(seed)
    arr = (rng.random((h, w, 3)) * 255).astype(np.uint8)
    buf = io.BytesIO()
    Image.fromarray(arr).save(buf, format="PNG")
    return buf.getvalue()


def main() -> None:
    model = build_model(ModelConfig(base_channels=8, input_size=(32, 32)), seed=0)
    client = TestClient(create_app(model, max_side=256))
    exchanges = []

    def record(method: str, path: str, response, request_json=None) -> None:
        entry = {
            "method": method,
            "path": path,
            "status": response.status_code,
            "content_type": response.headers.get("content-type", ""),
        }
        if request_json is not None:
            entry["request_json"] = request_json
        if entry["content_type"].startswith("application/json"):
            entry["json"] = response.json()
        else:
            entry["body_b64"] = base64.b64encode(response.content).decode("ascii")
        exchanges.append(entry)

    image = scene_png()
    r = client.post("/sessions", files={"image": ("scene.png", image, "image/png")})
    assert r.status_code == 201, r.text
    record("POST", "/sessions", r)
    sid = r.json()["id"]

    r = client.get(f"/sessions/{sid}")
    record("GET", f"/sessions/{sid}", r)

    for x, y, polarity in CLICKS:
        body = {"x": x, "y": y, "polarity": polarity}
        r = client.post(f"/sessions/{sid}/clicks", json=body)
        assert r.status_code == 200, r.text
        record("POST", f"/sessions/{sid}/clicks", r, request_json=body)

    threshold = None
    for candidate in THRESHOLD_CANDIDATES:
        r = client.patch(f"/sessions/{sid}/config", json={"threshold": candidate})
        assert r.status_code == 200, r.text
        if len(r.json()["polygon"]) >= 3:
            threshold = candidate
            record("PATCH", f"/sessions/{sid}/config", r,
                   request_json={"threshold": candidate})
            break
    assert threshold is not None, "no candidate threshold kept a polygon alive"

    polygon = exchanges[-1]["json"]["polygon"]
    x0, y0 = polygon[0]
    move = {"op": "move", "index": 0,
            "x": x0 + VERTEX_DELTA[0], "y": y0 + VERTEX_DELTA[1]}
    r = client.patch(f"/sessions/{sid}/polygon", json=move)
    assert r.status_code == 200, r.text
    record("PATCH", f"/sessions/{sid}/polygon", r, request_json=move)

    r = client.get(f"/sessions/{sid}/export", params={"format": "mask_png"})
    assert r.status_code == 200
    record("GET", f"/sessions/{sid}/export?format=mask_png", r)

    fixture = {
        "image_b64": base64.b64encode(image).decode("ascii"),
        "session_id": sid,
        "clicks": [list(c) for c in CLICKS],
        "threshold": threshold,
        "vertex_delta": list(VERTEX_DELTA),
        "exchanges": exchanges,
        "export_b64": base64.b64encode(r.content).decode("ascii"),
    }
    FIXTURE_PATH.parent.mkdir(parents=True, exist_ok=True)
    FIXTURE_PATH.write_text(json.dumps(fixture, indent=1))
    print(f"wrote {FIXTURE_PATH} ({len(exchanges)} exchanges, "
          f"threshold {threshold}, session {sid})")


if __name__ == "__main__":
    main()
