"""HTTP annotation service: replay fidelity, locking, editing, exports."""

import io
import json

import numpy as np
import pytest
from fastapi.testclient import TestClient
from PIL import Image

from edgeflow.clicks import Click, binarize
from edgeflow.exports import (
    decode_rle,
    mask_png,
    read_coco_json_like,
    read_mask_png,
    read_voc_xml_like,
)
from edgeflow.model import ModelConfig, build_model
from edgeflow.service import create_app, largest_component, replay_clicks


@pytest.fixture(scope="module")
def model():
    return build_model(ModelConfig(base_channels=8, input_size=(32, 32)), seed=0)


@pytest.fixture()
def client(model):
    return TestClient(create_app(model, max_side=256))


def png_bytes(h=40, w=48, seed=0):
    rng = np.random.default_rng(seed)
    arr = (rng.random((h, w, 3)) * 255).astype(np.uint8)
    buf = io.BytesIO()
    Image.fromarray(arr).save(buf, format="PNG")
    return buf.getvalue()


def open_session(client, h=40, w=48, seed=0):
    r = client.post("/sessions", files={"image": ("scene.png", png_bytes(h, w, seed), "image/png")})
    assert r.status_code == 201
    return r.json()["id"]


def image_array(h=40, w=48, seed=0):
    """The exact float image the service stores for png_bytes(h, w, seed)."""
    img = Image.open(io.BytesIO(png_bytes(h, w, seed)))
    return (np.asarray(img.convert("RGB"), dtype=np.float64) / 255.0).transpose(2, 0, 1)


# ---------------------------------------------------------------------------
# session lifecycle


def test_create_session_reports_size(client):
    r = client.post("/sessions", files={"image": ("a.png", png_bytes(30, 52), "image/png")})
    assert r.status_code == 201
    body = r.json()
    assert body["width"] == 52 and body["height"] == 30
    assert len(body["id"]) == 32


def test_rejects_undecodable_upload(client):
    r = client.post("/sessions", files={"image": ("a.png", b"not a png", "image/png")})
    assert r.status_code == 400


def test_rejects_oversize_upload(client):
    r = client.post("/sessions", files={"image": ("a.png", png_bytes(20, 300), "image/png")})
    assert r.status_code == 413


def test_unknown_session_is_404(client):
    assert client.get("/sessions/deadbeef").status_code == 404
    assert client.post("/sessions/deadbeef/clicks",
                       json={"x": 1, "y": 1, "polarity": "positive"}).status_code == 404


def test_healthz_counts_sessions(client):
    assert client.get("/healthz").json()["sessions"] == 0
    open_session(client)
    body = client.get("/healthz").json()
    assert body["status"] == "ok" and body["sessions"] == 1


# ---------------------------------------------------------------------------
# clicking and replay fidelity


def test_click_chain_replays_bitwise(client, model):
    sid = open_session(client)
    clicks = [(10, 8, "positive"), (30, 20, "negative"), (22, 30, "positive")]
    for x, y, pol in clicks:
        r = client.post(f"/sessions/{sid}/clicks", json={"x": x, "y": y, "polarity": pol})
        assert r.status_code == 200
        assert "inference_ms" in r.json()
    state = client.get(f"/sessions/{sid}").json()
    assert state["click_count"] == 3 and state["probs_available"]

    chain = [Click(x=x, y=y, polarity=p, index=i + 1)
             for i, (x, y, p) in enumerate(clicks)]
    prob = replay_clicks(model, image_array(), chain)
    want = binarize(prob)
    got = decode_rle(state["mask_rle"])
    np.testing.assert_array_equal(got, want)

    exported = client.get(f"/sessions/{sid}/export", params={"format": "mask_png"})
    assert exported.content == mask_png(want)


def test_click_validation(client):
    sid = open_session(client)
    bad = [
        {"x": 10, "y": 10, "polarity": "sideways"},
        {"x": -1, "y": 10, "polarity": "positive"},
        {"x": 10, "y": 999, "polarity": "positive"},
    ]
    for body in bad:
        assert client.post(f"/sessions/{sid}/clicks", json=body).status_code == 400


def test_busy_session_returns_409(client, model):
    sid = open_session(client)
    session = client.app.state.sessions[sid]
    assert session.lock.acquire(blocking=False)
    try:
        r = client.post(f"/sessions/{sid}/clicks",
                        json={"x": 5, "y": 5, "polarity": "positive"})
        assert r.status_code == 409
    finally:
        session.lock.release()
    # and the session still works once released
    r = client.post(f"/sessions/{sid}/clicks",
                    json={"x": 5, "y": 5, "polarity": "positive"})
    assert r.status_code == 200


def test_undo_restores_previous_mask_exactly(client, model):
    sid = open_session(client)
    client.post(f"/sessions/{sid}/clicks", json={"x": 10, "y": 8, "polarity": "positive"})
    one_click = client.get(f"/sessions/{sid}/export", params={"format": "mask_png"}).content
    client.post(f"/sessions/{sid}/clicks", json={"x": 30, "y": 20, "polarity": "negative"})
    r = client.post(f"/sessions/{sid}/undo")
    assert r.status_code == 200 and r.json()["click_count"] == 1
    after_undo = client.get(f"/sessions/{sid}/export", params={"format": "mask_png"}).content
    assert after_undo == one_click


def test_undo_with_no_clicks_is_400(client):
    sid = open_session(client)
    assert client.post(f"/sessions/{sid}/undo").status_code == 400


# ---------------------------------------------------------------------------
# configure: pure post-processing


def test_configure_runs_zero_inferences(client):
    sid = open_session(client)
    client.post(f"/sessions/{sid}/clicks", json={"x": 10, "y": 8, "polarity": "positive"})
    before = client.get("/healthz").json()["inference_count"]
    r = client.patch(f"/sessions/{sid}/config",
                     json={"threshold": 0.7, "largest_cc_only": True})
    assert r.status_code == 200
    body = r.json()
    assert body["threshold"] == 0.7 and body["largest_cc_only"]
    assert client.get("/healthz").json()["inference_count"] == before


def test_threshold_changes_displayed_mask(client, model):
    sid = open_session(client)
    client.post(f"/sessions/{sid}/clicks", json={"x": 10, "y": 8, "polarity": "positive"})
    chain = [Click(x=10, y=8, polarity="positive", index=1)]
    prob = replay_clicks(model, image_array(), chain)
    for threshold in (0.3, 0.5, 0.62):
        client.patch(f"/sessions/{sid}/config", json={"threshold": threshold})
        state = client.get(f"/sessions/{sid}").json()
        np.testing.assert_array_equal(decode_rle(state["mask_rle"]),
                                      binarize(prob, threshold))


def test_threshold_bounds(client):
    sid = open_session(client)
    for bad in (0.0, 1.0, -3.0, 2.0):
        assert client.patch(f"/sessions/{sid}/config",
                            json={"threshold": bad}).status_code == 400


def test_largest_component_tie_breaks_row_major():
    mask = np.zeros((8, 8))
    mask[6:8, 0:2] = 1.0   # area 4, later first pixel
    mask[0:2, 4:6] = 1.0   # area 4, first pixel earlier
    out = largest_component(mask)
    assert out[0, 4] == 1.0 and out[6, 0] == 0.0
    assert largest_component(np.zeros((4, 4))).sum() == 0


# ---------------------------------------------------------------------------
# polygon editing


def polygon_session(client):
    sid = open_session(client)
    client.post(f"/sessions/{sid}/clicks", json={"x": 10, "y": 8, "polarity": "positive"})
    ring = client.get(f"/sessions/{sid}").json()["polygon"]
    if len(ring) < 3:
        pytest.skip("untrained mask produced no polygon")
    return sid, ring


def test_polygon_edit_before_any_mask_is_400(client):
    sid = open_session(client)
    r = client.patch(f"/sessions/{sid}/polygon",
                     json={"op": "move", "index": 0, "x": 1.0, "y": 1.0})
    assert r.status_code == 400


def test_move_marks_dirty_and_move_back_restores(client):
    sid, ring = polygon_session(client)
    x0, y0 = ring[0]
    # a move to the vertex's own position marks the session dirty without
    # changing geometry, giving a bitwise baseline for the edited render
    r = client.patch(f"/sessions/{sid}/polygon",
                     json={"op": "move", "index": 0, "x": x0, "y": y0})
    assert r.status_code == 200 and r.json()["dirty"]
    baseline = client.get(f"/sessions/{sid}/export", params={"format": "mask_png"}).content
    client.patch(f"/sessions/{sid}/polygon",
                 json={"op": "move", "index": 0, "x": x0 + 4.0, "y": y0 + 3.0})
    client.patch(f"/sessions/{sid}/polygon",
                 json={"op": "move", "index": 0, "x": x0, "y": y0})
    restored = client.get(f"/sessions/{sid}/export", params={"format": "mask_png"}).content
    assert restored == baseline


def test_dirty_export_rasterizes_edited_ring(client):
    sid, ring = polygon_session(client)
    state = client.get(f"/sessions/{sid}").json()
    model_mask = decode_rle(state["mask_rle"])
    h, w = model_mask.shape
    # detour through three far corners so the edit must flip many pixels
    corners = [(w - 1.0, 1.0), (w - 1.0, h - 1.0), (1.0, h - 1.0)]
    for offset, (cx, cy) in enumerate(corners):
        r = client.patch(f"/sessions/{sid}/polygon",
                         json={"op": "insert", "index": 1 + offset, "x": cx, "y": cy})
        assert r.status_code == 200
    state = client.get(f"/sessions/{sid}").json()
    assert state["dirty"]
    edited = decode_rle(state["mask_rle"])
    assert not np.array_equal(edited, model_mask)
    exported = read_mask_png(
        client.get(f"/sessions/{sid}/export", params={"format": "mask_png"}).content)
    np.testing.assert_array_equal(exported, edited)


def test_insert_and_delete_vertices(client):
    sid, ring = polygon_session(client)
    n = len(ring)
    r = client.patch(f"/sessions/{sid}/polygon",
                     json={"op": "insert", "index": 1, "x": 12.0, "y": 13.0})
    assert r.status_code == 200
    assert len(r.json()["polygon"]) == n + 1
    r = client.patch(f"/sessions/{sid}/polygon", json={"op": "delete", "index": 1})
    assert len(r.json()["polygon"]) == n


def test_delete_below_three_vertices_rejected(client):
    sid, ring = polygon_session(client)
    while len(ring) > 3:
        r = client.patch(f"/sessions/{sid}/polygon", json={"op": "delete", "index": 0})
        assert r.status_code == 200
        ring = r.json()["polygon"]
    assert client.patch(f"/sessions/{sid}/polygon",
                        json={"op": "delete", "index": 0}).status_code == 400


def test_polygon_edit_validation(client):
    sid, ring = polygon_session(client)
    bad = [
        {"op": "move", "index": len(ring) + 5, "x": 1.0, "y": 1.0},
        {"op": "move", "index": 0},
        {"op": "insert", "index": len(ring) + 1, "x": 1.0, "y": 1.0},
        {"op": "rotate", "index": 0, "x": 1.0, "y": 1.0},
    ]
    for body in bad:
        assert client.patch(f"/sessions/{sid}/polygon", json=body).status_code == 400


# ---------------------------------------------------------------------------
# exports


def test_all_export_formats_round_trip(client):
    sid = open_session(client)
    client.post(f"/sessions/{sid}/clicks", json={"x": 10, "y": 8, "polarity": "positive"})
    mask = decode_rle(client.get(f"/sessions/{sid}").json()["mask_rle"])

    r = client.get(f"/sessions/{sid}/export", params={"format": "mask_png"})
    assert r.headers["content-type"] == "image/png"
    np.testing.assert_array_equal(read_mask_png(r.content), mask)

    r = client.get(f"/sessions/{sid}/export", params={"format": "pseudo_color_png"})
    assert r.headers["content-type"] == "image/png"

    r = client.get(f"/sessions/{sid}/export", params={"format": "voc_xml_like"})
    doc = read_voc_xml_like(r.content)
    assert (doc["width"], doc["height"]) == (48, 40)

    r = client.get(f"/sessions/{sid}/export", params={"format": "coco_json_like"})
    rings, h, w, _ = read_coco_json_like(r.content)
    assert (h, w) == (40, 48)


def test_unknown_export_format_is_400(client):
    sid = open_session(client)
    assert client.get(f"/sessions/{sid}/export",
                      params={"format": "tiff"}).status_code == 400


# ---------------------------------------------------------------------------
# event log


def test_event_log_records_actions(model, tmp_path):
    log = tmp_path / "events.jsonl"
    client = TestClient(create_app(model, max_side=256, event_log_path=log))
    sid = open_session(client)
    client.post(f"/sessions/{sid}/clicks", json={"x": 5, "y": 5, "polarity": "positive"})
    client.patch(f"/sessions/{sid}/config", json={"threshold": 0.6})
    client.post(f"/sessions/{sid}/undo")
    events = [json.loads(line)["event"] for line in log.read_text().splitlines()]
    assert events == ["create", "click", "config", "undo"]
