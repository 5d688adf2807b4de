"""Export writers against their paired readers, plus the RLE wire codec."""

import json

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra import numpy as hnp

from edgeflow.exports import (
    EXPORT_FORMATS,
    PSEUDO_PALETTE,
    coco_json_like,
    decode_rle,
    encode_rle,
    mask_png,
    pseudo_color_png,
    read_coco_json_like,
    read_mask_png,
    read_pseudo_color_png,
    read_voc_xml_like,
    voc_xml_like,
)
from edgeflow.polygons import extract_polygon, rasterize_polygon


def checker(h, w):
    m = np.indices((h, w)).sum(axis=0) % 2
    return m.astype(np.float64)


# ---------------------------------------------------------------------------
# RLE codec


def test_rle_starts_with_zero_run():
    m = np.ones((2, 3))
    rle = encode_rle(m)
    assert rle["counts"][0] == 0  # leading-one mask still starts at the 0 run
    assert rle["counts"][1] == 6


def test_rle_known_example():
    m = np.array([[0, 0, 1, 1, 0], [1, 1, 1, 0, 0]], dtype=np.float64)
    rle = encode_rle(m)
    assert rle == {"width": 5, "height": 2, "counts": [2, 2, 1, 3, 2]}
    np.testing.assert_array_equal(decode_rle(rle), m)


def test_rle_empty_and_full():
    empty = encode_rle(np.zeros((4, 4)))
    assert empty["counts"] == [16]
    np.testing.assert_array_equal(decode_rle(empty), np.zeros((4, 4)))
    full = encode_rle(np.ones((4, 4)))
    assert full["counts"] == [0, 16]


def test_rle_rejects_inconsistent_totals():
    with pytest.raises(ValueError):
        decode_rle({"width": 4, "height": 4, "counts": [3]})


@settings(max_examples=60, deadline=None)
@given(hnp.arrays(np.int8, hnp.array_shapes(min_dims=2, max_dims=2,
                                            min_side=1, max_side=24),
                  elements=st.integers(0, 1)))
def test_rle_round_trips_any_mask(arr):
    m = arr.astype(np.float64)
    np.testing.assert_array_equal(decode_rle(encode_rle(m)), m)


def test_rle_matches_groupby_oracle():
    from itertools import groupby

    rng = np.random.default_rng(3)
    for m in (checker(8, 8), (rng.random((11, 13)) > 0.5).astype(np.float64)):
        flat = m.ravel().astype(int).tolist()
        runs = [len(list(g)) for _, g in groupby(flat)]
        if flat[0] == 1:
            runs = [0] + runs
        assert encode_rle(m)["counts"] == runs
        np.testing.assert_array_equal(decode_rle(encode_rle(m)), m)


# ---------------------------------------------------------------------------
# PNG round trips


def test_mask_png_round_trip_bitwise():
    rng = np.random.default_rng(0)
    for _ in range(10):
        m = (rng.random((19, 23)) > 0.5).astype(np.float64)
        np.testing.assert_array_equal(read_mask_png(mask_png(m)), m)


def test_mask_png_accepts_1xhxw():
    m = np.zeros((1, 6, 6))
    m[0, 2:4, 2:4] = 1.0
    np.testing.assert_array_equal(read_mask_png(mask_png(m)), m[0])


def test_pseudo_color_round_trip_and_palette():
    from PIL import Image
    import io

    m = checker(9, 7)
    data = pseudo_color_png(m, label=2)
    np.testing.assert_array_equal(read_pseudo_color_png(data), m)
    img = Image.open(io.BytesIO(data))
    palette = img.getpalette()[: 3 * len(PSEUDO_PALETTE)]
    flat = [v for rgb in PSEUDO_PALETTE for v in rgb]
    assert palette == flat


def test_pseudo_color_rejects_bad_label():
    with pytest.raises(ValueError):
        pseudo_color_png(np.ones((4, 4)), label=0)
    with pytest.raises(ValueError):
        pseudo_color_png(np.ones((4, 4)), label=len(PSEUDO_PALETTE))


# ---------------------------------------------------------------------------
# COCO-shaped JSON


def test_coco_round_trip_preserves_rings_and_geometry():
    mask = np.zeros((20, 20))
    mask[2:9, 3:15] = 1.0
    rings = extract_polygon(mask, epsilon=0.5)
    data = coco_json_like(rings, 20, 20)
    back, h, w, anns = read_coco_json_like(data)
    assert (h, w) == (20, 20)
    assert back == rings
    assert anns[0]["area"] == pytest.approx(7 * 12)
    assert anns[0]["bbox"] == [3.0, 2.0, 12.0, 7.0]
    np.testing.assert_array_equal(rasterize_polygon(back, 20, 20), mask)


def test_coco_multiple_components_get_separate_annotations():
    mask = np.zeros((16, 16))
    mask[1:4, 1:4] = 1.0
    mask[8:15, 8:15] = 1.0
    rings = extract_polygon(mask, epsilon=0.5)
    _, _, _, anns = read_coco_json_like(coco_json_like(rings, 16, 16))
    assert [a["id"] for a in anns] == [1, 2]
    assert anns[0]["area"] > anns[1]["area"]  # largest component first


def test_coco_rejects_odd_coordinate_lists():
    bad = json.dumps({"image": {"width": 4, "height": 4},
                      "annotations": [{"polygon": [1.0, 2.0, 3.0]}]}).encode()
    with pytest.raises(ValueError):
        read_coco_json_like(bad)


# ---------------------------------------------------------------------------
# VOC-shaped XML


def test_voc_bbox_is_one_based_inclusive():
    mask = np.zeros((12, 10))
    mask[3:7, 2:9] = 1.0
    doc = read_voc_xml_like(voc_xml_like(mask, mask_filename="m.png"))
    assert (doc["width"], doc["height"]) == (10, 12)
    box = doc["objects"][0]["bndbox"]
    assert box == {"xmin": 3, "ymin": 4, "xmax": 9, "ymax": 7}
    assert doc["objects"][0]["mask"] == "m.png"


def test_voc_empty_mask_has_no_objects():
    doc = read_voc_xml_like(voc_xml_like(np.zeros((5, 5))))
    assert doc["objects"] == []
    assert (doc["width"], doc["height"]) == (5, 5)


def test_export_format_registry():
    assert EXPORT_FORMATS == ("mask_png", "pseudo_color_png",
                              "voc_xml_like", "coco_json_like")
