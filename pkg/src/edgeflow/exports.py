"""Mask export formats and their readers, plus the run-length wire codec.

Every writer has a paired reader so round-trips can be asserted. The VOC
and COCO flavors are structural look-alikes (single image, category id 1),
not complete implementations of those formats.
"""

from __future__ import annotations

import io
import json
import xml.etree.ElementTree as ET
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np
from PIL import Image

from .polygons import Ring, shoelace_area

EXPORT_FORMATS = ("mask_png", "pseudo_color_png", "voc_xml_like", "coco_json_like")

# background + a small cycle of distinct label colors
PSEUDO_PALETTE = [
    (0, 0, 0),
    (128, 0, 128),
    (0, 128, 128),
    (128, 128, 0),
    (0, 0, 192),
]


def _as_mask2d(mask: np.ndarray) -> np.ndarray:
    m = np.asarray(mask)
    if m.ndim == 3 and m.shape[0] == 1:
        m = m[0]
    if m.ndim != 2:
        raise ValueError(f"mask must be 2-d, got {np.asarray(mask).shape}")
    return m > 0.5


# ---------------------------------------------------------------------------
# run-length wire codec


def encode_rle(mask: np.ndarray) -> Dict:
    """Row-major run lengths alternating 0/1, always starting with the
    zero run (possibly of length 0)."""
    m = _as_mask2d(mask)
    h, w = m.shape
    flat = m.ravel().astype(np.int8)
    counts: List[int] = []
    if flat.size:
        change = np.flatnonzero(np.diff(flat)) + 1
        bounds = np.concatenate([[0], change, [flat.size]])
        runs = np.diff(bounds)
        if flat[0] == 1:
            counts.append(0)
        counts.extend(int(r) for r in runs)
    return {"width": w, "height": h, "counts": counts}


def decode_rle(rle: Dict) -> np.ndarray:
    w, h = int(rle["width"]), int(rle["height"])
    counts = [int(c) for c in rle["counts"]]
    total = sum(counts)
    if total != w * h:
        raise ValueError(f"run lengths sum to {total}, expected {w * h}")
    flat = np.zeros(w * h, dtype=np.float64)
    pos = 0
    value = 0.0
    for run in counts:
        if value == 1.0:
            flat[pos : pos + run] = 1.0
        pos += run
        value = 1.0 - value
    return flat.reshape(h, w)


# ---------------------------------------------------------------------------
# PNG exports


def mask_png(mask: np.ndarray) -> bytes:
    m = _as_mask2d(mask)
    buf = io.BytesIO()
    Image.fromarray(m.astype(np.uint8) * 255, mode="L").save(buf, format="PNG")
    return buf.getvalue()


def read_mask_png(data: bytes) -> np.ndarray:
    img = Image.open(io.BytesIO(data)).convert("L")
    return (np.asarray(img) > 127).astype(np.float64)


def pseudo_color_png(mask: np.ndarray, label: int = 1) -> bytes:
    m = _as_mask2d(mask)
    if not 1 <= label < len(PSEUDO_PALETTE):
        raise ValueError(f"label must be in [1, {len(PSEUDO_PALETTE) - 1}]")
    img = Image.fromarray(m.astype(np.uint8) * label, mode="P")
    img.putpalette([v for rgb in PSEUDO_PALETTE for v in rgb])
    buf = io.BytesIO()
    img.save(buf, format="PNG")
    return buf.getvalue()


def read_pseudo_color_png(data: bytes) -> np.ndarray:
    img = Image.open(io.BytesIO(data))
    return (np.asarray(img) > 0).astype(np.float64)


# ---------------------------------------------------------------------------
# annotation-file exports


def coco_json_like(rings: Sequence[Ring], height: int, width: int) -> bytes:
    """Single-image COCO-shaped JSON: polygons with shoelace areas and
    axis-aligned bboxes, category id fixed at 1."""
    annotations = []
    for i, ring in enumerate(rings):
        pts = np.asarray(ring, dtype=np.float64)
        xs, ys = pts[:, 0], pts[:, 1]
        flat = [float(v) for xy in ring for v in xy]
        annotations.append({
            "id": i + 1,
            "category_id": 1,
            "polygon": flat,
            "area": abs(shoelace_area(ring)),
            "bbox": [float(xs.min()), float(ys.min()),
                     float(xs.max() - xs.min()), float(ys.max() - ys.min())],
        })
    doc = {"image": {"width": int(width), "height": int(height)}, "annotations": annotations}
    return json.dumps(doc, indent=2).encode("utf-8")


def read_coco_json_like(data: bytes) -> Tuple[List[Ring], int, int, List[dict]]:
    doc = json.loads(data.decode("utf-8"))
    h, w = int(doc["image"]["height"]), int(doc["image"]["width"])
    rings: List[Ring] = []
    for ann in doc["annotations"]:
        flat = ann["polygon"]
        if len(flat) % 2 != 0:
            raise ValueError("polygon has an odd number of coordinates")
        rings.append([(flat[i], flat[i + 1]) for i in range(0, len(flat), 2)])
    return rings, h, w, doc["annotations"]


def voc_xml_like(mask: np.ndarray, mask_filename: str = "mask.png",
                 object_name: str = "target") -> bytes:
    """VOC-shaped XML: image size, one object with a 1-based inclusive
    bounding box and a reference to the exported mask file. An empty mask
    produces a document with no objects."""
    m = _as_mask2d(mask)
    h, w = m.shape
    root = ET.Element("annotation")
    size = ET.SubElement(root, "size")
    ET.SubElement(size, "width").text = str(w)
    ET.SubElement(size, "height").text = str(h)
    ET.SubElement(size, "depth").text = "3"
    if m.any():
        rows = np.flatnonzero(m.any(axis=1))
        cols = np.flatnonzero(m.any(axis=0))
        obj = ET.SubElement(root, "object")
        ET.SubElement(obj, "name").text = object_name
        bnd = ET.SubElement(obj, "bndbox")
        ET.SubElement(bnd, "xmin").text = str(int(cols[0]) + 1)
        ET.SubElement(bnd, "ymin").text = str(int(rows[0]) + 1)
        ET.SubElement(bnd, "xmax").text = str(int(cols[-1]) + 1)
        ET.SubElement(bnd, "ymax").text = str(int(rows[-1]) + 1)
        ET.SubElement(obj, "mask").text = mask_filename
    return ET.tostring(root, encoding="utf-8", xml_declaration=True)


def read_voc_xml_like(data: bytes) -> dict:
    root = ET.fromstring(data)
    out = {
        "width": int(root.findtext("size/width")),
        "height": int(root.findtext("size/height")),
        "objects": [],
    }
    for obj in root.findall("object"):
        out["objects"].append({
            "name": obj.findtext("name"),
            "bndbox": {k: int(obj.findtext(f"bndbox/{k}"))
                       for k in ("xmin", "ymin", "xmax", "ymax")},
            "mask": obj.findtext("mask"),
        })
    return out
