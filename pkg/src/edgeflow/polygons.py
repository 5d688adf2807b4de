"""Mask-to-polygon extraction and polygon rasterization.

Boundaries are traced along the pixel lattice (crack following): every
exposed side of a foreground pixel contributes one directed unit edge, and
chaining them yields each 4-connected component's outer ring. A lone pixel
therefore becomes its unit square. Rings are reduced by collinear merging
plus Douglas-Peucker, anchored at the axis-extreme vertices so rectangles
keep exactly their corners.

Vertex order gives a positive shoelace area in (x, y) coordinates, i.e.
counter-clockwise in the usual mathematical orientation.
"""

from __future__ import annotations

from typing import List, Sequence, Tuple

import numpy as np
from scipy import ndimage

_CROSS = np.array([[0, 1, 0], [1, 1, 1], [0, 1, 0]], dtype=bool)

Ring = List[Tuple[float, float]]


def shoelace_area(ring: Sequence[Sequence[float]]) -> float:
    """Signed polygon area; positive for the orientation this module emits."""
    pts = np.asarray(ring, dtype=np.float64)
    if len(pts) < 3:
        return 0.0
    x, y = pts[:, 0], pts[:, 1]
    return float(0.5 * np.sum(x * np.roll(y, -1) - np.roll(x, -1) * y))


def _as_bool2d(mask: np.ndarray) -> np.ndarray:
    m = np.asarray(mask)
    if m.ndim == 3 and m.shape[0] == 1:
        m = m[0]
    if m.ndim != 2:
        raise ValueError(f"mask must be 2-d, got shape {np.asarray(mask).shape}")
    return m.astype(bool)


def _trace_outer_ring(comp: np.ndarray) -> Ring:
    """Outer boundary of one 4-connected component as lattice vertices."""
    h, w = comp.shape
    padded = np.pad(comp, 1)
    up_bg = ~padded[:-2, 1:-1]
    down_bg = ~padded[2:, 1:-1]
    left_bg = ~padded[1:-1, :-2]
    right_bg = ~padded[1:-1, 2:]

    edges = {}

    def add_edge(sx, sy, ex, ey):
        edges.setdefault((sx, sy), []).append((ex, ey))

    for r, c in zip(*(a.tolist() for a in np.where(comp & up_bg))):
        add_edge(c, r, c + 1, r)
    for r, c in zip(*(a.tolist() for a in np.where(comp & right_bg))):
        add_edge(c + 1, r, c + 1, r + 1)
    for r, c in zip(*(a.tolist() for a in np.where(comp & down_bg))):
        add_edge(c + 1, r + 1, c, r + 1)
    for r, c in zip(*(a.tolist() for a in np.where(comp & left_bg))):
        add_edge(c, r + 1, c, r)

    # start at the top-left corner of the first foreground pixel (row-major);
    # that corner has exactly one outgoing edge and lies on the outer ring
    first = int(np.argmax(comp.ravel()))
    start = (first % w, first // w)
    ring: Ring = [start]
    prev_dir = None
    current = start
    while True:
        candidates = edges[current]
        if len(candidates) == 1 or prev_dir is None:
            nxt = candidates[0]
        else:
            # saddle corner: prefer the turn that stays on this component
            nxt = None
            for cand in candidates:
                d_out = (cand[0] - current[0], cand[1] - current[1])
                if prev_dir[0] * d_out[1] - prev_dir[1] * d_out[0] > 0:
                    nxt = cand
                    break
            if nxt is None:
                nxt = candidates[0]
        candidates.remove(nxt)
        prev_dir = (nxt[0] - current[0], nxt[1] - current[1])
        if nxt == start:
            break
        ring.append(nxt)
        current = nxt
    return ring


def _merge_collinear(ring: Ring) -> Ring:
    n = len(ring)
    if n < 3:
        return list(ring)
    out = []
    for i in range(n):
        ax, ay = ring[i - 1]
        bx, by = ring[i]
        cx, cy = ring[(i + 1) % n]
        if (bx - ax) * (cy - by) - (by - ay) * (cx - bx) != 0:
            out.append(ring[i])
    return out


def _point_segment_distance(points: np.ndarray, a, b) -> np.ndarray:
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    ab = b - a
    denom = float(ab @ ab)
    if denom == 0.0:
        return np.linalg.norm(points - a, axis=1)
    t = np.clip((points - a) @ ab / denom, 0.0, 1.0)
    proj = a + t[:, None] * ab
    return np.linalg.norm(points - proj, axis=1)


def _douglas_peucker(chain: List[Tuple[float, float]], epsilon: float) -> List[Tuple[float, float]]:
    if len(chain) < 3:
        return list(chain)
    pts = np.asarray(chain, dtype=np.float64)
    dists = _point_segment_distance(pts[1:-1], chain[0], chain[-1])
    imax = int(np.argmax(dists)) + 1
    if dists[imax - 1] > epsilon:
        left = _douglas_peucker(chain[: imax + 1], epsilon)
        right = _douglas_peucker(chain[imax:], epsilon)
        return left[:-1] + right
    return [chain[0], chain[-1]]


def simplify_ring(ring: Ring, epsilon: float = 1.0) -> Ring:
    """Collinear merge, then Douglas-Peucker between axis-extreme anchors.

    Anchoring every vertex that attains a min/max coordinate keeps the four
    corners of axis-aligned shapes (a unit square survives epsilon 1.0).
    """
    ring = _merge_collinear(ring)
    n = len(ring)
    if n <= 3:
        return ring
    pts = np.asarray(ring, dtype=np.float64)
    anchors = set()
    for axis in (0, 1):
        anchors.update(np.flatnonzero(pts[:, axis] == pts[:, axis].min()).tolist())
        anchors.update(np.flatnonzero(pts[:, axis] == pts[:, axis].max()).tolist())
    order = sorted(anchors)
    if len(order) < 2:
        return ring
    out: Ring = []
    for i, a in enumerate(order):
        b = order[(i + 1) % len(order)]
        if b > a:
            chain = ring[a : b + 1]
        else:
            chain = ring[a:] + ring[: b + 1]
        out.extend(_douglas_peucker(chain, epsilon)[:-1])
    return out if len(out) >= 3 else ring


def extract_polygon(mask: np.ndarray, epsilon: float = 1.0) -> List[Ring]:
    """Outer rings of all 4-connected components, largest area first
    (ties broken by first row-major pixel). Empty mask gives an empty list."""
    m = _as_bool2d(mask)
    if not m.any():
        return []
    labels, n = ndimage.label(m, structure=_CROSS)
    areas = np.bincount(labels.ravel())
    values, firsts = np.unique(labels.ravel(), return_index=True)
    comps = [(-int(areas[v]), int(f), int(v)) for v, f in zip(values, firsts) if v != 0]
    rings = []
    for _, _, value in sorted(comps):
        ring = _trace_outer_ring(labels == value)
        rings.append([(float(x), float(y)) for x, y in simplify_ring(ring, epsilon)])
    return rings


def rasterize_polygon(rings, height: int, width: int) -> np.ndarray:
    """Fill polygons by the even-odd rule sampled at pixel centers; multiple
    rings are unioned. Accepts one ring or a list of rings."""
    if rings and isinstance(rings[0][0], (int, float, np.floating, np.integer)):
        rings = [rings]
    out = np.zeros((height, width), dtype=bool)
    if not rings:
        return out.astype(np.float64)
    cy, cx = np.mgrid[0:height, 0:width]
    px = cx + 0.5
    py = cy + 0.5
    for ring in rings:
        if len(ring) < 3:
            continue
        verts = np.asarray(ring, dtype=np.float64)
        inside = np.zeros((height, width), dtype=bool)
        k = len(verts)
        with np.errstate(divide="ignore", invalid="ignore"):
            for i in range(k):
                x1, y1 = verts[i]
                x2, y2 = verts[(i + 1) % k]
                crosses = (y1 > py) != (y2 > py)
                x_at = x1 + (py - y1) * (x2 - x1) / (y2 - y1)
                inside ^= crosses & (px < x_at)
        out |= inside
    return out.astype(np.float64)
