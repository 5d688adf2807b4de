"""Synthetic scene generation, augmentation, and the PNG dataset cache.

Scenes compose 1-4 anti-aliased shapes (ellipses, simple polygons, rings)
with distinct procedural fill textures over a textured background. The
topmost shape is the target instance, so its ground-truth mask is never
occluded. Rings guarantee a hole, giving non-trivial boundary topology.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, replace
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np
from PIL import Image

from . import tensor as T
from .tensor import Tensor

_SUPERSAMPLE = 3
MIN_AREA_FRACTION = 0.01
# The generator aims well above the hard floor so that targets stay clickable
# at small canvas sizes; a radius-5 click disk should not swallow the object.
TARGET_AREA_FRACTION = 0.035
MIN_TEXTURE_CONTRAST = 0.6
SHAPE_KINDS = ("ellipse", "polygon", "ring")


@dataclass
class Sample:
    """One scene: image in [0,1], binary target mask, provenance."""

    image: np.ndarray    # (3, H, W) float64
    gt_mask: np.ndarray  # (1, H, W) float64, values 0/1
    instance_id: str
    seed: int
    kind: str = ""       # target shape family, for topology-aware tests


# ---------------------------------------------------------------------------
# shape coverage


def _sample_grid(h: int, w: int) -> Tuple[np.ndarray, np.ndarray]:
    """Supersampled pixel-center coordinates, shape (h, w, ss*ss)."""
    off = (np.arange(_SUPERSAMPLE) + 0.5) / _SUPERSAMPLE - 0.5
    oy, ox = np.meshgrid(off, off, indexing="ij")
    n_sub = off.size ** 2
    yy = np.broadcast_to(np.arange(h)[:, None, None] + oy.ravel(), (h, w, n_sub))
    xx = np.broadcast_to(np.arange(w)[None, :, None] + ox.ravel(), (h, w, n_sub))
    return yy, xx


def _inside_ellipse(yy, xx, cy, cx, ay, ax, theta):
    dy = yy - cy
    dx = xx - cx
    c, s = np.cos(theta), np.sin(theta)
    u = c * dx + s * dy
    v = -s * dx + c * dy
    return (u / ax) ** 2 + (v / ay) ** 2 <= 1.0


def _inside_polygon(yy, xx, verts: np.ndarray):
    """Even-odd rule; verts is (K, 2) as (x, y) rows."""
    inside = np.zeros(yy.shape, dtype=bool)
    k = len(verts)
    with np.errstate(divide="ignore", invalid="ignore"):
        for i in range(k):
            x1, y1 = verts[i]
            x2, y2 = verts[(i + 1) % k]
            crosses = (y1 > yy) != (y2 > yy)
            x_at = x1 + (yy - y1) * (x2 - x1) / (y2 - y1)
            inside ^= crosses & (xx < x_at)
    return inside


@dataclass
class _Shape:
    kind: str
    coverage: np.ndarray  # (H, W) in [0, 1]


def _draw_shape(rng: np.random.Generator, h: int, w: int, yy, xx) -> _Shape:
    kind = SHAPE_KINDS[rng.integers(0, len(SHAPE_KINDS))]
    cy = rng.uniform(0.25, 0.75) * h
    cx = rng.uniform(0.25, 0.75) * w
    r_lim = min(h, w)
    if kind == "ellipse":
        ay = rng.uniform(0.16, 0.32) * r_lim
        ax = rng.uniform(0.16, 0.32) * r_lim
        theta = rng.uniform(0.0, np.pi)
        sub = _inside_ellipse(yy, xx, cy, cx, ay, ax, theta)
    elif kind == "ring":
        ay = rng.uniform(0.18, 0.32) * r_lim
        ax = rng.uniform(0.18, 0.32) * r_lim
        theta = rng.uniform(0.0, np.pi)
        frac = rng.uniform(0.35, 0.60)
        outer = _inside_ellipse(yy, xx, cy, cx, ay, ax, theta)
        inner = _inside_ellipse(yy, xx, cy, cx, ay * frac, ax * frac, theta)
        sub = outer & ~inner
    else:
        k = int(rng.integers(5, 10))
        base = rng.uniform(0.0, 2 * np.pi)
        angles = np.sort(base + np.linspace(0, 2 * np.pi, k, endpoint=False)
                         + rng.uniform(-0.25, 0.25, size=k))
        radius = rng.uniform(0.16, 0.30) * r_lim
        radii = radius * rng.uniform(0.55, 1.0, size=k)
        verts = np.stack([cx + radii * np.cos(angles), cy + radii * np.sin(angles)], axis=1)
        sub = _inside_polygon(yy, xx, verts)
    return _Shape(kind=kind, coverage=sub.mean(axis=2))


def _texture(rng: np.random.Generator, h: int, w: int) -> np.ndarray:
    """Smooth per-channel sinusoidal texture, (3, H, W) in [0, 1]."""
    ygrid, xgrid = np.mgrid[0:h, 0:w]
    base = rng.uniform(0.15, 0.85, size=3)
    amp = rng.uniform(0.05, 0.22)
    fy = rng.uniform(0.5, 3.5) / h
    fx = rng.uniform(0.5, 3.5) / w
    phase = rng.uniform(0.0, 2 * np.pi)
    weights = rng.uniform(0.3, 1.0, size=3)
    pattern = np.sin(2 * np.pi * (fy * ygrid + fx * xgrid) + phase)
    tex = base[:, None, None] + amp * weights[:, None, None] * pattern[None]
    return np.clip(tex, 0.0, 1.0)


def generate_scene(seed: int, h: int, w: int) -> Sample:
    """Deterministic scene for a seed; retries drawing until the target
    covers at least 1% of the image and stands out from the background."""
    if h < 32 or w < 32:
        raise ValueError(f"scene size must be >= 32, got {h}x{w}")
    rng = np.random.default_rng(seed)
    yy, xx = _sample_grid(h, w)
    min_area = TARGET_AREA_FRACTION * h * w
    while True:
        background = _texture(rng, h, w)
        n_shapes = int(rng.integers(1, 5))
        shapes = [_draw_shape(rng, h, w, yy, xx) for _ in range(n_shapes)]
        textures = [_texture(rng, h, w) for _ in shapes]
        target = shapes[-1]
        target_tex = textures[-1]
        gt = (target.coverage >= 0.5).astype(np.float64)
        if gt.sum() < min_area:
            continue
        # keep the target visually separable from the background and from
        # every distractor it might touch
        target_mean = target_tex.mean(axis=(1, 2))
        others = [background] + textures[:-1]
        if any(np.abs(target_mean - t.mean(axis=(1, 2))).sum() < MIN_TEXTURE_CONTRAST
               for t in others):
            continue
        image = background
        for shape, tex in zip(shapes, textures):
            cov = shape.coverage[None]
            image = image * (1.0 - cov) + tex * cov
        noise = rng.uniform(-0.02, 0.02, size=(h, w))
        image = np.clip(image + noise[None], 0.0, 1.0)
        return Sample(
            image=image,
            gt_mask=gt[None],
            instance_id=f"scene_{seed:06d}",
            seed=seed,
            kind=target.kind,
        )


def generate_dataset(count: int, h: int, w: int, base_seed: int) -> List[Sample]:
    return [generate_scene(base_seed + i, h, w) for i in range(count)]


# ---------------------------------------------------------------------------
# augmentation


@dataclass(frozen=True)
class AugmentParams:
    scale: float = 1.0
    flip: bool = False
    crop_y: int = 0
    crop_x: int = 0
    contrast: float = 1.0
    brightness: float = 0.0
    channel_gain: Tuple[float, float, float] = (1.0, 1.0, 1.0)

    @classmethod
    def identity(cls) -> "AugmentParams":
        return cls()


def sample_augment_params(rng: np.random.Generator, in_hw: Tuple[int, int],
                          crop_size: Tuple[int, int],
                          resize_range: Tuple[float, float] = (0.75, 1.4)) -> AugmentParams:
    scale = rng.uniform(*resize_range)
    flip = bool(rng.integers(0, 2))
    sh = max(int(round(in_hw[0] * scale)), 1)
    sw = max(int(round(in_hw[1] * scale)), 1)
    crop_y = int(rng.integers(0, max(sh - crop_size[0], 0) + 1))
    crop_x = int(rng.integers(0, max(sw - crop_size[1], 0) + 1))
    return AugmentParams(
        scale=scale,
        flip=flip,
        crop_y=crop_y,
        crop_x=crop_x,
        contrast=rng.uniform(0.75, 1.25),
        brightness=rng.uniform(-0.1, 0.1),
        channel_gain=tuple(rng.uniform(0.9, 1.1, size=3)),
    )


def _resize_image(image: np.ndarray, oh: int, ow: int) -> np.ndarray:
    return T.bilinear_resize(Tensor(image[None]), oh, ow).data[0]


def _resize_mask_nearest(mask: np.ndarray, oh: int, ow: int) -> np.ndarray:
    h, w = mask.shape[-2:]
    rows = np.clip(np.round((np.arange(oh) + 0.5) * h / oh - 0.5).astype(int), 0, h - 1)
    cols = np.clip(np.round((np.arange(ow) + 0.5) * w / ow - 0.5).astype(int), 0, w - 1)
    return mask[..., rows[:, None], cols[None, :]]


def _crop_or_pad(arr: np.ndarray, y0: int, x0: int, oh: int, ow: int) -> np.ndarray:
    c, h, w = arr.shape
    out = np.zeros((c, oh, ow), dtype=arr.dtype)
    src = arr[:, y0 : y0 + oh, x0 : x0 + ow]
    out[:, : src.shape[1], : src.shape[2]] = src
    return out


def apply_augment(sample: Sample, params: AugmentParams,
                  crop_size: Optional[Tuple[int, int]] = None) -> Sample:
    """Resize (bilinear image / nearest mask), flip, crop-or-pad, color jitter.

    With identity params and crop_size equal to the input, the sample passes
    through bit for bit.
    """
    h, w = sample.image.shape[1:]
    crop = crop_size or (h, w)
    image, mask = sample.image, sample.gt_mask
    sh = max(int(round(h * params.scale)), 1)
    sw = max(int(round(w * params.scale)), 1)
    if (sh, sw) != (h, w):
        image = _resize_image(image, sh, sw)
        mask = _resize_mask_nearest(mask, sh, sw)
    if params.flip:
        image = image[:, :, ::-1].copy()
        mask = mask[:, :, ::-1].copy()
    if (params.crop_y, params.crop_x) != (0, 0) or image.shape[1:] != crop:
        image = _crop_or_pad(image, params.crop_y, params.crop_x, *crop)
        mask = _crop_or_pad(mask, params.crop_y, params.crop_x, *crop)
    if (params.contrast, params.brightness, tuple(params.channel_gain)) != (1.0, 0.0, (1.0, 1.0, 1.0)):
        gain = np.asarray(params.channel_gain)[:, None, None]
        image = np.clip((image * params.contrast + params.brightness) * gain, 0.0, 1.0)
    return replace(sample, image=image, gt_mask=mask)


def augment(sample: Sample, rng: np.random.Generator,
            crop_size: Optional[Tuple[int, int]] = None,
            resize_range: Tuple[float, float] = (0.75, 1.4)) -> Sample:
    crop = crop_size or sample.image.shape[1:]
    params = sample_augment_params(rng, sample.image.shape[1:], crop, resize_range)
    return apply_augment(sample, params, crop)


# ---------------------------------------------------------------------------
# PNG dataset cache


def save_dataset(root, splits: Dict[str, Sequence[Sample]]) -> None:
    """Write image/mask PNG pairs per split plus an index.json."""
    root = Path(root)
    root.mkdir(parents=True, exist_ok=True)
    index = {"splits": {}}
    for split, samples in splits.items():
        (root / split).mkdir(exist_ok=True)
        rows = []
        for i, s in enumerate(samples):
            img_rel = f"{split}/img_{i:06d}.png"
            msk_rel = f"{split}/msk_{i:06d}.png"
            img8 = np.round(s.image * 255.0).astype(np.uint8).transpose(1, 2, 0)
            msk8 = (s.gt_mask[0] > 0.5).astype(np.uint8) * 255
            Image.fromarray(img8, mode="RGB").save(root / img_rel)
            Image.fromarray(msk8, mode="L").save(root / msk_rel)
            rows.append({
                "id": s.instance_id,
                "seed": s.seed,
                "kind": s.kind,
                "image": img_rel,
                "mask": msk_rel,
            })
        index["splits"][split] = rows
    (root / "index.json").write_text(json.dumps(index, indent=2))


def load_dataset(root) -> Dict[str, List[Sample]]:
    root = Path(root)
    index = json.loads((root / "index.json").read_text())
    out: Dict[str, List[Sample]] = {}
    for split, rows in index["splits"].items():
        samples = []
        for row in rows:
            img = np.asarray(Image.open(root / row["image"]).convert("RGB"), dtype=np.float64)
            msk = np.asarray(Image.open(root / row["mask"]).convert("L"), dtype=np.float64)
            samples.append(Sample(
                image=img.transpose(2, 0, 1) / 255.0,
                gt_mask=(msk > 127).astype(np.float64)[None],
                instance_id=row["id"],
                seed=row["seed"],
                kind=row.get("kind", ""),
            ))
        out[split] = samples
    return out
