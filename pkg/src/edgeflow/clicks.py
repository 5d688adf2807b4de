"""Click and edge-prior encoding: the bridge between user interaction and network input.

Clicks become fixed-radius binary disks (one channel per polarity); edge
priors come either from the previous prediction's inner boundary or from a
Sobel response on the image. Everything here is a pure function over numpy
arrays.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Iterable, Sequence

import numpy as np

POSITIVE = "positive"
NEGATIVE = "negative"

DEFAULT_CLICK_RADIUS = 5.0
DEFAULT_SOBEL_THRESHOLD = 0.25


class ClickOutOfBounds(ValueError):
    """A click landed outside the image; carries the offending click's index."""

    def __init__(self, click: "Click", height: int, width: int):
        self.click = click
        super().__init__(
            f"click #{click.index} at (x={click.x}, y={click.y}) is outside "
            f"a {height}x{width} image"
        )


@dataclass(frozen=True)
class Click:
    """One user interaction: pixel position, polarity, and 1-based arrival order.

    Coordinates are usually integer pixel positions but may be fractional,
    e.g. after rescaling into the network's working resolution.
    """

    x: float
    y: float
    polarity: str
    index: int

    def __post_init__(self):
        if self.polarity not in (POSITIVE, NEGATIVE):
            raise ValueError(f"polarity must be '{POSITIVE}' or '{NEGATIVE}', got {self.polarity!r}")

    @property
    def is_positive(self) -> bool:
        return self.polarity == POSITIVE


@dataclass
class InteractionState:
    """Per-step network input bundle: image, click disks, edge prior."""

    image: np.ndarray       # (3, H, W) in [0, 1]
    click_map: np.ndarray   # (2, H, W) binary; ch 0 positive, ch 1 negative
    edge_prior: np.ndarray  # (1, H, W) binary

    @classmethod
    def initial(cls, image: np.ndarray, clicks: Sequence[Click] = ()) -> "InteractionState":
        h, w = image.shape[1], image.shape[2]
        click_map = encode_clicks(clicks, h, w)
        return cls(image=image, click_map=click_map, edge_prior=np.zeros((1, h, w), image.dtype))


def encode_clicks(clicks: Iterable[Click], height: int, width: int,
                  radius: float = DEFAULT_CLICK_RADIUS) -> np.ndarray:
    """Render clicks as a (2, H, W) binary disk map, channel 0 positive / 1 negative.

    A pixel (r, c) is set iff (r - y)^2 + (c - x)^2 <= radius^2 for some click
    of that polarity (closed disk); disks are clipped at the borders and
    overlapping disks union.
    """
    out = np.zeros((2, height, width), dtype=np.float64)
    r2 = radius * radius
    for click in clicks:
        if not (0 <= click.x < width and 0 <= click.y < height):
            raise ClickOutOfBounds(click, height, width)
        ch = 0 if click.is_positive else 1
        y0 = max(int(np.ceil(click.y - radius)), 0)
        y1 = min(int(np.floor(click.y + radius)), height - 1)
        x0 = max(int(np.ceil(click.x - radius)), 0)
        x1 = min(int(np.floor(click.x + radius)), width - 1)
        yy, xx = np.ogrid[y0 : y1 + 1, x0 : x1 + 1]
        disk = (yy - click.y) ** 2 + (xx - click.x) ** 2 <= r2
        out[ch, y0 : y1 + 1, x0 : x1 + 1][disk] = 1.0
    return out


def erode4(mask: np.ndarray) -> np.ndarray:
    """Binary erosion with the 3x3 cross element; outside the image counts as background."""
    m = mask.astype(bool)
    p = np.pad(m, 1, constant_values=False)
    return m & p[:-2, 1:-1] & p[2:, 1:-1] & p[1:-1, :-2] & p[1:-1, 2:]


def extract_edge_mask(mask: np.ndarray) -> np.ndarray:
    """Inner boundary of a binary mask: foreground pixels with a 4-neighbor
    (or the image border) outside the mask. Accepts (H, W) or (1, H, W)."""
    squeeze = mask.ndim == 3
    m = (mask[0] if squeeze else mask).astype(bool)
    edge = m & ~erode4(m)
    out = edge.astype(np.float64)
    return out[None] if squeeze else out


_SOBEL_X = np.array([[-1.0, 0.0, 1.0], [-2.0, 0.0, 2.0], [-1.0, 0.0, 1.0]])
_SOBEL_Y = _SOBEL_X.T


def sobel_edge(image: np.ndarray, threshold: float = DEFAULT_SOBEL_THRESHOLD) -> np.ndarray:
    """Threshold the Sobel gradient magnitude of the channel-mean grayscale.

    image: (3, H, W) in [0, 1]; borders use edge replication. Returns (1, H, W) binary.
    """
    gray = image.mean(axis=0)
    p = np.pad(gray, 1, mode="edge")
    gx = np.zeros_like(gray)
    gy = np.zeros_like(gray)
    for di in range(3):
        for dj in range(3):
            win = p[di : di + gray.shape[0], dj : dj + gray.shape[1]]
            if _SOBEL_X[di, dj] != 0.0:
                gx += _SOBEL_X[di, dj] * win
            if _SOBEL_Y[di, dj] != 0.0:
                gy += _SOBEL_Y[di, dj] * win
    mag = np.sqrt(gx * gx + gy * gy)
    return (mag > threshold).astype(np.float64)[None]


def binarize(prob: np.ndarray, threshold: float = 0.5) -> np.ndarray:
    """Strict thresholding: 1 iff prob > threshold (ties go to background)."""
    if not 0.0 < threshold < 1.0:
        raise ValueError(f"threshold must be in (0, 1), got {threshold}")
    return (prob > threshold).astype(np.float64)
