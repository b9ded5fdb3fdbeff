"""Saliency map -> fastener detections.

The map is thresholded (strictly greater than theta), each 8-connected
cluster of foreground cells is traced with Suzuki-Abe border following,
and the axis-aligned extent of its outer border becomes the box.  Boxes
are scaled from output-grid cells to input pixels by the output stride.
"""

from dataclasses import dataclass

import numpy as np

from . import kernels

GRID = "grid"
PIXEL = "pixel"


@dataclass(frozen=True)
class BBox:
    """Inclusive box ``[x_min, x_max] x [y_min, y_max]``; ``frame`` is "grid" or "pixel"."""

    x_min: int
    y_min: int
    x_max: int
    y_max: int
    frame: str = PIXEL

    def __post_init__(self):
        if self.x_min > self.x_max or self.y_min > self.y_max:
            raise ValueError(f"degenerate box {self}")
        if self.x_min < 0 or self.y_min < 0:
            raise ValueError(f"negative box coordinates {self}")
        if self.frame not in (GRID, PIXEL):
            raise ValueError(f"unknown frame {self.frame!r}")

    def as_tuple(self):
        return (self.x_min, self.y_min, self.x_max, self.y_max)

    @property
    def width(self):
        return self.x_max - self.x_min + 1

    @property
    def height(self):
        return self.y_max - self.y_min + 1

    def scaled(self, stride):
        """Grid cells -> the union of their ``stride x stride`` pixel blocks."""
        if self.frame != GRID:
            raise ValueError("only grid-frame boxes can be scaled to pixels")
        return BBox(self.x_min * stride, self.y_min * stride,
                    (self.x_max + 1) * stride - 1, (self.y_max + 1) * stride - 1, PIXEL)


@dataclass(frozen=True)
class Detection:
    bbox: BBox
    score: float
    area: int


def _as_map(saliency):
    m = np.asarray(saliency)
    if m.ndim == 4:
        if m.shape[:2] != (1, 1):
            raise ValueError(f"expected a single (1, 1, H, W) map, got {m.shape}")
        m = m[0, 0]
    elif m.ndim == 3:
        if m.shape[0] != 1:
            raise ValueError(f"expected a single-channel map, got {m.shape}")
        m = m[0]
    if m.ndim != 2:
        raise ValueError(f"expected a 2-d saliency map, got shape {m.shape}")
    return m


def threshold(saliency, theta):
    """Binary map: 1 where the value is strictly greater than ``theta``."""
    if not 0.0 <= theta <= 1.0:
        raise ValueError(f"theta must lie in [0, 1], got {theta}")
    return (_as_map(saliency) > theta).astype(np.uint8)


def find_contours(binary):
    """Outer borders of the 8-connected components, as lists of (x, y) points.

    Hole borders are traced internally (the algorithm needs them to mark
    pixels) but not returned.
    """
    pts, starts, outer = kernels.follow_borders(np.asarray(binary))
    contours = []
    for i in np.flatnonzero(outer):
        chain = pts[starts[i]:starts[i + 1]]
        contours.append([(int(c), int(r)) for r, c in chain])
    return contours


def bbox_from_contour(contour, frame=GRID):
    """Axis-aligned extremes of a chain of (x, y) points (y grows downward)."""
    if len(contour) == 0:
        raise ValueError("empty contour")
    c = np.asarray(contour)
    return BBox(int(c[:, 0].min()), int(c[:, 1].min()), int(c[:, 0].max()), int(c[:, 1].max()), frame)


def detect(saliency, theta, output_stride=8, min_area=1):
    """Threshold, trace clusters and return detections in input-pixel coordinates."""
    m = _as_map(saliency)
    binary = threshold(m, theta)
    contours = find_contours(binary)
    if not contours:
        return []
    labels, n = kernels.label8(binary)
    flat = labels.ravel()
    areas = np.bincount(flat, minlength=n + 1)
    scores = np.zeros(n + 1, dtype=np.float64)
    np.maximum.at(scores, flat, m.ravel().astype(np.float64))
    out = []
    for contour in contours:
        x0, y0 = contour[0]
        lab = labels[y0, x0]
        if areas[lab] < min_area:
            continue
        box = bbox_from_contour(contour, GRID).scaled(output_stride)
        out.append(Detection(box, float(scores[lab]), int(areas[lab])))
    return out
