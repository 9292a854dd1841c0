"""Axis-aligned box geometry.

Boxes are corner encoded ``(x1, y1, x2, y2)`` in continuous pixel units. Areas
are ``(x2 - x1) * (y2 - y1)``; there is no ``+1`` pixel convention. Boxes that
only touch along an edge have zero intersection and IoU 0.

Scalar helpers operate on :class:`BoundingBox`; the ``*_tensor`` helpers are
the vectorised torch equivalents used inside the detector.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, replace
from typing import Optional

import torch


@dataclass(frozen=True)
class BoundingBox:
    x1: float
    y1: float
    x2: float
    y2: float
    label: int = 0
    score: Optional[float] = None

    def __post_init__(self):
        coords = (self.x1, self.y1, self.x2, self.y2)
        if not all(math.isfinite(c) for c in coords):
            raise ValueError(f"non-finite box coordinates {coords}")
        if not (self.x1 < self.x2 and self.y1 < self.y2):
            raise ValueError(f"degenerate box {coords}: need x1 < x2 and y1 < y2")
        if self.label < 0:
            raise ValueError(f"negative label {self.label}")
        if self.score is not None and not (0.0 <= self.score <= 1.0):
            raise ValueError(f"score {self.score} outside [0, 1]")

    @property
    def area(self) -> float:
        return (self.x2 - self.x1) * (self.y2 - self.y1)

    def coords(self) -> tuple[float, float, float, float]:
        return (self.x1, self.y1, self.x2, self.y2)

    def with_score(self, score: float) -> "BoundingBox":
        return replace(self, score=score)

    def clamp(self, width: float, height: float) -> Optional["BoundingBox"]:
        """Clip to ``[0, width] x [0, height]``; ``None`` if nothing is left."""
        x1, y1 = max(self.x1, 0.0), max(self.y1, 0.0)
        x2, y2 = min(self.x2, float(width)), min(self.y2, float(height))
        if x1 >= x2 or y1 >= y2:
            return None
        return replace(self, x1=x1, y1=y1, x2=x2, y2=y2)


@dataclass(frozen=True)
class GridRect:
    """Half-open cell range ``rows [r1, r2) x cols [c1, c2)`` on a feature grid."""

    r1: int
    c1: int
    r2: int
    c2: int

    def __post_init__(self):
        if not (0 <= self.r1 <= self.r2 and 0 <= self.c1 <= self.c2):
            raise ValueError(f"invalid grid rect {self}")

    @property
    def empty(self) -> bool:
        return self.r1 == self.r2 or self.c1 == self.c2

    def contains(self, other: "GridRect") -> bool:
        if other.empty:
            return True
        return (self.r1 <= other.r1 and other.r2 <= self.r2
                and self.c1 <= other.c1 and other.c2 <= self.c2)


def _intersection_extent(a: BoundingBox, b: BoundingBox) -> tuple[float, float, float, float]:
    return max(a.x1, b.x1), max(a.y1, b.y1), min(a.x2, b.x2), min(a.y2, b.y2)


def intersection_area(a: BoundingBox, b: BoundingBox) -> float:
    x1, y1, x2, y2 = _intersection_extent(a, b)
    return max(0.0, x2 - x1) * max(0.0, y2 - y1)


def iou(a: BoundingBox, b: BoundingBox) -> float:
    inter = intersection_area(a, b)
    if inter == 0.0:
        return 0.0
    if a.coords() == b.coords():
        return 1.0
    return inter / (a.area + b.area - inter)


def intersect(a: BoundingBox, b: BoundingBox) -> Optional[BoundingBox]:
    """Intersection rectangle (carrying ``a``'s label), or ``None`` when the
    boxes are disjoint or only share an edge."""
    x1, y1, x2, y2 = _intersection_extent(a, b)
    if x1 >= x2 or y1 >= y2:
        return None
    return BoundingBox(x1, y1, x2, y2, label=a.label)


def project_to_grid(box: BoundingBox, stride: int, grid: tuple[int, int]) -> GridRect:
    """Cells touched by ``box`` on a ``grid = (Hf, Wf)`` map with the given stride.

    Columns span ``floor(x1 / stride) .. ceil(x2 / stride)`` (rows likewise),
    clamped to the grid. A box entirely outside the grid maps to an empty rect.
    """
    if stride < 1:
        raise ValueError(f"stride must be >= 1, got {stride}")
    hf, wf = grid

    def span(lo: float, hi: float, n: int) -> tuple[int, int]:
        start = min(max(math.floor(lo / stride), 0), n)
        stop = min(max(math.ceil(hi / stride), 0), n)
        return start, max(start, stop)

    r1, r2 = span(box.y1, box.y2, hf)
    c1, c2 = span(box.x1, box.x2, wf)
    return GridRect(r1, c1, r2, c2)


# ---------------------------------------------------------------------------
# tensor helpers, boxes as [N, 4] (x1, y1, x2, y2)


def boxes_to_tensor(boxes: list[BoundingBox], dtype=torch.float32) -> torch.Tensor:
    if not boxes:
        return torch.zeros((0, 4), dtype=dtype)
    return torch.tensor([b.coords() for b in boxes], dtype=dtype)


def box_area_tensor(boxes: torch.Tensor) -> torch.Tensor:
    return (boxes[:, 2] - boxes[:, 0]).clamp(min=0) * (boxes[:, 3] - boxes[:, 1]).clamp(min=0)


def box_iou_tensor(a: torch.Tensor, b: torch.Tensor) -> torch.Tensor:
    """Pairwise IoU matrix ``[len(a), len(b)]``."""
    if a.numel() == 0 or b.numel() == 0:
        return a.new_zeros((a.shape[0], b.shape[0]))
    lt = torch.maximum(a[:, None, :2], b[None, :, :2])
    rb = torch.minimum(a[:, None, 2:], b[None, :, 2:])
    wh = (rb - lt).clamp(min=0)
    inter = wh[..., 0] * wh[..., 1]
    union = box_area_tensor(a)[:, None] + box_area_tensor(b)[None, :] - inter
    return torch.where(inter > 0, inter / union.clamp(min=1e-12), torch.zeros_like(inter))


def clip_boxes_tensor(boxes: torch.Tensor, height: int, width: int) -> torch.Tensor:
    x = boxes[:, 0::2].clamp(0, width)
    y = boxes[:, 1::2].clamp(0, height)
    return torch.stack([x[:, 0], y[:, 0], x[:, 1], y[:, 1]], dim=1)


def encode_deltas(reference: torch.Tensor, target: torch.Tensor,
                  weights: tuple[float, float, float, float] = (1.0, 1.0, 1.0, 1.0)) -> torch.Tensor:
    """Regression targets ``(dx, dy, dw, dh)`` that map ``reference`` onto ``target``."""
    wx, wy, ww, wh = weights
    rw = reference[:, 2] - reference[:, 0]
    rh = reference[:, 3] - reference[:, 1]
    rx = reference[:, 0] + 0.5 * rw
    ry = reference[:, 1] + 0.5 * rh
    tw = target[:, 2] - target[:, 0]
    th = target[:, 3] - target[:, 1]
    tx = target[:, 0] + 0.5 * tw
    ty = target[:, 1] + 0.5 * th
    return torch.stack([
        wx * (tx - rx) / rw,
        wy * (ty - ry) / rh,
        ww * torch.log(tw / rw),
        wh * torch.log(th / rh),
    ], dim=1)


_MAX_LOG_SCALE = math.log(1000.0 / 16)


def decode_deltas(reference: torch.Tensor, deltas: torch.Tensor,
                  weights: tuple[float, float, float, float] = (1.0, 1.0, 1.0, 1.0)) -> torch.Tensor:
    wx, wy, ww, wh = weights
    rw = reference[:, 2] - reference[:, 0]
    rh = reference[:, 3] - reference[:, 1]
    rx = reference[:, 0] + 0.5 * rw
    ry = reference[:, 1] + 0.5 * rh
    dx = deltas[:, 0] / wx
    dy = deltas[:, 1] / wy
    dw = (deltas[:, 2] / ww).clamp(max=_MAX_LOG_SCALE)
    dh = (deltas[:, 3] / wh).clamp(max=_MAX_LOG_SCALE)
    cx = dx * rw + rx
    cy = dy * rh + ry
    w = torch.exp(dw) * rw
    h = torch.exp(dh) * rh
    return torch.stack([cx - 0.5 * w, cy - 0.5 * h, cx + 0.5 * w, cy + 0.5 * h], dim=1)
