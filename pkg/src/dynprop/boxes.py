"""Axis-aligned boxes in normalized [0,1] coordinates.

Two parallel implementations live here: plain-float functions used by the
matcher and the AP evaluator, and tensor-path twins (suffix ``_t``) used
inside losses so gradients reach the box heads.  The float and tensor
formulas are kept textually identical so the two routes agree.
"""

from __future__ import annotations

import math
from typing import NamedTuple

import numpy as np

from . import tensor as T

MIN_SIZE = 1e-3
DELTA_CAP = 4.0  # caps |dw|, |dh| so exp() stays bounded


class Box(NamedTuple):
    x1: float
    y1: float
    x2: float
    y2: float

    @property
    def width(self) -> float:
        return self.x2 - self.x1

    @property
    def height(self) -> float:
        return self.y2 - self.y1

    @property
    def area(self) -> float:
        return max(0.0, self.width) * max(0.0, self.height)

    def is_valid(self) -> bool:
        return (0.0 <= self.x1 <= self.x2 <= 1.0) and (0.0 <= self.y1 <= self.y2 <= 1.0)


def iou(a: Box, b: Box) -> float:
    """Intersection over union; 0 for degenerate/disjoint pairs."""
    iw = min(a.x2, b.x2) - max(a.x1, b.x1)
    ih = min(a.y2, b.y2) - max(a.y1, b.y1)
    if iw <= 0 or ih <= 0:
        inter = 0.0
    else:
        inter = iw * ih
    union = a.area + b.area - inter
    if union <= 0:
        return 0.0
    return inter / union


def giou(a: Box, b: Box) -> float:
    """Generalized IoU in [-1, 1]: IoU minus enclosing-box waste."""
    iw = min(a.x2, b.x2) - max(a.x1, b.x1)
    ih = min(a.y2, b.y2) - max(a.y1, b.y1)
    inter = max(0.0, iw) * max(0.0, ih)
    union = a.area + b.area - inter
    ew = max(a.x2, b.x2) - min(a.x1, b.x1)
    eh = max(a.y2, b.y2) - min(a.y1, b.y1)
    enclose = ew * eh
    if enclose <= 0:
        return 0.0  # coincident degenerate points
    if union <= 0:
        # both boxes degenerate: IoU is 0 by convention, the whole enclosure is waste
        return -(enclose - 0.0) / enclose
    return inter / union - (enclose - union) / enclose


def l1_box(a: Box, b: Box) -> float:
    return abs(a.x1 - b.x1) + abs(a.y1 - b.y1) + abs(a.x2 - b.x2) + abs(a.y2 - b.y2)


def apply_deltas(base: Box, deltas) -> Box:
    """Center/size update: (dcx, dcy) scale width/height, (dw, dh) exponential.

    Output is clamped to the unit square with minimum side MIN_SIZE.
    """
    dcx, dcy, dw, dh = (float(d) for d in deltas)
    w = base.width
    h = base.height
    cx = base.x1 + 0.5 * w
    cy = base.y1 + 0.5 * h
    ncx = cx + dcx * w
    ncy = cy + dcy * h
    nw = w * math.exp(min(max(dw, -DELTA_CAP), DELTA_CAP))
    nh = h * math.exp(min(max(dh, -DELTA_CAP), DELTA_CAP))
    x1 = min(max(ncx - 0.5 * nw, 0.0), 1.0)
    x2 = min(max(ncx + 0.5 * nw, 0.0), 1.0)
    y1 = min(max(ncy - 0.5 * nh, 0.0), 1.0)
    y2 = min(max(ncy + 0.5 * nh, 0.0), 1.0)
    x2 = min(max(x2, x1 + MIN_SIZE), 1.0)
    x1 = min(x1, x2 - MIN_SIZE)
    y2 = min(max(y2, y1 + MIN_SIZE), 1.0)
    y1 = min(y1, y2 - MIN_SIZE)
    return Box(x1, y1, x2, y2)


def boxes_to_array(boxes) -> np.ndarray:
    return np.array([[b.x1, b.y1, b.x2, b.y2] for b in boxes], dtype=np.float64).reshape(-1, 4)


def array_to_boxes(arr: np.ndarray) -> list[Box]:
    return [Box(float(r[0]), float(r[1]), float(r[2]), float(r[3])) for r in np.asarray(arr).reshape(-1, 4)]


# -- tensor path ------------------------------------------------------------------

_COLS = [np.zeros((4, 1)) for _ in range(4)]
for _i in range(4):
    _COLS[_i][_i, 0] = 1.0


def _col(t: T.Tensor, i: int) -> T.Tensor:
    """Column i of an [M x 4] tensor as [M x 1], via a constant selector."""
    return T.matmul(t, T.Tensor.const(_COLS[i]))


def _clip01(t: T.Tensor) -> T.Tensor:
    zeros = T.Tensor.const(np.zeros(t.shape))
    ones = T.Tensor.const(np.ones(t.shape))
    return T.minimum(T.maximum(t, zeros), ones)


def apply_deltas_t(base: T.Tensor, deltas: T.Tensor) -> T.Tensor:
    """Tensor twin of apply_deltas for [M x 4] boxes and deltas."""
    x1, y1, x2, y2 = (_col(base, i) for i in range(4))
    dcx, dcy, dw, dh = (_col(deltas, i) for i in range(4))
    shape = x1.shape
    cap = T.Tensor.const(np.full(shape, DELTA_CAP))
    ncap = T.Tensor.const(np.full(shape, -DELTA_CAP))
    half = T.Tensor.const(np.full(shape, 0.5))
    eps = T.Tensor.const(np.full(shape, MIN_SIZE))
    one = T.Tensor.const(np.ones(shape))

    w = T.sub(x2, x1)
    h = T.sub(y2, y1)
    cx = T.add(x1, T.mul(half, w))
    cy = T.add(y1, T.mul(half, h))
    ncx = T.add(cx, T.mul(dcx, w))
    ncy = T.add(cy, T.mul(dcy, h))
    nw = T.mul(w, T.exp(T.minimum(T.maximum(dw, ncap), cap)))
    nh = T.mul(h, T.exp(T.minimum(T.maximum(dh, ncap), cap)))

    nx1 = _clip01(T.sub(ncx, T.mul(half, nw)))
    nx2 = _clip01(T.add(ncx, T.mul(half, nw)))
    ny1 = _clip01(T.sub(ncy, T.mul(half, nh)))
    ny2 = _clip01(T.add(ncy, T.mul(half, nh)))
    nx2 = T.minimum(T.maximum(nx2, T.add(nx1, eps)), one)
    nx1 = T.minimum(nx1, T.sub(nx2, eps))
    ny2 = T.minimum(T.maximum(ny2, T.add(ny1, eps)), one)
    ny1 = T.minimum(ny1, T.sub(ny2, eps))
    return T.concat([nx1, ny1, nx2, ny2], axis=1)


def giou_t(a: T.Tensor, b: T.Tensor) -> T.Tensor:
    """Row-wise GIoU between two [M x 4] box tensors, returned as [M x 1].

    Unions/enclosures are floored at a tiny constant to keep the division
    defined for degenerate rows.
    """
    ax1, ay1, ax2, ay2 = (_col(a, i) for i in range(4))
    bx1, by1, bx2, by2 = (_col(b, i) for i in range(4))
    shape = ax1.shape
    floor = T.Tensor.const(np.full(shape, 1e-12))

    iw = T.relu(T.sub(T.minimum(ax2, bx2), T.maximum(ax1, bx1)))
    ih = T.relu(T.sub(T.minimum(ay2, by2), T.maximum(ay1, by1)))
    inter = T.mul(iw, ih)
    area_a = T.mul(T.sub(ax2, ax1), T.sub(ay2, ay1))
    area_b = T.mul(T.sub(bx2, bx1), T.sub(by2, by1))
    union = T.sub(T.add(area_a, area_b), inter)
    ew = T.sub(T.maximum(ax2, bx2), T.minimum(ax1, bx1))
    eh = T.sub(T.maximum(ay2, by2), T.minimum(ay1, by1))
    enclose = T.maximum(T.mul(ew, eh), floor)
    union_safe = T.maximum(union, floor)
    return T.sub(T.div(inter, union_safe), T.div(T.sub(enclose, union), enclose))


def l1_t(a: T.Tensor, b: T.Tensor) -> T.Tensor:
    """Sum of absolute coordinate differences over all rows (scalar)."""
    return T.total_sum(T.absolute(T.sub(a, b)))
