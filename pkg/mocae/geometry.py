"""
Box Geometry
============
Axis-aligned and rotated boxes plus exact intersection-over-union.

Conventions:
- Files carry axis-aligned boxes in corner form [x, y, width, height];
  internally they are kept as (x_min, y_min, x_max, y_max).
- Rotated boxes are [cx, cy, w, h, theta] with theta in radians,
  counter-clockwise positive in a y-up frame.
- A box with zero area has IoU 0 against everything, itself included.
"""

import math
from dataclasses import dataclass, field

import numpy as np

from mocae.errors import DomainError, ParseError

# Cross products below this magnitude count as collinear while clipping
COLLINEAR_EPS = 1e-12

AABB = "aabb"
ROTATED = "rotated"
GEOMETRY_KINDS = (AABB, ROTATED)


def _check_finite(values, what):
    for v in values:
        if not math.isfinite(v):
            raise DomainError(f"{what} has a non-finite coordinate: {values}")


# ============================================================================
# BOX TYPES
# ============================================================================

@dataclass(frozen=True)
class AxisAlignedBox:
    x_min: float
    y_min: float
    x_max: float
    y_max: float
    # Original [x, y, w, h] when loaded from a file, so writes are bit-stable
    wire: tuple = field(default=None, compare=False, repr=False)

    kind = AABB

    def __post_init__(self):
        _check_finite((self.x_min, self.y_min, self.x_max, self.y_max), "box")
        if self.x_min > self.x_max or self.y_min > self.y_max:
            raise DomainError(
                f"box corners out of order: ({self.x_min}, {self.y_min}, {self.x_max}, {self.y_max})"
            )

    @classmethod
    def from_xywh(cls, x, y, w, h):
        x, y, w, h = float(x), float(y), float(w), float(h)
        if w < 0 or h < 0:
            raise DomainError(f"negative box size: w={w}, h={h}")
        return cls(x, y, x + w, y + h, wire=(x, y, w, h))

    @property
    def width(self):
        return self.x_max - self.x_min

    @property
    def height(self):
        return self.y_max - self.y_min

    @property
    def area(self):
        return self.width * self.height

    def corners(self):
        return (self.x_min, self.y_min, self.x_max, self.y_max)

    def to_wire(self):
        if self.wire is not None:
            return list(self.wire)
        return [self.x_min, self.y_min, self.width, self.height]


@dataclass(frozen=True)
class RotatedBox:
    cx: float
    cy: float
    w: float
    h: float
    theta: float

    kind = ROTATED

    def __post_init__(self):
        _check_finite((self.cx, self.cy, self.w, self.h, self.theta), "rotated box")
        if self.w < 0 or self.h < 0:
            raise DomainError(f"negative box size: w={self.w}, h={self.h}")

    @classmethod
    def from_wire(cls, values):
        cx, cy, w, h, theta = (float(v) for v in values)
        return cls(cx, cy, w, h, theta)

    @property
    def area(self):
        return self.w * self.h

    def vertices(self):
        """Four corners in counter-clockwise order."""
        c, s = math.cos(self.theta), math.sin(self.theta)
        hw, hh = self.w / 2.0, self.h / 2.0
        local = ((-hw, -hh), (hw, -hh), (hw, hh), (-hw, hh))
        return [(self.cx + c * x - s * y, self.cy + s * x + c * y) for x, y in local]

    def to_wire(self):
        return [self.cx, self.cy, self.w, self.h, self.theta]


def box_from_wire(values, kind):
    """Build a box of the given geometry kind from its file representation."""
    if kind == AABB:
        if len(values) != 4:
            raise ParseError(f"axis-aligned bbox needs 4 numbers, got {len(values)}")
        return AxisAlignedBox.from_xywh(*values)
    if kind == ROTATED:
        if len(values) != 5:
            raise ParseError(f"rotated bbox needs 5 numbers, got {len(values)}")
        return RotatedBox.from_wire(values)
    raise DomainError(f"unknown geometry kind: {kind!r}")


def box_area(box):
    return box.area


# ============================================================================
# POLYGON HELPERS
# ============================================================================

def polygon_area(points):
    """Shoelace area of a simple polygon (absolute value)."""
    n = len(points)
    if n < 3:
        return 0.0
    total = 0.0
    for i in range(n):
        x1, y1 = points[i]
        x2, y2 = points[(i + 1) % n]
        total += x1 * y2 - x2 * y1
    return abs(total) / 2.0


def _side(cp1, cp2, p):
    return (cp2[0] - cp1[0]) * (p[1] - cp1[1]) - (cp2[1] - cp1[1]) * (p[0] - cp1[0])


def clip_polygon(subject, clip):
    """
    Sutherland-Hodgman clipping of a polygon against a convex CCW polygon.

    Args:
        subject: list of (x, y) vertices
        clip: list of (x, y) vertices of a convex polygon, counter-clockwise

    Returns:
        list of (x, y) vertices of the intersection (may be empty)
    """
    output = list(subject)
    cp1 = clip[-1]
    for cp2 in clip:
        if not output:
            break
        candidates = output
        output = []
        s = candidates[-1]
        ds = _side(cp1, cp2, s)
        for e in candidates:
            de = _side(cp1, cp2, e)
            e_inside = de > -COLLINEAR_EPS
            s_inside = ds > -COLLINEAR_EPS
            if e_inside:
                if not s_inside:
                    output.append(_crossing(s, e, ds, de))
                output.append(e)
            elif s_inside:
                output.append(_crossing(s, e, ds, de))
            s, ds = e, de
        cp1 = cp2
    return output


def _crossing(s, e, ds, de):
    t = ds / (ds - de)
    return (s[0] + t * (e[0] - s[0]), s[1] + t * (e[1] - s[1]))


# ============================================================================
# IOU
# ============================================================================

def iou_aabb(a, b):
    """
    Intersection-over-union of two axis-aligned boxes.

    Returns:
        float in [0, 1]; 0 when the union area is 0
    """
    inter_w = max(0.0, min(a.x_max, b.x_max) - max(a.x_min, b.x_min))
    inter_h = max(0.0, min(a.y_max, b.y_max) - max(a.y_min, b.y_min))
    inter = inter_w * inter_h
    union = a.area + b.area - inter
    if union <= 0.0:
        return 0.0
    return inter / union


def iou_rotated(a, b):
    """
    Intersection-over-union of two rotated boxes.

    The intersection is the Sutherland-Hodgman clip of one rectangle by the
    other, measured with the shoelace formula.
    """
    area_a, area_b = a.area, b.area
    if area_a <= 0.0 or area_b <= 0.0:
        return 0.0
    inter = polygon_area(clip_polygon(a.vertices(), b.vertices()))
    union = area_a + area_b - inter
    if union <= 0.0:
        return 0.0
    return min(1.0, max(0.0, inter / union))


def iou(a, b):
    if a.kind != b.kind:
        raise DomainError(f"cannot compare {a.kind} and {b.kind} boxes")
    if a.kind == AABB:
        return iou_aabb(a, b)
    return iou_rotated(a, b)


def iou_matrix(boxes_a, boxes_b):
    """
    Pairwise IoU between two box lists of one geometry kind.

    Axis-aligned boxes are vectorized with the same arithmetic as iou_aabb,
    so entries equal the scalar results exactly.

    Returns:
        numpy array of shape (len(boxes_a), len(boxes_b))
    """
    if not boxes_a or not boxes_b:
        return np.zeros((len(boxes_a), len(boxes_b)))
    if boxes_a[0].kind == AABB and boxes_b[0].kind == AABB:
        a = np.array([bx.corners() for bx in boxes_a], dtype=float)
        b = np.array([bx.corners() for bx in boxes_b], dtype=float)
        area_a = (a[:, 2] - a[:, 0]) * (a[:, 3] - a[:, 1])
        area_b = (b[:, 2] - b[:, 0]) * (b[:, 3] - b[:, 1])
        inter_w = np.maximum(0.0, np.minimum(a[:, None, 2], b[None, :, 2]) - np.maximum(a[:, None, 0], b[None, :, 0]))
        inter_h = np.maximum(0.0, np.minimum(a[:, None, 3], b[None, :, 3]) - np.maximum(a[:, None, 1], b[None, :, 1]))
        inter = inter_w * inter_h
        union = area_a[:, None] + area_b[None, :] - inter
        out = np.zeros_like(union)
        np.divide(inter, union, out=out, where=union > 0.0)
        return out
    return np.array([[iou(x, y) for y in boxes_b] for x in boxes_a], dtype=float)
