"""Planar polyline and polygon primitives in UTM meters."""

from __future__ import annotations

import math
from typing import Sequence

Point = tuple[float, float]

EPS = 1e-9


def polyline_length(line: Sequence[Point]) -> float:
    return sum(math.dist(a, b) for a, b in zip(line[:-1], line[1:]))


def segment_intersection(p1: Point, p2: Point, q1: Point, q2: Point, eps: float = EPS):
    """Intersection of closed segments p1p2 and q1q2.

    Returns (point, t, u) with t, u the parameters along each segment, or None.
    Parallel and collinear pairs return None.
    """
    rx, ry = p2[0] - p1[0], p2[1] - p1[1]
    sx, sy = q2[0] - q1[0], q2[1] - q1[1]
    denom = rx * sy - ry * sx
    if abs(denom) <= eps * max(1.0, math.hypot(rx, ry) * math.hypot(sx, sy)):
        return None
    qpx, qpy = q1[0] - p1[0], q1[1] - p1[1]
    t = (qpx * sy - qpy * sx) / denom
    u = (qpx * ry - qpy * rx) / denom
    if t < -eps or t > 1 + eps or u < -eps or u > 1 + eps:
        return None
    t = min(max(t, 0.0), 1.0)
    u = min(max(u, 0.0), 1.0)
    return (p1[0] + t * rx, p1[1] + t * ry), t, u


def project_onto_polyline(pt: Point, line: Sequence[Point]) -> tuple[float, float]:
    """Return (perpendicular distance, along-distance of the closest point)."""
    best_d = math.inf
    best_along = 0.0
    offset = 0.0
    for a, b in zip(line[:-1], line[1:]):
        dx, dy = b[0] - a[0], b[1] - a[1]
        seg2 = dx * dx + dy * dy
        if seg2 == 0.0:
            t = 0.0
        else:
            t = ((pt[0] - a[0]) * dx + (pt[1] - a[1]) * dy) / seg2
            t = min(max(t, 0.0), 1.0)
        cx, cy = a[0] + t * dx, a[1] + t * dy
        d = math.hypot(pt[0] - cx, pt[1] - cy)
        if d < best_d:
            best_d = d
            best_along = offset + t * math.sqrt(seg2)
        offset += math.sqrt(seg2)
    return best_d, best_along


def point_on_segment(pt: Point, a: Point, b: Point, eps: float = EPS) -> bool:
    dx, dy = b[0] - a[0], b[1] - a[1]
    cross = (pt[0] - a[0]) * dy - (pt[1] - a[1]) * dx
    scale = max(1.0, math.hypot(dx, dy))
    if abs(cross) > eps * scale:
        return False
    return (
        min(a[0], b[0]) - eps <= pt[0] <= max(a[0], b[0]) + eps
        and min(a[1], b[1]) - eps <= pt[1] <= max(a[1], b[1]) + eps
    )


def on_polygon_boundary(pt: Point, polygon: Sequence[Point], eps: float = EPS) -> bool:
    n = len(polygon)
    return any(point_on_segment(pt, polygon[i], polygon[(i + 1) % n], eps) for i in range(n))


def inside_even_odd(pt: Point, polygon: Sequence[Point]) -> bool:
    x, y = pt
    inside = False
    n = len(polygon)
    j = n - 1
    for i in range(n):
        xi, yi = polygon[i]
        xj, yj = polygon[j]
        if (yi > y) != (yj > y):
            x_cross = xi + (y - yi) * (xj - xi) / (yj - yi)
            if x < x_cross:
                inside = not inside
        j = i
    return inside


def in_polygon(pt: Point, polygon: Sequence[Point], eps: float = EPS) -> bool:
    """Even-odd containment; points on the boundary count as inside."""
    return on_polygon_boundary(pt, polygon, eps) or inside_even_odd(pt, polygon)
