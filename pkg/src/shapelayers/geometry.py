"""Analytic 2D shape geometry: membership tests and signed distances.

All shape kinds (equilateral triangle, 3:2 rectangle, circle) are
inscribed in a circle of a given radius, so a single scale knob controls
their size. Coordinates are plain (x, y) pairs in input-pixel units;
points are arrays of shape (M, 2).
"""

from __future__ import annotations

import numpy as np

SHAPE_KINDS = ("triangle", "rectangle", "circle")

# 3:2 rectangle inscribed in a unit circle: half extents (1.5, 1.0) * s
# with s chosen so the half diagonal is 1.
_RECT_S = 2.0 / np.sqrt(13.0)


def triangle_vertices(center, orientation: float, radius: float) -> np.ndarray:
    """Vertices (3, 2) of an equilateral triangle inscribed in a circle."""
    angles = orientation + np.pi / 2.0 + 2.0 * np.pi * np.arange(3) / 3.0
    return np.asarray(center, dtype=np.float64) + radius * np.stack(
        [np.cos(angles), np.sin(angles)], axis=1
    )


def rectangle_vertices(center, orientation: float, radius: float) -> np.ndarray:
    """Corner vertices (4, 2) of the 3:2 rectangle, in order."""
    hw = 1.5 * _RECT_S * radius
    hh = 1.0 * _RECT_S * radius
    local = np.array([[-hw, -hh], [hw, -hh], [hw, hh], [-hw, hh]])
    c, s = np.cos(orientation), np.sin(orientation)
    rot = np.array([[c, -s], [s, c]])
    return np.asarray(center, dtype=np.float64) + local @ rot.T


def _to_local(points: np.ndarray, center, orientation: float) -> np.ndarray:
    d = np.asarray(points, dtype=np.float64) - np.asarray(center, dtype=np.float64)
    c, s = np.cos(orientation), np.sin(orientation)
    return np.stack([c * d[:, 0] + s * d[:, 1], -s * d[:, 0] + c * d[:, 1]], axis=1)


def shape_contains(kind: str, center, orientation: float, radius: float,
                   points: np.ndarray) -> np.ndarray:
    """Boolean membership of points in the closed shape region."""
    points = np.asarray(points, dtype=np.float64)
    if kind == "circle":
        d = points - np.asarray(center, dtype=np.float64)
        return d[:, 0] ** 2 + d[:, 1] ** 2 <= radius * radius
    if kind == "rectangle":
        q = np.abs(_to_local(points, center, orientation))
        return (q[:, 0] <= 1.5 * _RECT_S * radius) & (q[:, 1] <= _RECT_S * radius)
    if kind == "triangle":
        v = triangle_vertices(center, orientation, radius)
        inside = np.ones(len(points), dtype=bool)
        for i in range(3):
            a, b = v[i], v[(i + 1) % 3]
            cross = (b[0] - a[0]) * (points[:, 1] - a[1]) - (b[1] - a[1]) * (points[:, 0] - a[0])
            inside &= cross >= 0.0
        return inside
    raise ValueError(f"unknown shape kind: {kind!r}")


def _segment_distance(points: np.ndarray, a: np.ndarray, b: np.ndarray) -> np.ndarray:
    ab = b - a
    t = ((points - a) @ ab) / (ab @ ab)
    t = np.clip(t, 0.0, 1.0)
    proj = a + t[:, None] * ab
    return np.hypot(points[:, 0] - proj[:, 0], points[:, 1] - proj[:, 1])


def shape_signed_distance(kind: str, center, orientation: float, radius: float,
                          points: np.ndarray) -> np.ndarray:
    """Signed Euclidean distance to the shape boundary (negative inside)."""
    points = np.asarray(points, dtype=np.float64)
    if kind == "circle":
        d = points - np.asarray(center, dtype=np.float64)
        return np.hypot(d[:, 0], d[:, 1]) - radius
    if kind == "rectangle":
        local = _to_local(points, center, orientation)
        half = np.array([1.5 * _RECT_S * radius, _RECT_S * radius])
        q = np.abs(local) - half
        outside = np.hypot(np.maximum(q[:, 0], 0.0), np.maximum(q[:, 1], 0.0))
        inside = np.minimum(np.maximum(q[:, 0], q[:, 1]), 0.0)
        return outside + inside
    if kind == "triangle":
        v = triangle_vertices(center, orientation, radius)
        dist = np.min(
            np.stack([_segment_distance(points, v[i], v[(i + 1) % 3]) for i in range(3)]),
            axis=0,
        )
        sign = np.where(shape_contains(kind, center, orientation, radius, points), -1.0, 1.0)
        return sign * dist
    raise ValueError(f"unknown shape kind: {kind!r}")
