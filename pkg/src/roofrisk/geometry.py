"""Planar geometry helpers shared by rasterization, vectorization and scoring.

Rings are (n, 2) float arrays of (x, y) vertices; a closed ring repeats its
first vertex at the end.
"""

from __future__ import annotations

import numpy as np


def as_ring(points) -> np.ndarray:
    ring = np.asarray(points, dtype=np.float64)
    if ring.ndim != 2 or ring.shape[1] != 2:
        raise ValueError(f"expected (n, 2) coordinates, got shape {ring.shape}")
    return ring


def is_closed(ring) -> bool:
    return len(ring) >= 2 and bool(np.all(ring[0] == ring[-1]))


def close_ring(ring) -> np.ndarray:
    ring = as_ring(ring)
    return ring if is_closed(ring) else np.vstack([ring, ring[:1]])


def signed_area(ring) -> float:
    """Shoelace area; positive for counter-clockwise rings (x right, y up)."""
    ring = close_ring(ring)
    x, y = ring[:, 0], ring[:, 1]
    return 0.5 * float(np.dot(x[:-1], y[1:]) - np.dot(x[1:], y[:-1]))


def centroid(ring) -> tuple[float, float]:
    ring = close_ring(ring)
    x0, y0 = ring[0]
    x, y = ring[:, 0] - x0, ring[:, 1] - y0
    cross = x[:-1] * y[1:] - x[1:] * y[:-1]
    a = cross.sum() / 2
    if a == 0:
        return float(ring[:-1, 0].mean()), float(ring[:-1, 1].mean())
    cx = ((x[:-1] + x[1:]) * cross).sum() / (6 * a)
    cy = ((y[:-1] + y[1:]) * cross).sum() / (6 * a)
    return float(cx + x0), float(cy + y0)


def points_in_ring(px, py, ring) -> np.ndarray:
    """Even-odd containment of points (px, py) in a closed ring.

    Uses the half-open crossing rule, so a point exactly on a horizontal edge
    or vertex is classified consistently between neighbouring rings.
    """
    ring = close_ring(ring)
    px = np.asarray(px, dtype=np.float64)
    py = np.asarray(py, dtype=np.float64)
    inside = np.zeros(np.broadcast(px, py).shape, dtype=bool)
    for (x1, y1), (x2, y2) in zip(ring[:-1], ring[1:]):
        if y1 == y2:
            continue
        straddles = (y1 > py) != (y2 > py)
        xcross = x1 + (py - y1) * (x2 - x1) / (y2 - y1)
        inside ^= straddles & (px < xcross)
    return inside


def _orient(ax, ay, bx, by, cx, cy):
    return np.sign((bx - ax) * (cy - ay) - (by - ay) * (cx - ax))


def _on_segment(ax, ay, bx, by, cx, cy):
    # c collinear with ab: is it within the bounding box of ab?
    return (
        (np.minimum(ax, bx) <= cx) & (cx <= np.maximum(ax, bx))
        & (np.minimum(ay, by) <= cy) & (cy <= np.maximum(ay, by))
    )


def segments_intersect(p1, p2, q1, q2) -> np.ndarray:
    """Closed-segment intersection test, vectorized over leading axes.

    Touching at an endpoint and collinear overlap both count.
    """
    ax, ay = p1[..., 0], p1[..., 1]
    bx, by = p2[..., 0], p2[..., 1]
    cx, cy = q1[..., 0], q1[..., 1]
    dx, dy = q2[..., 0], q2[..., 1]
    o1 = _orient(ax, ay, bx, by, cx, cy)
    o2 = _orient(ax, ay, bx, by, dx, dy)
    o3 = _orient(cx, cy, dx, dy, ax, ay)
    o4 = _orient(cx, cy, dx, dy, bx, by)
    hit = (o1 * o2 < 0) & (o3 * o4 < 0)
    hit |= (o1 == 0) & _on_segment(ax, ay, bx, by, cx, cy)
    hit |= (o2 == 0) & _on_segment(ax, ay, bx, by, dx, dy)
    hit |= (o3 == 0) & _on_segment(cx, cy, dx, dy, ax, ay)
    hit |= (o4 == 0) & _on_segment(cx, cy, dx, dy, bx, by)
    return hit


def ring_is_simple(ring) -> bool:
    """True if the closed ring has no self-intersections or self-touches.

    Adjacent edges may only share their common vertex; non-adjacent edges may
    not meet at all.
    """
    ring = close_ring(ring)
    n = len(ring) - 1
    if n < 3:
        return False
    a, b = ring[:-1], ring[1:]
    if np.any(np.all(a == b, axis=1)):
        return False
    # adjacent edges must not fold back onto each other
    d1 = b - a
    d2 = np.roll(d1, -1, axis=0)
    cross = d1[:, 0] * d2[:, 1] - d1[:, 1] * d2[:, 0]
    dot = (d1 * d2).sum(axis=1)
    if np.any((cross == 0) & (dot < 0)):
        return False
    i, j = np.triu_indices(n, k=2)
    keep = ~((i == 0) & (j == n - 1))
    i, j = i[keep], j[keep]
    for start in range(0, len(i), 1 << 20):
        si, sj = i[start : start + (1 << 20)], j[start : start + (1 << 20)]
        if np.any(segments_intersect(a[si], b[si], a[sj], b[sj])):
            return False
    return True


def point_segment_distance(p, a, b) -> np.ndarray:
    """Euclidean distance from points p to segments ab (broadcasting)."""
    p, a, b = (np.asarray(v, dtype=np.float64) for v in (p, a, b))
    ab = b - a
    denom = (ab * ab).sum(axis=-1)
    t = np.where(denom > 0, ((p - a) * ab).sum(axis=-1) / np.where(denom > 0, denom, 1), 0.0)
    t = np.clip(t, 0.0, 1.0)
    proj = a + t[..., None] * ab
    return np.sqrt(((p - proj) ** 2).sum(axis=-1))


def segment_set_distance(segs_a, segs_b) -> float:
    """Minimum distance between two sets of segments, each (m, 2, 2)."""
    segs_a = np.asarray(segs_a, dtype=np.float64).reshape(-1, 2, 2)
    segs_b = np.asarray(segs_b, dtype=np.float64).reshape(-1, 2, 2)
    if len(segs_a) == 0 or len(segs_b) == 0:
        return float("inf")
    a1, a2 = segs_a[:, None, 0], segs_a[:, None, 1]
    b1, b2 = segs_b[None, :, 0], segs_b[None, :, 1]
    if np.any(segments_intersect(a1, a2, b1, b2)):
        return 0.0
    d = np.minimum.reduce([
        point_segment_distance(a1, b1, b2),
        point_segment_distance(a2, b1, b2),
        point_segment_distance(b1, a1, a2),
        point_segment_distance(b2, a1, a2),
    ])
    return float(d.min())


def ring_segments(ring) -> np.ndarray:
    ring = as_ring(ring)
    return np.stack([ring[:-1], ring[1:]], axis=1)
