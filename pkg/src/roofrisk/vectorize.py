"""Segmentation maps to classed, simplified dwelling polygons.

Components use 8-connectivity. Their outer boundary is traced along pixel
edges; interior holes are filled and not vectorized. Where two pixels of a
component touch only at a corner, the traced ring passes that corner twice.
Each pass is nudged a quarter pixel into the outside cell it wraps around,
which keeps the ring simple without changing which pixel centers it contains.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy import ndimage

from . import geometry
from .geodata import GeoTransform
from .tensor import softmax

DEFAULT_EPSILON_M = 0.5
DEFAULT_MIN_COMPONENT = 4
PINCH_OFFSET = 0.25
MAX_BACKOFF_HALVINGS = 30


@dataclass
class SegmentationMap:
    classes: np.ndarray  # (H, W) class ids
    confidence: np.ndarray  # (H, W) max softmax probability
    transform: GeoTransform


@dataclass
class DwellingPolygon:
    ring: np.ndarray  # closed, ground coordinates, counter-clockwise
    class_id: int
    confidence: float
    pixel_area: int


@dataclass
class Component:
    rows: np.ndarray
    cols: np.ndarray

    @property
    def size(self) -> int:
        return len(self.rows)


def argmax_map(logits, transform: GeoTransform) -> SegmentationMap:
    """Per-pixel argmax (ties to the lowest class id) and its softmax probability."""
    logits = np.asarray(logits)
    if logits.ndim == 4:
        if logits.shape[0] != 1:
            raise ValueError("argmax_map takes a single image")
        logits = logits[0]
    if not np.all(np.isfinite(logits)):
        raise ValueError("logits contain non-finite values")
    classes = logits.argmax(axis=0).astype(np.uint8)
    confidence = softmax(logits.astype(np.float64), axis=0).max(axis=0)
    return SegmentationMap(classes, confidence, transform)


_EIGHT = np.ones((3, 3), dtype=bool)


def connected_components(seg: SegmentationMap | np.ndarray, class_id: int,
                         min_size: int = DEFAULT_MIN_COMPONENT) -> list[Component]:
    """8-connected components of ``class_id``, ordered by their first row-major pixel."""
    classes = seg.classes if isinstance(seg, SegmentationMap) else np.asarray(seg)
    labels, count = ndimage.label(classes == class_id, structure=_EIGHT)
    if count == 0:
        return []
    comps = []
    # ndimage numbers labels in order of first occurrence in a raster scan
    for lab, sl in enumerate(ndimage.find_objects(labels), start=1):
        rr, cc = np.nonzero(labels[sl] == lab)
        if len(rr) >= min_size:
            comps.append(Component(rr + sl[0].start, cc + sl[1].start))
    return comps


# unit steps in (x=col, y=row); a right turn rotates (dx, dy) -> (dy, -dx)
def _right(d):
    return (d[1], -d[0])


def _left(d):
    return (-d[1], d[0])


def trace_boundary(component: Component) -> np.ndarray:
    """Outer boundary ring in pixel-corner coordinates (x = col, y = row).

    The ring is closed, has positive shoelace area in the (x, y) plane and
    keeps the component on its left. Runs of collinear edges are merged.
    """
    if component.size == 0:
        raise ValueError("empty component")
    r0, c0 = component.rows.min() - 1, component.cols.min() - 1
    h = component.rows.max() - r0 + 2
    w = component.cols.max() - c0 + 2
    grid = np.zeros((h, w), dtype=bool)
    grid[component.rows - r0, component.cols - c0] = True
    grid = ndimage.binary_fill_holes(grid)

    def filled(c, r):
        return 0 <= r < h and 0 <= c < w and grid[r, c]

    # directed edges keyed by start vertex; each cell edge runs with the cell on its left
    edges: dict[tuple[int, int], list[tuple[int, int]]] = {}
    rr, cc = np.nonzero(grid)
    for r, c in zip(rr.tolist(), cc.tolist()):
        if not filled(c, r - 1):
            edges.setdefault((c, r), []).append((1, 0))
        if not filled(c + 1, r):
            edges.setdefault((c + 1, r), []).append((0, 1))
        if not filled(c, r + 1):
            edges.setdefault((c + 1, r + 1), []).append((-1, 0))
        if not filled(c - 1, r):
            edges.setdefault((c, r + 1), []).append((0, -1))

    start = (int(cc[0]), int(rr[0]))  # top-left corner of the first row-major cell
    d = (1, 0)
    edges[start].remove(d)
    path = [(start, d, False)]  # (vertex, outgoing direction, is pinch)
    v = (start[0] + d[0], start[1] + d[1])
    # the start corner can never be a pinch, so reaching it again closes the ring
    while v != start:
        outs = edges[v]
        pinch = len(outs) > 1
        # right turns first: diagonal neighbours stay in one ring
        for nd in (_right(d), d, _left(d)):
            if nd in outs:
                break
        else:
            raise RuntimeError("boundary trace lost its way")
        outs.remove(nd)
        path.append((v, nd, pinch))
        d = nd
        v = (v[0] + d[0], v[1] + d[1])

    ring = []
    prev_dir = path[-1][1]
    for vertex, out_dir, pinch in path:
        if out_dir != prev_dir:
            x, y = float(vertex[0] + c0), float(vertex[1] + r0)
            if pinch:
                x += PINCH_OFFSET * (out_dir[0] - prev_dir[0])
                y += PINCH_OFFSET * (out_dir[1] - prev_dir[1])
            ring.append((x, y))
        prev_dir = out_dir
    ring.append(ring[0])
    return np.array(ring, dtype=np.float64)


def _chord_distances(pts, a, b):
    dx, dy = pts[b, 0] - pts[a, 0], pts[b, 1] - pts[a, 1]
    seg = pts[a + 1 : b]
    length = np.sqrt(dx * dx + dy * dy)
    if length == 0:
        ex, ey = seg[:, 0] - pts[a, 0], seg[:, 1] - pts[a, 1]
        return np.sqrt(ex * ex + ey * ey)
    cross = dx * (seg[:, 1] - pts[a, 1]) - dy * (seg[:, 0] - pts[a, 0])
    return np.abs(cross) / length


def _dp_keep(pts, first, last, epsilon, keep):
    stack = [(first, last)]
    while stack:
        a, b = stack.pop()
        if b - a < 2:
            continue
        dist = _chord_distances(pts, a, b)
        k = int(np.argmax(dist))
        if dist[k] > epsilon:
            idx = a + 1 + k
            keep[idx] = True
            stack.append((idx, b))
            stack.append((a, idx))


def farthest_pair(pts, block: int = 512) -> tuple[int, int]:
    """Indices i < j of the two mutually farthest points (first pair on ties)."""
    best, best_pair = -1.0, (0, 0)
    n = len(pts)
    for start in range(0, n, block):
        rows = pts[start : start + block]
        d2 = ((rows[:, None, :] - pts[None, :, :]) ** 2).sum(axis=-1)
        # only pairs with j > i
        d2[np.arange(len(rows))[:, None] + start >= np.arange(n)[None, :]] = -1.0
        flat = int(np.argmax(d2))
        r, c = divmod(flat, n)
        if d2[r, c] > best:
            best, best_pair = d2[r, c], (start + r, c)
    return best_pair


def douglas_peucker(points, epsilon: float) -> np.ndarray:
    """Douglas-Peucker simplification of an open polyline or closed ring.

    A point survives iff its perpendicular distance from the current chord
    exceeds ``epsilon``; ``epsilon=0`` drops exactly collinear points only.
    A closed ring is split at its two mutually farthest vertices and both
    halves are simplified; the output keeps the input's vertex order.
    """
    pts = geometry.as_ring(points)
    if epsilon < 0:
        raise ValueError("epsilon must be >= 0")
    if len(pts) < 3:
        return pts.copy()
    if geometry.is_closed(pts) and len(pts) >= 4:
        core = pts[:-1]
        n = len(core)
        i, j = farthest_pair(core)
        # rotate so the ring starts at i; the split vertex j lands at j - i
        order = np.r_[np.arange(i, n), np.arange(0, i), i]
        rot = core[order[:-1]]
        rot = np.vstack([rot, rot[:1]])
        keep = np.zeros(n + 1, dtype=bool)
        keep[[0, j - i, n]] = True
        _dp_keep(rot, 0, j - i, epsilon, keep)
        _dp_keep(rot, j - i, n, epsilon, keep)
        kept = np.sort(order[:-1][keep[:-1]])
        out = core[kept]
        return np.vstack([out, out[:1]])
    keep = np.zeros(len(pts), dtype=bool)
    keep[[0, -1]] = True
    _dp_keep(pts, 0, len(pts) - 1, epsilon, keep)
    return pts[keep]


def ring_is_valid(candidate, orientation: float) -> bool:
    if len(candidate) < 4:
        return False
    area = geometry.signed_area(candidate)
    return area != 0 and np.sign(area) == np.sign(orientation) and geometry.ring_is_simple(candidate)


def simplify_topology_safe(ring, epsilon: float) -> np.ndarray:
    """Douglas-Peucker that never breaks the ring.

    If simplification self-intersects, degenerates below 4 points or flips
    orientation, epsilon is halved and the attempt repeated; after
    ``MAX_BACKOFF_HALVINGS`` halvings epsilon drops to 0. A ring that is
    invalid even then is returned unchanged.
    """
    ring = geometry.close_ring(ring)
    orientation = geometry.signed_area(ring)
    eps = float(epsilon)
    for _ in range(MAX_BACKOFF_HALVINGS + 1):
        out = douglas_peucker(ring, eps)
        if ring_is_valid(out, orientation):
            return out
        if eps == 0:
            break
        eps /= 2
    out = douglas_peucker(ring, 0.0)
    return out if ring_is_valid(out, orientation) else ring


def polygonize(seg: SegmentationMap, epsilon: float = DEFAULT_EPSILON_M,
               min_component_size: int = DEFAULT_MIN_COMPONENT,
               classes=range(1, 8)) -> list[DwellingPolygon]:
    """Vectorizes every dwelling class; output sorted by class then top-left pixel."""
    out = []
    tf = seg.transform
    for class_id in classes:
        for comp in connected_components(seg, class_id, min_component_size):
            pix = trace_boundary(comp)
            x, y = tf.to_ground(pix[:, 0], pix[:, 1])
            ring = np.column_stack([x, y])
            if geometry.signed_area(ring) < 0:
                ring = ring[::-1].copy()
            ring = simplify_topology_safe(ring, epsilon)
            conf = float(seg.confidence[comp.rows, comp.cols].mean())
            out.append(DwellingPolygon(ring, int(class_id), conf, comp.size))
    return out
