"""Per-dwelling flood risk scores and neighbourhood aggregation.

The score is a clamped additive model::

    score = clamp(base_vulnerability[class] + depth_modifier + proximity_modifier, 1, 5)

with the depth modifier taken from configurable depth buckets and a bonus
when the dwelling lies closer to open water than a threshold. The formula
and its parameters are written into output metadata under ``scoring``.
"""

from __future__ import annotations

import bisect
import json
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from . import geometry
from .geodata import ClassLegend, GeoTransform, ring_pixel_mask
from .vectorize import DwellingPolygon

SCORING_VERSION = "additive-v1"
CONTEXT_KINDS = ("water_body", "road")


@dataclass
class ScoringConfig:
    depth_edges_m: list[float] = field(default_factory=lambda: [0.0, 0.5])
    depth_modifiers: list[int] = field(default_factory=lambda: [0, 1, 2])
    proximity_threshold_m: float = 50.0
    proximity_modifier: int = 1
    cell_size_m: float = 100.0
    base_overrides: dict[str, int] = field(default_factory=dict)

    def __post_init__(self):
        if len(self.depth_modifiers) != len(self.depth_edges_m) + 1:
            raise ValueError("need one more depth modifier than depth edges")
        if list(self.depth_edges_m) != sorted(self.depth_edges_m):
            raise ValueError("depth edges must be increasing")
        if list(self.depth_modifiers) != sorted(self.depth_modifiers):
            raise ValueError("depth modifiers must be non-decreasing")
        if self.proximity_modifier < 0:
            raise ValueError("proximity modifier must be >= 0")
        if not self.cell_size_m > 0:
            raise ValueError("cell_size_m must be positive")

    @classmethod
    def from_file(cls, path) -> "ScoringConfig":
        return cls(**json.loads(Path(path).read_text()))

    def metadata(self) -> dict:
        return {"version": SCORING_VERSION, **asdict(self)}


@dataclass
class HazardGrid:
    depth: np.ndarray  # (rows, cols), row 0 is the northern edge
    transform: GeoTransform
    nodata: float = -9999.0

    def __post_init__(self):
        valid = self.valid
        if np.any(~np.isfinite(self.depth[valid])) or np.any(self.depth[valid] < 0):
            raise ValueError("hazard depths must be finite and >= 0 outside NODATA")

    @property
    def valid(self) -> np.ndarray:
        return self.depth != self.nodata


@dataclass
class ContextLayer:
    kind: str
    polygons: list[np.ndarray] = field(default_factory=list)  # closed rings
    lines: list[np.ndarray] = field(default_factory=list)  # open polylines

    def __post_init__(self):
        if self.kind not in CONTEXT_KINDS:
            raise ValueError(f"unknown context kind {self.kind!r}")
        for line in self.lines:
            if len(line) < 2:
                raise ValueError("polylines need at least 2 points")

    @property
    def empty(self) -> bool:
        return not self.polygons and not self.lines


@dataclass
class RiskedDwelling:
    polygon: DwellingPolygon
    hazard_depth_max_m: float
    dist_water_m: float
    dist_road_m: float
    risk_score: int


@dataclass
class ClusterCell:
    ix: int
    iy: int
    count: int
    mean_score: float
    level: int
    high_risk_share: float


# ---------------------------------------------------------------------------
# inputs
# ---------------------------------------------------------------------------


def read_ascii_grid(path) -> HazardGrid:
    """Parses an ESRI ASCII grid of flood depths (meters)."""
    header = {}
    values = []
    with open(path) as fh:
        for line in fh:
            parts = line.split()
            if not parts:
                continue
            key = parts[0].lower()
            if not values and key in ("ncols", "nrows", "xllcorner", "yllcorner", "xllcenter",
                                      "yllcenter", "cellsize", "nodata_value"):
                header[key] = float(parts[1])
            else:
                values.extend(float(v) for v in parts)
    for key in ("ncols", "nrows", "cellsize"):
        if key not in header:
            raise ValueError(f"{path}: missing {key} in header")
    ncols, nrows, cs = int(header["ncols"]), int(header["nrows"]), header["cellsize"]
    if len(values) != ncols * nrows:
        raise ValueError(f"{path}: expected {ncols * nrows} values, found {len(values)}")
    if "xllcorner" in header:
        xll, yll = header["xllcorner"], header["yllcorner"]
    else:
        xll, yll = header["xllcenter"] - cs / 2, header["yllcenter"] - cs / 2
    transform = GeoTransform(cs, -cs, xll, yll + nrows * cs)
    depth = np.array(values, dtype=np.float64).reshape(nrows, ncols)
    return HazardGrid(depth, transform, header.get("nodata_value", -9999.0))


def write_ascii_grid(grid: HazardGrid, path) -> None:
    tf = grid.transform
    nrows, ncols = grid.depth.shape
    cs = tf.pixel_size_x
    if tf.rot_x or tf.rot_y or tf.pixel_size_y != -cs:
        raise ValueError("ASCII grids need square, north-up cells")
    lines = [
        f"ncols {ncols}", f"nrows {nrows}",
        f"xllcorner {tf.origin_x!r}", f"yllcorner {tf.origin_y - nrows * cs!r}",
        f"cellsize {cs!r}", f"NODATA_value {grid.nodata!r}",
    ]
    lines += [" ".join(repr(float(v)) for v in row) for row in grid.depth]
    Path(path).write_text("\n".join(lines) + "\n")


def _exterior(coords):
    ring = geometry.as_ring(np.asarray(coords, dtype=np.float64)[:, :2])
    return geometry.close_ring(ring)


def load_context_layers(path) -> dict[str, ContextLayer]:
    """Reads water bodies and roads from GeoJSON features tagged with ``kind``."""
    doc = json.loads(Path(path).read_text())
    layers = {k: ContextLayer(k) for k in CONTEXT_KINDS}
    for i, feat in enumerate(doc.get("features", [])):
        kind = str((feat.get("properties") or {}).get("kind", "")).lower()
        if kind not in layers:
            raise ValueError(f"feature {i}: kind must be one of {CONTEXT_KINDS}, got {kind!r}")
        geom = feat["geometry"]
        gtype, coords = geom["type"], geom["coordinates"]
        if gtype == "Polygon":
            layers[kind].polygons.append(_exterior(coords[0]))
        elif gtype == "MultiPolygon":
            layers[kind].polygons.extend(_exterior(p[0]) for p in coords)
        elif gtype == "LineString":
            layers[kind].lines.append(np.asarray(coords, dtype=np.float64)[:, :2])
        elif gtype == "MultiLineString":
            layers[kind].lines.extend(np.asarray(c, dtype=np.float64)[:, :2] for c in coords)
        else:
            raise ValueError(f"feature {i}: unsupported geometry {gtype}")
    return layers


# ---------------------------------------------------------------------------
# features
# ---------------------------------------------------------------------------


def _ring_of(polygon) -> np.ndarray:
    ring = polygon.ring if isinstance(polygon, DwellingPolygon) else polygon
    return geometry.close_ring(ring)


def sample_hazard(polygon, grid: HazardGrid) -> float:
    """Maximum flood depth over cells whose centers fall inside the polygon.

    NODATA cells are ignored. If no valid cell center is inside, the valid
    cell whose center is nearest the polygon centroid is used.
    """
    valid = grid.valid
    if not valid.any():
        raise ValueError("hazard grid is entirely NODATA")
    ring = _ring_of(polygon)
    nrows, ncols = grid.depth.shape
    hit = ring_pixel_mask(ring, grid.transform, nrows, ncols)
    if hit is not None:
        rs, cs, inside = hit
        sel = inside & valid[rs, cs]
        if sel.any():
            return float(grid.depth[rs, cs][sel].max())
    cx, cy = geometry.centroid(ring)
    rr, cc = np.nonzero(valid)
    x, y = grid.transform.to_ground(cc + 0.5, rr + 0.5)
    k = int(np.argmin((x - cx) ** 2 + (y - cy) ** 2))
    return float(grid.depth[rr[k], cc[k]])


def distance_to(polygon, layer: ContextLayer) -> float:
    """Minimum ground distance from the dwelling to any geometry of the layer.

    Zero when they touch, overlap or one contains the other; ``inf`` for an
    empty layer.
    """
    if layer.empty:
        return math.inf
    ring = _ring_of(polygon)
    ring_segs = geometry.ring_segments(ring)
    best = math.inf
    for other in layer.polygons:
        if geometry.points_in_ring(ring[:1, 0], ring[:1, 1], other)[0]:
            return 0.0
        if geometry.points_in_ring(other[:1, 0], other[:1, 1], ring)[0]:
            return 0.0
        best = min(best, geometry.segment_set_distance(ring_segs, geometry.ring_segments(other)))
    for line in layer.lines:
        if geometry.points_in_ring(line[:1, 0], line[:1, 1], ring)[0]:
            return 0.0
        best = min(best, geometry.segment_set_distance(ring_segs, geometry.ring_segments(line)))
    return best


def risk_score(class_id: int, legend: ClassLegend, depth_m: float, dist_water_m: float,
               config: ScoringConfig | None = None) -> int:
    config = config or ScoringConfig()
    base = legend.base_vulnerability(class_id)
    base = config.base_overrides.get(legend.name_of(class_id), base)
    depth_mod = config.depth_modifiers[bisect.bisect_left(config.depth_edges_m, depth_m)]
    near = math.isfinite(dist_water_m) and dist_water_m < config.proximity_threshold_m
    prox_mod = config.proximity_modifier if near else 0
    return int(min(5, max(1, base + depth_mod + prox_mod)))


def score_dwellings(polygons: list[DwellingPolygon], legend: ClassLegend,
                    grid: HazardGrid | None = None,
                    layers: dict[str, ContextLayer] | None = None,
                    config: ScoringConfig | None = None) -> list[RiskedDwelling]:
    config = config or ScoringConfig()
    layers = layers or {}
    water = layers.get("water_body", ContextLayer("water_body"))
    road = layers.get("road", ContextLayer("road"))
    out = []
    for poly in polygons:
        depth = sample_hazard(poly, grid) if grid is not None else 0.0
        d_water = distance_to(poly, water)
        d_road = distance_to(poly, road)
        score = risk_score(poly.class_id, legend, depth, d_water, config)
        out.append(RiskedDwelling(poly, depth, d_water, d_road, score))
    return out


def aggregate_clusters(dwellings: list[RiskedDwelling], cell_size_m: float) -> list[ClusterCell]:
    """Bins dwellings by centroid into square cells anchored at the ground origin.

    Each cell reports the mean score, that mean rounded half-up to a 1..5
    level, and the share of dwellings scoring 4 or more. Cells are ordered
    by (iy, ix).
    """
    if not cell_size_m > 0:
        raise ValueError("cell_size_m must be positive")
    bins: dict[tuple[int, int], list[int]] = {}
    for d in dwellings:
        cx, cy = geometry.centroid(d.polygon.ring)
        key = (math.floor(cx / cell_size_m), math.floor(cy / cell_size_m))
        bins.setdefault(key, []).append(d.risk_score)
    cells = []
    for (ix, iy), scores in sorted(bins.items(), key=lambda kv: (kv[0][1], kv[0][0])):
        mean = sum(scores) / len(scores)
        level = min(5, max(1, math.floor(mean + 0.5)))
        share = sum(s >= 4 for s in scores) / len(scores)
        cells.append(ClusterCell(ix, iy, len(scores), mean, level, share))
    return cells


def write_clusters(cells: list[ClusterCell], cell_size_m: float, path) -> None:
    doc = {"cell_size_m": cell_size_m, "cells": [asdict(c) for c in cells]}
    Path(path).write_text(json.dumps(doc, indent=1) + "\n")
