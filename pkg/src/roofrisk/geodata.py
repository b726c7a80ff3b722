"""Georeferenced rasters, the class legend, dwelling labels and rasterization.

Pixel coordinates are continuous: pixel (col, row) covers the unit square
[col, col+1) x [row, row+1) and its center sits at (col + 0.5, row + 0.5).
A :class:`GeoTransform` maps pixel coordinates to ground meters, so integer
pixel coordinates are pixel corners and (0, 0) is the outer corner of the
top-left pixel.
"""

from __future__ import annotations

import json
import logging
import math
from dataclasses import dataclass, field
from importlib import resources
from pathlib import Path
from typing import TYPE_CHECKING, Iterable, Sequence

import numpy as np
from PIL import Image

from . import geometry

if TYPE_CHECKING:
    from .risk import RiskedDwelling

logger = logging.getLogger(__name__)

LOSSLESS_FORMATS = {"PNG", "TIFF", "BMP"}
EXCLUDED_LABELS = ("NCR", "NCS")


@dataclass(frozen=True)
class GeoTransform:
    pixel_size_x: float
    pixel_size_y: float
    origin_x: float
    origin_y: float
    rot_x: float = 0.0
    rot_y: float = 0.0

    def __post_init__(self):
        if not self.pixel_size_x > 0:
            raise ValueError("pixel_size_x must be positive")
        if self.pixel_size_y == 0:
            raise ValueError("pixel_size_y must be non-zero")
        if self.determinant == 0:
            raise ValueError("geotransform is not invertible")

    @property
    def determinant(self) -> float:
        return self.pixel_size_x * self.pixel_size_y - self.rot_x * self.rot_y

    def to_ground(self, col, row):
        col, row = np.asarray(col, dtype=np.float64), np.asarray(row, dtype=np.float64)
        x = self.origin_x + col * self.pixel_size_x + row * self.rot_x
        y = self.origin_y + col * self.rot_y + row * self.pixel_size_y
        return x, y

    def to_pixel(self, x, y):
        dx = np.asarray(x, dtype=np.float64) - self.origin_x
        dy = np.asarray(y, dtype=np.float64) - self.origin_y
        det = self.determinant
        col = (self.pixel_size_y * dx - self.rot_x * dy) / det
        row = (-self.rot_y * dx + self.pixel_size_x * dy) / det
        return col, row

    def translated(self, col: float, row: float) -> "GeoTransform":
        """Same transform with its origin moved to pixel (col, row)."""
        x, y = self.to_ground(col, row)
        return GeoTransform(self.pixel_size_x, self.pixel_size_y, float(x), float(y),
                            self.rot_x, self.rot_y)

    def world_lines(self) -> list[float]:
        return [self.pixel_size_x, self.rot_y, self.rot_x, self.pixel_size_y,
                self.origin_x, self.origin_y]


@dataclass
class GeoRaster:
    """Samples in band-row-column order plus their georeference."""

    data: np.ndarray
    transform: GeoTransform

    def __post_init__(self):
        if self.data.ndim == 2:
            self.data = self.data[None]
        if self.data.ndim != 3 or self.data.shape[0] not in (1, 3):
            raise ValueError(f"raster data must be (1|3, H, W), got {self.data.shape}")
        if min(self.data.shape[1:]) < 1:
            raise ValueError("raster must be at least 1x1")

    @property
    def bands(self) -> int:
        return self.data.shape[0]

    @property
    def height(self) -> int:
        return self.data.shape[1]

    @property
    def width(self) -> int:
        return self.data.shape[2]


@dataclass(frozen=True)
class LegendEntry:
    class_id: int
    name: str
    color: tuple[int, int, int]
    base_vulnerability: int


@dataclass(frozen=True)
class ClassLegend:
    entries: tuple[LegendEntry, ...]
    excluded: tuple[str, ...] = EXCLUDED_LABELS

    def __post_init__(self):
        ids = [e.class_id for e in self.entries]
        if ids != list(range(8)):
            raise ValueError(f"legend must list class ids 0..7 in order, got {ids}")
        if self.entries[0].name != "BACKGROUND":
            raise ValueError("class 0 must be BACKGROUND")
        for e in self.entries[1:]:
            if not 1 <= e.base_vulnerability <= 5:
                raise ValueError(f"{e.name}: base vulnerability must be in 1..5")

    def __len__(self):
        return len(self.entries)

    def id_of(self, name: str) -> int:
        key = name.strip().upper()
        for e in self.entries:
            if e.name == key:
                return e.class_id
        raise KeyError(name)

    def name_of(self, class_id: int) -> str:
        return self.entries[class_id].name

    def base_vulnerability(self, class_id: int) -> int:
        if not 1 <= class_id <= 7:
            raise ValueError(f"invalid dwelling class id {class_id}")
        return self.entries[class_id].base_vulnerability

    def palette(self) -> np.ndarray:
        return np.array([e.color for e in self.entries], dtype=np.uint8)


_DEFAULT_LEGEND = [
    (0, "BACKGROUND", "#000000", 0),
    (1, "RCC", "#bdbdbd", 1),
    (2, "TILED", "#d95f02", 3),
    (3, "METAL_SHEET", "#1f78b4", 3),
    (4, "CGS_2S", "#a6cee3", 3),
    (5, "PLASTIC_SHEET", "#e7298a", 5),
    (6, "THATCH", "#e6ab02", 5),
    (7, "OTHER_ROOF", "#66a61e", 4),
]


def _parse_color(value) -> tuple[int, int, int]:
    if isinstance(value, str):
        v = value.lstrip("#")
        if len(v) != 6:
            raise ValueError(f"bad hex color {value!r}")
        return tuple(int(v[i : i + 2], 16) for i in (0, 2, 4))
    r, g, b = value
    return int(r), int(g), int(b)


def default_legend() -> ClassLegend:
    return ClassLegend(tuple(
        LegendEntry(i, name, _parse_color(color), base) for i, name, color, base in _DEFAULT_LEGEND
    ))


def load_legend(path) -> ClassLegend:
    """Reads a JSON legend::

        {"classes": [{"id": 0, "name": "BACKGROUND", "color": "#000000",
                      "base_vulnerability": 0}, ...],
         "excluded": ["NCR", "NCS"]}
    """
    doc = json.loads(Path(path).read_text())
    entries = tuple(
        LegendEntry(int(c["id"]), str(c["name"]).upper(), _parse_color(c["color"]),
                    int(c.get("base_vulnerability", 0)))
        for c in sorted(doc["classes"], key=lambda c: int(c["id"]))
    )
    excluded = tuple(s.upper() for s in doc.get("excluded", EXCLUDED_LABELS))
    return ClassLegend(entries, excluded)


def save_legend(legend: ClassLegend, path) -> None:
    doc = {
        "classes": [
            {"id": e.class_id, "name": e.name, "color": "#%02x%02x%02x" % e.color,
             "base_vulnerability": e.base_vulnerability}
            for e in legend.entries
        ],
        "excluded": list(legend.excluded),
    }
    Path(path).write_text(json.dumps(doc, indent=2) + "\n")


@dataclass
class LabeledDwelling:
    ring: np.ndarray
    class_id: int
    source_id: str = ""

    def __post_init__(self):
        self.ring = geometry.as_ring(self.ring)
        if not geometry.is_closed(self.ring) or len(self.ring) < 4:
            raise ValueError(f"dwelling {self.source_id!r}: ring must be closed with >= 4 points")
        if not geometry.ring_is_simple(self.ring):
            raise ValueError(f"dwelling {self.source_id!r}: ring self-intersects")
        if not 1 <= self.class_id <= 7:
            raise ValueError(f"dwelling {self.source_id!r}: class id {self.class_id} not in 1..7")

    @property
    def area(self) -> float:
        return abs(geometry.signed_area(self.ring))


# ---------------------------------------------------------------------------
# raster I/O
# ---------------------------------------------------------------------------


def world_file_path(image_path) -> Path:
    return Path(image_path).with_suffix(".wld")


def read_world_file(path) -> GeoTransform:
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(f"world file not found: {path}")
    lines = [ln.strip() for ln in path.read_text().splitlines() if ln.strip()]
    if len(lines) != 6:
        raise ValueError(f"malformed world file {path}: expected 6 lines, got {len(lines)}")
    try:
        a, d, b, e, c, f = (float(v) for v in lines)
    except ValueError as exc:
        raise ValueError(f"malformed world file {path}: {exc}") from None
    return GeoTransform(pixel_size_x=a, pixel_size_y=e, origin_x=c, origin_y=f, rot_x=b, rot_y=d)


def write_world_file(transform: GeoTransform, path) -> None:
    Path(path).write_text("".join(f"{v!r}\n" for v in transform.world_lines()))


def load_raster_bundle(image_path, world_path=None) -> GeoRaster:
    """Loads an 8-bit lossless image and its 6-line world file."""
    image_path = Path(image_path)
    if not image_path.exists():
        raise FileNotFoundError(f"image not found: {image_path}")
    transform = read_world_file(world_path or world_file_path(image_path))
    with Image.open(image_path) as img:
        if img.format not in LOSSLESS_FORMATS:
            raise ValueError(f"{image_path}: {img.format} is not a lossless format")
        if img.mode == "L":
            data = np.asarray(img, dtype=np.uint8)[None]
        elif img.mode in ("RGB", "RGBA"):
            data = np.asarray(img.convert("RGB"), dtype=np.uint8).transpose(2, 0, 1)
        else:
            raise ValueError(f"{image_path}: unsupported bit depth / mode {img.mode}")
    return GeoRaster(np.ascontiguousarray(data), transform)


def save_raster_bundle(raster: GeoRaster, image_path) -> None:
    image_path = Path(image_path)
    data = np.asarray(raster.data, dtype=np.uint8)
    img = Image.fromarray(data[0] if raster.bands == 1 else data.transpose(1, 2, 0))
    img.save(image_path, format="PNG")
    write_world_file(raster.transform, world_file_path(image_path))


def save_mask(mask: np.ndarray, path) -> None:
    Image.fromarray(np.asarray(mask, dtype=np.uint8)).save(path, format="PNG")


def load_mask(path) -> np.ndarray:
    with Image.open(path) as img:
        if img.mode not in ("L", "P"):
            raise ValueError(f"{path}: mask must be single-channel 8-bit, got {img.mode}")
        return np.asarray(img, dtype=np.uint8).copy()


# ---------------------------------------------------------------------------
# labels
# ---------------------------------------------------------------------------


def parse_labels(geojson_path, legend: ClassLegend) -> tuple[list[LabeledDwelling], int]:
    """Reads dwelling outlines from a GeoJSON FeatureCollection.

    Returns the dwellings whose ``roof_type`` maps to a legend class plus the
    number of features dropped for carrying an excluded label (NCR/NCS).
    """
    doc = json.loads(Path(geojson_path).read_text())
    if doc.get("type") != "FeatureCollection":
        raise ValueError(f"{geojson_path}: not a FeatureCollection")
    dwellings, dropped = [], 0
    for i, feat in enumerate(doc.get("features", [])):
        props = feat.get("properties") or {}
        roof = str(props.get("roof_type", "")).strip().upper()
        if roof in legend.excluded:
            dropped += 1
            continue
        try:
            class_id = legend.id_of(roof)
        except KeyError:
            raise ValueError(f"unknown roof type {roof!r} in feature {i}") from None
        if class_id == 0:
            raise ValueError(f"feature {i} is labeled BACKGROUND")
        geom = feat.get("geometry") or {}
        if geom.get("type") != "Polygon":
            raise ValueError(f"feature {i}: geometry must be Polygon, got {geom.get('type')}")
        rings = geom["coordinates"]
        if len(rings) > 1:
            logger.warning("feature %d: ignoring %d interior ring(s)", i, len(rings) - 1)
        source_id = str(feat.get("id", props.get("id", i)))
        dwellings.append(LabeledDwelling(np.asarray(rings[0], dtype=np.float64)[:, :2],
                                         class_id, source_id))
    return dwellings, dropped


def ring_pixel_mask(ring_xy, transform: GeoTransform, height: int, width: int):
    """Pixels whose centers fall inside a ground-space ring.

    Returns ``(rows, cols, inside)`` for the ring's pixel bounding box, or
    None when the ring lies entirely outside the grid.
    """
    col, row = transform.to_pixel(ring_xy[:, 0], ring_xy[:, 1])
    c0 = max(0, int(math.floor(col.min() - 0.5)))
    c1 = min(width, int(math.ceil(col.max() + 0.5)))
    r0 = max(0, int(math.floor(row.min() - 0.5)))
    r1 = min(height, int(math.ceil(row.max() + 0.5)))
    if c0 >= c1 or r0 >= r1:
        return None
    pring = np.column_stack([col, row])
    cc, rr = np.meshgrid(np.arange(c0, c1) + 0.5, np.arange(r0, r1) + 0.5)
    inside = geometry.points_in_ring(cc, rr, pring)
    return slice(r0, r1), slice(c0, c1), inside


def rasterize_labels(dwellings: Sequence[LabeledDwelling], raster_or_shape, transform=None):
    """Burns dwelling classes into a (height, width) uint8 mask.

    A pixel belongs to a dwelling iff its center is inside the ring (even-odd
    rule). Overlaps go to the smaller dwelling; equal areas go to the later
    one in the input order.

    ``raster_or_shape`` is a :class:`GeoRaster`, or a (height, width) tuple
    together with ``transform``.
    """
    if isinstance(raster_or_shape, GeoRaster):
        height, width = raster_or_shape.height, raster_or_shape.width
        transform = raster_or_shape.transform
    else:
        height, width = raster_or_shape
    mask = np.zeros((height, width), dtype=np.uint8)
    order = sorted(range(len(dwellings)), key=lambda i: -dwellings[i].area)
    for i in order:
        hit = ring_pixel_mask(dwellings[i].ring, transform, height, width)
        if hit is None:
            continue
        rs, cs, inside = hit
        mask[rs, cs][inside] = dwellings[i].class_id
    return mask


# ---------------------------------------------------------------------------
# GeoJSON output
# ---------------------------------------------------------------------------


def _num(v):
    if v is None:
        return None
    v = float(v)
    return v if math.isfinite(v) else None


def _ring_coords(ring) -> list[list[float]]:
    return [[float(x), float(y)] for x, y in geometry.close_ring(ring)]


def dwelling_feature(ring, properties: dict) -> dict:
    return {
        "type": "Feature",
        "geometry": {"type": "Polygon", "coordinates": [_ring_coords(ring)]},
        "properties": properties,
    }


def write_feature_collection(features: Iterable[dict], path, metadata: dict | None = None) -> None:
    doc = {"type": "FeatureCollection"}
    if metadata:
        doc["metadata"] = metadata
    doc["features"] = list(features)
    try:
        Path(path).write_text(json.dumps(doc, indent=1) + "\n")
    except OSError as exc:
        raise OSError(f"cannot write {path}: {exc}") from exc


def write_geojson(dwellings: Sequence["RiskedDwelling"], path, legend: ClassLegend | None = None,
                  metadata: dict | None = None) -> None:
    """Writes scored dwellings as a FeatureCollection, preserving order.

    Distances that are undefined (empty context layer) are written as null.
    """
    legend = legend or default_legend()
    features = []
    for d in dwellings:
        poly = d.polygon
        name = legend.name_of(poly.class_id)
        features.append(dwelling_feature(poly.ring, {
            "class": int(poly.class_id),
            "class_name": name,
            "roof_type": name,
            "confidence": _num(poly.confidence),
            "pixel_area": int(poly.pixel_area),
            "risk_score": int(d.risk_score),
            "hazard_depth_max_m": _num(d.hazard_depth_max_m),
            "dist_water_m": _num(d.dist_water_m),
            "dist_road_m": _num(d.dist_road_m),
        }))
    write_feature_collection(features, path, metadata)


def read_feature_collection(path) -> list[dict]:
    doc = json.loads(Path(path).read_text())
    if doc.get("type") != "FeatureCollection":
        raise ValueError(f"{path}: not a FeatureCollection")
    return doc.get("features", [])


def risk_output_schema() -> dict:
    """JSON Schema describing the scored-dwelling GeoJSON."""
    text = resources.files("roofrisk").joinpath("schemas/risk_output.schema.json").read_text()
    return json.loads(text)
