"""Procedural stand-in data: textured roofs on textured ground.

Every roof class has its own surface texture (flat, stripes, checker, dots,
coarse noise) while roof colors are shared across classes, so a network has
to learn texture detectors to tell roof types apart. The AOI
writer also emits labels, a flood-depth grid, context layers, a legend, a
scoring config and a pipeline manifest.
"""

from __future__ import annotations

import json
from pathlib import Path

import numpy as np

from .geodata import GeoRaster, GeoTransform, default_legend, save_legend, save_raster_bundle
from .risk import HazardGrid, ScoringConfig, write_ascii_grid
from .tiler import TileSample

# class id -> (texture kind, texture amplitude, noise sd). Roof colors are
# drawn independently of the class, so only the texture identifies a roof type.
STYLES = {
    0: ("noise", 0, 12),
    1: ("flat", 0, 3),
    2: ("hstripes", 30, 4),
    3: ("vstripes", 30, 4),
    4: ("diagonal", 30, 4),
    5: ("checker", 30, 4),
    6: ("noise", 0, 30),
    7: ("dots", 45, 4),
}
NCR_STYLE = ("noise", 0, 20)
GROUND_COLOR = (92, 108, 78)
ROOF_COLORS = ((196, 190, 180), (170, 96, 70), (120, 130, 150), (150, 140, 110), (110, 100, 95))


def texture(style, h: int, w: int, rng: np.random.Generator, color=None,
            jitter: float = 8.0) -> np.ndarray:
    """A (3, h, w) float texture for one roof or ground patch.

    ``color`` defaults to a random roof color.
    """
    kind, amp, sd = style
    if color is None:
        color = ROOF_COLORS[int(rng.integers(len(ROOF_COLORS)))]
    rows, cols = np.mgrid[0:h, 0:w]
    phase = int(rng.integers(0, 4))
    if kind == "hstripes":
        pattern = np.where(((rows + phase) // 2) % 2 == 0, amp, -amp)
    elif kind == "vstripes":
        pattern = np.where(((cols + phase) // 2) % 2 == 0, amp, -amp)
    elif kind == "diagonal":
        pattern = np.where(((rows + cols + phase) // 2) % 2 == 0, amp, -amp)
    elif kind == "checker":
        pattern = np.where(((rows + phase) // 2 + (cols // 2)) % 2 == 0, amp, -amp)
    elif kind == "dots":
        pattern = np.where(((rows + phase) % 3 == 0) & ((cols + phase) % 3 == 0), amp, -amp / 8)
    else:
        pattern = np.zeros((h, w))
    shift = rng.normal(0, jitter, size=3)
    base = np.asarray(color, dtype=np.float64)[:, None, None] + shift[:, None, None]
    return base + pattern[None] + rng.normal(0, sd, size=(3, h, w))


def make_scene(height: int, width: int, rng: np.random.Generator, n_dwellings: int,
               min_side: int = 6, max_side: int = 20, n_unclear: int = 0, gap: int = 2):
    """Random non-overlapping axis-aligned roofs.

    Returns ``(image uint8 (3, H, W), mask (H, W), roofs)`` where ``roofs``
    lists ``(row, col, h, w, label)`` with label a class id or ``"NCR"``.
    """
    img = texture(STYLES[0], height, width, rng, GROUND_COLOR, jitter=4.0)
    mask = np.zeros((height, width), dtype=np.uint8)
    taken = np.zeros((height, width), dtype=bool)
    roofs = []
    labels = [int(rng.integers(1, 8)) for _ in range(n_dwellings)] + ["NCR"] * n_unclear
    for label in labels:
        for _ in range(50):
            h = int(rng.integers(min_side, max_side + 1))
            w = int(rng.integers(min_side, max_side + 1))
            if h > height or w > width:
                continue
            r = int(rng.integers(0, height - h + 1))
            c = int(rng.integers(0, width - w + 1))
            if taken[max(0, r - gap) : r + h + gap, max(0, c - gap) : c + w + gap].any():
                continue
            taken[r : r + h, c : c + w] = True
            style = NCR_STYLE if label == "NCR" else STYLES[label]
            img[:, r : r + h, c : c + w] = texture(style, h, w, rng)
            if label != "NCR":
                mask[r : r + h, c : c + w] = label
            roofs.append((r, c, h, w, label))
            break
    return np.clip(np.rint(img), 0, 255).astype(np.uint8), mask, roofs


def make_tiles(n: int, size: int, seed: int, n_dwellings: int = 6, **scene_kw):
    """Stack of ``n`` independent scenes: (images (n, 3, s, s), masks (n, s, s))."""
    rng = np.random.default_rng(seed)
    images, masks = [], []
    for _ in range(n):
        img, msk, _ = make_scene(size, size, rng, n_dwellings, **scene_kw)
        images.append(img)
        masks.append(msk)
    return np.stack(images), np.stack(masks)


def make_patches(n: int, size: int, seed: int, classes=range(8)):
    """Texture-classification patches, each filled by one class's texture.

    Returns ``(patches uint8 (n, 3, size, size), labels (n,))``; labels index
    into ``classes`` and cycle so every class is equally represented.
    """
    rng = np.random.default_rng(seed)
    classes = list(classes)
    patches, labels = [], []
    for i in range(n):
        k = i % len(classes)
        color = GROUND_COLOR if classes[k] == 0 else None
        patches.append(texture(STYLES[classes[k]], size, size, rng, color))
        labels.append(k)
    patches = np.clip(np.rint(np.stack(patches)), 0, 255).astype(np.uint8)
    return patches, np.array(labels, dtype=np.int64)


def _rect_ring(transform: GeoTransform, r, c, h, w):
    corners = [(c, r), (c, r + h), (c + w, r + h), (c + w, r), (c, r)]
    x, y = transform.to_ground([p[0] for p in corners], [p[1] for p in corners])
    return [[float(a), float(b)] for a, b in zip(x, y)]


def write_synthetic_aoi(out_dir, seed: int = 0, size: int = 384, n_dwellings: int = 90,
                        tile_size: int = 64, pixel_size: float = 0.5,
                        origin=(1000.0, 2000.0)) -> Path:
    """Writes a complete synthetic AOI and returns the path of its manifest."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    rng = np.random.default_rng(seed)
    tf = GeoTransform(pixel_size, -pixel_size, float(origin[0]), float(origin[1]))
    img, _, roofs = make_scene(size, size, rng, n_dwellings, n_unclear=3)

    # a river along the southern edge
    river_rows = max(4, size // 16)
    water = texture(("noise", 0, 6), river_rows, size, rng, (60, 80, 120))
    img[:, size - river_rows :, :] = np.clip(np.rint(water), 0, 255).astype(np.uint8)
    roofs = [rf for rf in roofs if rf[0] + rf[2] <= size - river_rows - 1]
    save_raster_bundle(GeoRaster(img, tf), out / "aoi.png")

    legend = default_legend()
    features = []
    for i, (r, c, h, w, label) in enumerate(roofs):
        name = label if label == "NCR" else legend.name_of(label)
        features.append({
            "type": "Feature",
            "id": f"d{i:04d}",
            "geometry": {"type": "Polygon", "coordinates": [_rect_ring(tf, r, c, h, w)]},
            "properties": {"roof_type": name},
        })
    (out / "labels.geojson").write_text(json.dumps(
        {"type": "FeatureCollection", "features": features}, indent=1) + "\n")

    river = _rect_ring(tf, size - river_rows, 0, river_rows, size)
    road_y = float(tf.to_ground(0, size // 3)[1])
    x0, x1 = float(tf.to_ground(0, 0)[0]), float(tf.to_ground(size, 0)[0])
    context = {"type": "FeatureCollection", "features": [
        {"type": "Feature", "geometry": {"type": "Polygon", "coordinates": [river]},
         "properties": {"kind": "water_body"}},
        {"type": "Feature", "geometry": {"type": "LineString",
                                         "coordinates": [[x0, road_y], [x1, road_y]]},
         "properties": {"kind": "road"}},
    ]}
    (out / "context.geojson").write_text(json.dumps(context, indent=1) + "\n")

    # flood depth falls off linearly with distance from the river bank
    cell = 8 * pixel_size
    n_cells = int(np.ceil(size * pixel_size / cell))
    gtf = GeoTransform(cell, -cell, tf.origin_x, tf.origin_y)
    _, cy = gtf.to_ground(0, np.arange(n_cells) + 0.5)
    bank_y = float(tf.to_ground(0, size - river_rows)[1])
    dist = np.maximum(0.0, cy - bank_y)
    depth = np.clip(1.2 - dist / 40.0, 0.0, None)
    depth = np.round(np.repeat(depth[:, None], n_cells, axis=1), 3)
    depth[0, 0] = -9999.0  # a NODATA cell
    write_ascii_grid(HazardGrid(depth, gtf, -9999.0), out / "hazard.asc")

    save_legend(legend, out / "legend.json")
    (out / "scoring.json").write_text(json.dumps(
        {k: v for k, v in ScoringConfig().metadata().items() if k != "version"}, indent=1) + "\n")
    manifest = {
        "aoi_id": "synthetic",
        "imagery": "aoi.png",
        "labels": "labels.geojson",
        "legend": "legend.json",
        "hazard": "hazard.asc",
        "context": "context.geojson",
        "scoring": "scoring.json",
        "output_dir": "run",
        "tile_size": tile_size,
        "split_ratios": [0.7, 0.15, 0.15],
        "seed": seed,
        "width_scale": 0.125,
        "epsilon": 0.5,
        "min_component_size": 4,
        "train": {"learning_rate": 3e-3, "batch_size": 4, "max_epochs": 150,
                  "early_stop_patience": 40},
    }
    path = out / "manifest.json"
    path.write_text(json.dumps(manifest, indent=1) + "\n")
    return path


def as_tile_samples(images, masks, split: str = "TRAIN", aoi_id: str = "synthetic",
                    pixel_size: float = 0.5) -> list[TileSample]:
    """Wraps stacked tiles as TileSamples laid out side by side in one row."""
    out = []
    for i, (img, msk) in enumerate(zip(images, masks)):
        size = msk.shape[1]
        tf = GeoTransform(pixel_size, -pixel_size, i * size * pixel_size, 0.0)
        out.append(TileSample(GeoRaster(img, tf), msk, aoi_id, (0, i),
                              (msk.shape[1], msk.shape[0]), split))
    return out
