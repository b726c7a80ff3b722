"""Fixed-size georeferenced tiling, empty-tile filtering and dataset splits."""

from __future__ import annotations

import math
from dataclasses import dataclass, replace
from pathlib import Path

import numpy as np

from .geodata import GeoRaster, load_mask, load_raster_bundle, save_mask, save_raster_bundle

SPLITS = ("TRAIN", "VAL", "TEST", "UNASSIGNED")

# 64-bit LCG (Knuth's MMIX constants) driving the split shuffle
LCG_MULTIPLIER = 6364136223846793005
LCG_INCREMENT = 1442695040888963407
_MASK64 = (1 << 64) - 1


@dataclass
class TileSample:
    image: GeoRaster
    mask: np.ndarray
    aoi_id: str
    tile_index: tuple[int, int]
    valid_region: tuple[int, int]  # (width, height) of unpadded pixels
    split: str = "UNASSIGNED"

    def __post_init__(self):
        if self.mask.shape != (self.image.height, self.image.width):
            raise ValueError("tile image and mask differ in size")
        vw, vh = self.valid_region
        if not (0 < vw <= self.image.width and 0 < vh <= self.image.height):
            raise ValueError(f"valid region {self.valid_region} exceeds tile size")
        if self.split not in SPLITS:
            raise ValueError(f"unknown split {self.split!r}")

    @property
    def valid_mask(self) -> np.ndarray:
        vw, vh = self.valid_region
        valid = np.zeros(self.mask.shape, dtype=bool)
        valid[:vh, :vw] = True
        return valid


def tile_raster(raster: GeoRaster, mask: np.ndarray, tile_size: int = 512,
                aoi_id: str = "aoi") -> list[TileSample]:
    """Cuts a raster and its class mask into row-major tiles.

    Right and bottom edge tiles are zero-padded to ``tile_size``; their
    ``valid_region`` records the unpadded extent.
    """
    if tile_size < 32:
        raise ValueError("tile_size must be >= 32")
    if mask.shape != (raster.height, raster.width):
        raise ValueError(
            f"dimension mismatch: raster {raster.height}x{raster.width}, mask {mask.shape}"
        )
    tiles = []
    for r in range(math.ceil(raster.height / tile_size)):
        for c in range(math.ceil(raster.width / tile_size)):
            r0, c0 = r * tile_size, c * tile_size
            vh = min(tile_size, raster.height - r0)
            vw = min(tile_size, raster.width - c0)
            img = np.zeros((raster.bands, tile_size, tile_size), dtype=raster.data.dtype)
            img[:, :vh, :vw] = raster.data[:, r0 : r0 + vh, c0 : c0 + vw]
            msk = np.zeros((tile_size, tile_size), dtype=mask.dtype)
            msk[:vh, :vw] = mask[r0 : r0 + vh, c0 : c0 + vw]
            tiles.append(TileSample(
                image=GeoRaster(img, raster.transform.translated(c0, r0)),
                mask=msk,
                aoi_id=aoi_id,
                tile_index=(r, c),
                valid_region=(vw, vh),
            ))
    return tiles


def reassemble(tiles: list[TileSample], height: int, width: int):
    """Inverse of :func:`tile_raster`: ``(image data, mask)`` cropped to valid regions."""
    if not tiles:
        raise ValueError("no tiles to reassemble")
    size = tiles[0].mask.shape[0]
    bands = tiles[0].image.bands
    data = np.zeros((bands, height, width), dtype=tiles[0].image.data.dtype)
    mask = np.zeros((height, width), dtype=tiles[0].mask.dtype)
    for t in tiles:
        r, c = t.tile_index
        vw, vh = t.valid_region
        data[:, r * size : r * size + vh, c * size : c * size + vw] = t.image.data[:, :vh, :vw]
        mask[r * size : r * size + vh, c * size : c * size + vw] = t.mask[:vh, :vw]
    return data, mask


def filter_empty(tiles: list[TileSample]) -> tuple[list[TileSample], int]:
    """Keeps tiles with at least one dwelling pixel (class 1..7)."""
    kept = [t for t in tiles if np.any((t.mask >= 1) & (t.mask <= 7))]
    return kept, len(tiles) - len(kept)


def split_counts(n: int, ratios=(0.7, 0.15, 0.15)) -> tuple[int, int, int]:
    """Train/val/test sizes: round-half-up of train and val, test takes the rest."""
    if n < 3:
        raise ValueError(f"need at least 3 tiles to populate all splits, got {n}")
    if min(ratios) <= 0 or abs(sum(ratios) - 1) > 1e-9:
        raise ValueError(f"split ratios must be positive and sum to 1, got {ratios}")
    n_train = math.floor(ratios[0] * n + 0.5)
    n_val = math.floor(ratios[1] * n + 0.5)
    return n_train, n_val, n - n_train - n_val


def lcg_permutation(n: int, seed: int) -> list[int]:
    """Fisher-Yates shuffle of range(n) driven by a 64-bit LCG.

    state <- state * 6364136223846793005 + 1442695040888963407 (mod 2**64),
    seeded with ``seed mod 2**64``; each draw uses the high 31 bits
    (state >> 33) modulo the remaining range.
    """
    state = seed & _MASK64
    perm = list(range(n))
    for i in range(n - 1, 0, -1):
        state = (state * LCG_MULTIPLIER + LCG_INCREMENT) & _MASK64
        j = (state >> 33) % (i + 1)
        perm[i], perm[j] = perm[j], perm[i]
    return perm


def split_dataset(tiles: list[TileSample], ratios=(0.7, 0.15, 0.15), seed: int = 0) -> list[TileSample]:
    """Assigns TRAIN/VAL/TEST by a seeded shuffle; returns new samples in input order."""
    n_train, n_val, _ = split_counts(len(tiles), ratios)
    labels = [""] * len(tiles)
    for rank, idx in enumerate(lcg_permutation(len(tiles), seed)):
        labels[idx] = "TRAIN" if rank < n_train else "VAL" if rank < n_train + n_val else "TEST"
    return [replace(t, split=s) for t, s in zip(tiles, labels)]


# ---------------------------------------------------------------------------
# on-disk tile store
# ---------------------------------------------------------------------------

MANIFEST_NAME = "splits.txt"


def save_tiles(tiles: list[TileSample], root) -> Path:
    """Writes ``<aoi>/<row>_<col>.png`` (+ ``.wld``, ``_mask.png``) and a manifest.

    Manifest lines: ``<relative image path> <split> <valid width> <valid height>``.
    """
    root = Path(root)
    lines = []
    for t in tiles:
        r, c = t.tile_index
        rel = Path(t.aoi_id) / f"{r}_{c}.png"
        (root / t.aoi_id).mkdir(parents=True, exist_ok=True)
        save_raster_bundle(t.image, root / rel)
        save_mask(t.mask, root / t.aoi_id / f"{r}_{c}_mask.png")
        vw, vh = t.valid_region
        lines.append(f"{rel.as_posix()} {t.split} {vw} {vh}")
    manifest = root / MANIFEST_NAME
    manifest.write_text("".join(line + "\n" for line in lines))
    return manifest


def load_tiles(root) -> list[TileSample]:
    root = Path(root)
    tiles = []
    for line in (root / MANIFEST_NAME).read_text().splitlines():
        if not line.strip():
            continue
        rel, split, vw, vh = line.split()
        path = root / rel
        r, c = (int(v) for v in path.stem.split("_"))
        tiles.append(TileSample(
            image=load_raster_bundle(path),
            mask=load_mask(path.with_name(f"{path.stem}_mask.png")),
            aoi_id=path.parent.name,
            tile_index=(r, c),
            valid_region=(int(vw), int(vh)),
            split=split,
        ))
    return tiles
