import json

import numpy as np

from roofrisk import geodata, risk, synthetic


def test_scene_mask_matches_roofs(rng):
    img, mask, roofs = synthetic.make_scene(128, 128, rng, 8, n_unclear=2)
    assert img.shape == (3, 128, 128) and img.dtype == np.uint8
    expected = np.zeros_like(mask)
    for r, c, h, w, label in roofs:
        if label != "NCR":
            expected[r : r + h, c : c + w] = label
    assert np.array_equal(mask, expected)
    assert sum(label == "NCR" for *_, label in roofs) == 2


def test_roofs_do_not_touch(rng):
    _, _, roofs = synthetic.make_scene(128, 128, rng, 40)
    taken = np.zeros((128, 128), int)
    for r, c, h, w, _ in roofs:
        taken[r : r + h, c : c + w] += 1
    assert taken.max() == 1


def test_tiles_deterministic():
    a = synthetic.make_tiles(3, 64, seed=5)
    b = synthetic.make_tiles(3, 64, seed=5)
    assert all(np.array_equal(x, y) for x, y in zip(a, b))
    assert a[0].shape == (3, 3, 64, 64) and a[1].shape == (3, 64, 64)
    assert a[1].max() <= 7


def test_patches_balanced():
    patches, labels = synthetic.make_patches(40, 16, seed=0)
    assert patches.shape == (40, 3, 16, 16)
    assert np.array_equal(np.bincount(labels), np.full(8, 5))


def test_textures_differ_by_class(rng):
    # horizontal stripes: neighbouring rows differ far more than neighbouring columns
    t = synthetic.texture(synthetic.STYLES[2], 32, 32, rng)
    rows = np.abs(np.diff(t.mean(axis=0), axis=0)).mean()
    cols = np.abs(np.diff(t.mean(axis=0), axis=1)).mean()
    assert rows > 3 * cols


def test_aoi_files_consistent(tmp_path):
    manifest = synthetic.write_synthetic_aoi(tmp_path, seed=1, size=128, n_dwellings=12)
    doc = json.loads(manifest.read_text())
    raster = geodata.load_raster_bundle(tmp_path / doc["imagery"])
    assert (raster.width, raster.height, raster.bands) == (128, 128, 3)
    legend = geodata.load_legend(tmp_path / doc["legend"])
    dwellings, dropped = geodata.parse_labels(tmp_path / doc["labels"], legend)
    assert dropped == 3 and len(dwellings) > 0
    mask = geodata.rasterize_labels(dwellings, raster)
    assert mask.any()
    grid = risk.read_ascii_grid(tmp_path / doc["hazard"])
    assert (~grid.valid).sum() == 1 and grid.depth[grid.valid].max() > 0
    layers = risk.load_context_layers(tmp_path / doc["context"])
    assert layers["water_body"].polygons and layers["road"].lines


def test_aoi_deterministic(tmp_path):
    synthetic.write_synthetic_aoi(tmp_path / "a", seed=2, size=96, n_dwellings=8)
    synthetic.write_synthetic_aoi(tmp_path / "b", seed=2, size=96, n_dwellings=8)
    for name in ("aoi.png", "labels.geojson", "hazard.asc", "manifest.json"):
        assert (tmp_path / "a" / name).read_bytes() == (tmp_path / "b" / name).read_bytes()


def test_as_tile_samples():
    images, masks = synthetic.make_tiles(2, 32, seed=0)
    tiles = synthetic.as_tile_samples(images, masks)
    assert [t.tile_index for t in tiles] == [(0, 0), (0, 1)]
    assert all(t.split == "TRAIN" and t.valid_region == (32, 32) for t in tiles)
