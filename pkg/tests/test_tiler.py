import numpy as np
import pytest

from roofrisk import tiler
from roofrisk.geodata import GeoRaster, GeoTransform

TF = GeoTransform(0.5, -0.5, 100.0, 200.0)


def raster(h, w, rng, bands=3):
    return GeoRaster(rng.integers(0, 256, (bands, h, w)).astype(np.uint8), TF)


def fake_tiles(masks):
    img = GeoRaster(np.zeros((3, 32, 32), np.uint8), TF)
    return [tiler.TileSample(img, m, "a", (0, i), (32, 32)) for i, m in enumerate(masks)]


def test_four_full_tiles(rng):
    r = raster(1024, 1024, rng, 1)
    tiles = tiler.tile_raster(r, np.zeros((1024, 1024), np.uint8), 512)
    assert len(tiles) == 4
    assert all(t.valid_region == (512, 512) for t in tiles)
    assert [t.tile_index for t in tiles] == [(0, 0), (0, 1), (1, 0), (1, 1)]


def test_edge_tiles_padded(rng):
    r = raster(1280, 1280, rng, 1)
    tiles = tiler.tile_raster(r, np.zeros((1280, 1280), np.uint8), 512)
    assert len(tiles) == 9
    right = [t for t in tiles if t.tile_index[1] == 2]
    assert len(right) == 3 and all(t.valid_region[0] == 256 for t in right)
    corner = tiles[-1]
    assert corner.valid_region == (256, 256)
    assert not corner.image.data[:, 256:, :].any() and not corner.image.data[:, :, 256:].any()


def test_single_tile_identity(rng):
    r = raster(512, 512, rng)
    mask = rng.integers(0, 8, (512, 512)).astype(np.uint8)
    (t,) = tiler.tile_raster(r, mask, 512)
    assert np.array_equal(t.image.data, r.data) and np.array_equal(t.mask, mask)
    assert t.image.transform == TF


def test_tile_transform_translated(rng):
    tiles = tiler.tile_raster(raster(100, 100, rng), np.zeros((100, 100), np.uint8), 64)
    t = tiles[3]  # row 1, col 1
    assert t.tile_index == (1, 1)
    assert t.image.transform.origin_x == 100.0 + 64 * 0.5
    assert t.image.transform.origin_y == 200.0 - 64 * 0.5


def test_dimension_mismatch(rng):
    with pytest.raises(ValueError, match="mismatch"):
        tiler.tile_raster(raster(64, 64, rng), np.zeros((64, 63), np.uint8), 32)
    with pytest.raises(ValueError):
        tiler.tile_raster(raster(64, 64, rng), np.zeros((64, 64), np.uint8), 16)


@pytest.mark.parametrize("h,w,size", [(100, 70, 32), (64, 64, 32), (33, 200, 64), (5, 5, 32)])
def test_reassembly_bit_exact(h, w, size, rng):
    r = raster(h, w, rng)
    mask = rng.integers(0, 8, (h, w)).astype(np.uint8)
    data, m = tiler.reassemble(tiler.tile_raster(r, mask, size), h, w)
    assert np.array_equal(data, r.data) and np.array_equal(m, mask)


def test_filter_empty_counts():
    masks = [np.zeros((32, 32), np.uint8) for _ in range(250)]
    for i in range(214):
        masks[i][i % 32, 3] = 1 + i % 7
    kept, dropped = tiler.filter_empty(fake_tiles(masks))
    assert (len(kept), dropped) == (214, 36)
    again, dropped2 = tiler.filter_empty(kept)
    assert len(again) == 214 and dropped2 == 0


def test_filter_edge_cases():
    assert tiler.filter_empty([]) == ([], 0)
    masks = [np.full((32, 32), 5, np.uint8)] * 3
    assert tiler.filter_empty(fake_tiles(masks))[1] == 0


def test_split_counts_rounding():
    assert tiler.split_counts(214, (0.7, 0.15, 0.15)) == (150, 32, 32)
    assert tiler.split_counts(20, (0.7, 0.15, 0.15)) == (14, 3, 3)
    with pytest.raises(ValueError):
        tiler.split_counts(2)
    with pytest.raises(ValueError):
        tiler.split_counts(10, (0.5, 0.3, 0.3))


def test_split_partition_all_n():
    for n in range(3, 300):
        a, b, c = tiler.split_counts(n)
        assert a == int(np.floor(0.7 * n + 0.5)) and b == int(np.floor(0.15 * n + 0.5))
        assert a + b + c == n and min(a, b, c) >= 0


def test_lcg_reference_values():
    # first state for seed 0 is the increment itself
    assert sorted(tiler.lcg_permutation(10, 0)) == list(range(10))
    state = 0
    perm = list(range(5))
    for i in range(4, 0, -1):
        state = (state * 6364136223846793005 + 1442695040888963407) % 2 ** 64
        j = (state >> 33) % (i + 1)
        perm[i], perm[j] = perm[j], perm[i]
    assert tiler.lcg_permutation(5, 0) == perm


def test_split_deterministic_and_exhaustive():
    tiles = fake_tiles([np.ones((32, 32), np.uint8)] * 214)
    a = tiler.split_dataset(tiles, (0.7, 0.15, 0.15), seed=42)
    b = tiler.split_dataset(tiles, (0.7, 0.15, 0.15), seed=42)
    labels = [t.split for t in a]
    assert labels == [t.split for t in b]
    assert (labels.count("TRAIN"), labels.count("VAL"), labels.count("TEST")) == (150, 32, 32)
    c = tiler.split_dataset(tiles, (0.7, 0.15, 0.15), seed=43)
    assert labels != [t.split for t in c]


def test_split_too_few():
    with pytest.raises(ValueError):
        tiler.split_dataset(fake_tiles([np.ones((32, 32), np.uint8)] * 2))


def test_store_round_trip(tmp_path, rng):
    r = raster(80, 70, rng)
    mask = rng.integers(0, 8, (80, 70)).astype(np.uint8)
    tiles = tiler.split_dataset(tiler.tile_raster(r, mask, 32, "aoi7"), seed=1)
    manifest = tiler.save_tiles(tiles, tmp_path)
    assert (tmp_path / "aoi7" / "1_2.png").exists() and (tmp_path / "aoi7" / "1_2_mask.png").exists()
    assert (tmp_path / "aoi7" / "1_2.wld").exists()
    assert manifest.read_text().splitlines()[0] == f"aoi7/0_0.png {tiles[0].split} 32 32"
    back = tiler.load_tiles(tmp_path)
    for a, b in zip(tiles, back):
        assert np.array_equal(a.image.data, b.image.data) and np.array_equal(a.mask, b.mask)
        assert (a.tile_index, a.valid_region, a.split, a.aoi_id) == (b.tile_index, b.valid_region, b.split, b.aoi_id)
        assert a.image.transform == b.image.transform
