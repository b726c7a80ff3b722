import json
import math

import numpy as np
import pytest

from roofrisk import risk
from roofrisk.geodata import GeoTransform, default_legend
from roofrisk.vectorize import DwellingPolygon

from oracles import dense_distance

LEGEND = default_legend()
RCC, TILED, PLASTIC, THATCH = 1, 2, 5, 6


def sq(x0, y0, s=1.0):
    return np.array([(x0, y0), (x0 + s, y0), (x0 + s, y0 + s), (x0, y0 + s), (x0, y0)], float)


def grid_of(depth, cell=1.0, origin=(0.0, 0.0), nodata=-9999.0):
    depth = np.asarray(depth, float)
    tf = GeoTransform(cell, -cell, origin[0], origin[1] + depth.shape[0] * cell)
    return risk.HazardGrid(depth, tf, nodata)


# ---------------------------------------------------------------- scoring


def test_score_examples():
    assert risk.risk_score(THATCH, LEGEND, 0.6, 10.0) == 5
    assert risk.risk_score(RCC, LEGEND, 0.0, 500.0) == 1
    assert risk.risk_score(TILED, LEGEND, 0.3, 40.0) == 5


def test_score_infinite_distance_is_far():
    assert risk.risk_score(RCC, LEGEND, 0.0, math.inf) == 1


def test_invalid_class():
    with pytest.raises(ValueError):
        risk.risk_score(0, LEGEND, 0.0, 100.0)
    with pytest.raises(ValueError):
        risk.risk_score(8, LEGEND, 0.0, 100.0)


def test_config_validation(tmp_path):
    with pytest.raises(ValueError):
        risk.ScoringConfig(depth_edges_m=[0.0], depth_modifiers=[0, 1, 2])
    with pytest.raises(ValueError):
        risk.ScoringConfig(cell_size_m=0)
    (tmp_path / "s.json").write_text(json.dumps({"proximity_threshold_m": 10.0}))
    cfg = risk.ScoringConfig.from_file(tmp_path / "s.json")
    assert risk.risk_score(TILED, LEGEND, 0.3, 40.0, cfg) == 4
    assert cfg.metadata()["version"] == "additive-v1"


def test_base_override():
    cfg = risk.ScoringConfig(base_overrides={"RCC": 3})
    assert risk.risk_score(RCC, LEGEND, 0.0, 500.0, cfg) == 3


def test_score_sweep_properties(rng):
    for _ in range(2000):
        c = int(rng.integers(1, 8))
        d1, d2 = sorted(rng.uniform(0, 2, 2) * rng.integers(0, 2, 2))
        w1, w2 = sorted(rng.uniform(0, 120, 2))
        s = risk.risk_score(c, LEGEND, d1, w1)
        assert s in (1, 2, 3, 4, 5)
        assert risk.risk_score(c, LEGEND, d2, w1) >= s
        assert risk.risk_score(c, LEGEND, d1, w2) <= s
        assert risk.risk_score(RCC, LEGEND, d1, w1) <= risk.risk_score(THATCH, LEGEND, d1, w1)
        assert risk.risk_score(RCC, LEGEND, d1, w1) <= risk.risk_score(PLASTIC, LEGEND, d1, w1)


# ---------------------------------------------------------------- hazard sampling


def test_uniform_zero():
    assert risk.sample_hazard(sq(1, 1, 2), grid_of(np.zeros((5, 5)))) == 0.0


def test_max_over_covered_cells():
    # cells (row-major from the north) at x in [0,3): centers 0.5, 1.5, 2.5 on the top row
    depth = np.zeros((2, 3))
    depth[0] = [0.2, 0.7, 0.4]
    poly = np.array([(0.1, 1.1), (2.9, 1.1), (2.9, 1.9), (0.1, 1.9), (0.1, 1.1)])
    assert risk.sample_hazard(poly, grid_of(depth)) == 0.7


def test_nearest_cell_fallback():
    depth = np.array([[0.1, 0.3], [0.5, 0.9]])
    g = grid_of(depth)
    tiny = sq(0.9, 1.1, 0.05)  # no center inside; centroid nearest (1.5? no) cell centers
    cx, cy = 0.925, 1.125
    centers = [(0.5, 1.5, 0.1), (1.5, 1.5, 0.3), (0.5, 0.5, 0.5), (1.5, 0.5, 0.9)]
    expected = min(centers, key=lambda t: (t[0] - cx) ** 2 + (t[1] - cy) ** 2)[2]
    assert risk.sample_hazard(tiny, g) == expected == 0.1


def test_nodata_ignored():
    depth = np.array([[-9999.0, 0.3], [0.2, 0.1]])
    assert risk.sample_hazard(sq(0, 0, 2), grid_of(depth)) == 0.3
    with pytest.raises(ValueError):
        risk.sample_hazard(sq(0, 0, 2), grid_of(np.full((2, 2), -9999.0)))


def test_invalid_depths():
    with pytest.raises(ValueError):
        grid_of([[-1.0]])


def test_refinement_invariance(rng):
    for _ in range(50):
        coarse = np.round(rng.uniform(0, 2, (6, 6)), 2)
        fine = np.repeat(np.repeat(coarse, 2, axis=0), 2, axis=1)
        gc, gf = grid_of(coarse, 2.0), grid_of(fine, 1.0)
        x0, y0 = rng.integers(0, 5, 2) * 2.0
        w, h = rng.integers(1, 4, 2) * 2.0
        poly = np.array([(x0, y0), (x0 + w, y0), (x0 + w, y0 + h), (x0, y0 + h), (x0, y0)])
        poly = poly + rng.uniform(-0.4, 0.4, (1, 2))  # keep edges off cell centers
        poly[-1] = poly[0]
        assert risk.sample_hazard(poly, gc) == risk.sample_hazard(poly, gf)


def test_ascii_grid_round_trip(tmp_path, rng):
    depth = np.round(rng.uniform(0, 3, (4, 7)), 3)
    depth[1, 2] = -9999.0
    g = grid_of(depth, 2.5, (100.0, 50.0))
    risk.write_ascii_grid(g, tmp_path / "h.asc")
    back = risk.read_ascii_grid(tmp_path / "h.asc")
    assert np.array_equal(back.depth, depth) and back.transform == g.transform
    assert back.nodata == -9999.0


def test_ascii_grid_center_header(tmp_path):
    (tmp_path / "h.asc").write_text(
        "ncols 2\nnrows 1\nxllcenter 0.5\nyllcenter 0.5\ncellsize 1\n0.1 0.2\n")
    g = risk.read_ascii_grid(tmp_path / "h.asc")
    assert g.transform.origin_x == 0.0 and g.transform.origin_y == 1.0


def test_ascii_grid_bad_count(tmp_path):
    (tmp_path / "h.asc").write_text("ncols 2\nnrows 2\nxllcorner 0\nyllcorner 0\ncellsize 1\n1 2 3\n")
    with pytest.raises(ValueError):
        risk.read_ascii_grid(tmp_path / "h.asc")


# ---------------------------------------------------------------- distances


def water(*polys, lines=()):
    return risk.ContextLayer("water_body", list(polys), [np.asarray(ln, float) for ln in lines])


def test_touching_is_zero():
    assert risk.distance_to(sq(0, 0), water(sq(1, 0))) == 0.0


def test_contained_is_zero():
    assert risk.distance_to(sq(2, 2), water(sq(0, 0, 10))) == 0.0
    assert risk.distance_to(sq(0, 0, 10), water(sq(2, 2))) == 0.0


def test_gap_of_thirty():
    assert risk.distance_to(sq(0, 0), water(sq(31, 0, 5))) == 30.0


def test_empty_layer_infinite():
    assert risk.distance_to(sq(0, 0), water()) == math.inf


def test_distance_dense_sampling(rng):
    for _ in range(20):
        a = sq(*rng.uniform(0, 5, 2), s=float(rng.uniform(0.5, 2)))
        n = int(rng.integers(3, 7))
        ang = (np.arange(n) + rng.uniform(0, 0.5, n)) * 2 * np.pi / n
        center = rng.uniform(15, 30, 2)
        b = np.column_stack([center[0] + 3 * np.cos(ang), center[1] + 3 * np.sin(ang)])
        b = np.vstack([b, b[:1]])
        line = rng.uniform(-20, -5, (3, 2))
        ours_poly = risk.distance_to(a, water(b))
        ref_poly = min(dense_distance(a, b), dense_distance(b, a))
        assert abs(ours_poly - ref_poly) < 1e-6
        ours_line = risk.distance_to(a, water(lines=[line]))
        ref_line = min(dense_distance(a, line), dense_distance(line, a))
        assert abs(ours_line - ref_line) < 1e-6


def test_context_loading(tmp_path):
    doc = {"type": "FeatureCollection", "features": [
        {"type": "Feature", "geometry": {"type": "Polygon", "coordinates": [sq(0, 0).tolist()]},
         "properties": {"kind": "water_body"}},
        {"type": "Feature", "geometry": {"type": "LineString", "coordinates": [[0, 5], [9, 5]]},
         "properties": {"kind": "road"}},
    ]}
    (tmp_path / "c.geojson").write_text(json.dumps(doc))
    layers = risk.load_context_layers(tmp_path / "c.geojson")
    assert len(layers["water_body"].polygons) == 1 and len(layers["road"].lines) == 1
    doc["features"][0]["properties"]["kind"] = "lava"
    (tmp_path / "c.geojson").write_text(json.dumps(doc))
    with pytest.raises(ValueError):
        risk.load_context_layers(tmp_path / "c.geojson")


def test_score_dwellings_end_to_end():
    depth = np.zeros((10, 10))
    depth[:, :3] = 0.8
    g = grid_of(depth)
    polys = [DwellingPolygon(sq(0.2, 0.2, 2), THATCH, 0.9, 16),
             DwellingPolygon(sq(7, 7, 2), RCC, 0.9, 16)]
    out = risk.score_dwellings(polys, LEGEND, g, {"water_body": water(sq(200, 0))})
    assert [d.risk_score for d in out] == [5, 1]
    assert out[0].hazard_depth_max_m == 0.8 and out[1].dist_road_m == math.inf


# ---------------------------------------------------------------- clusters


def risked_at(x, y, score):
    return risk.RiskedDwelling(DwellingPolygon(sq(x, y), 1, 1.0, 4), 0.0, 100.0, 100.0, score)


def test_single_cluster():
    (cell,) = risk.aggregate_clusters([risked_at(10, 10, 5)], 100.0)
    assert (cell.level, cell.high_risk_share) == (5, 1.0)


def test_mixed_cluster():
    ds = [risked_at(10 + i, 10, s) for i, s in enumerate([1, 1, 5, 5])]
    (cell,) = risk.aggregate_clusters(ds, 100.0)
    assert cell.mean_score == 3 and cell.level == 3 and cell.high_risk_share == 0.5


def test_far_apart_two_cells():
    cells = risk.aggregate_clusters([risked_at(10, 10, 2), risked_at(1010, 10, 3)], 100.0)
    assert len(cells) == 2


def test_empty_and_invalid():
    assert risk.aggregate_clusters([], 100.0) == []
    with pytest.raises(ValueError):
        risk.aggregate_clusters([], 0.0)


def test_half_up_level():
    cells = risk.aggregate_clusters([risked_at(1, 1, 2), risked_at(2, 1, 3)], 100.0)
    assert cells[0].level == 3


def test_write_clusters(tmp_path):
    cells = risk.aggregate_clusters([risked_at(10, 10, 5)], 100.0)
    risk.write_clusters(cells, 100.0, tmp_path / "c.json")
    doc = json.loads((tmp_path / "c.json").read_text())
    assert doc["cell_size_m"] == 100.0 and doc["cells"][0]["level"] == 5
