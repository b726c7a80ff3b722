"""Command-line entry point: ``roofrisk <subcommand> [options]``.

Stages exchange files inside one output directory, so ``pipeline`` and a
manual chain of ``tile``, ``train``, ``predict``, ``vectorize`` and ``score``
produce identical artifacts::

    <out>/labels_mask.png          rasterized labels (rasterize-labels, tile)
    <out>/tiles/                   tile store with its split manifest (tile)
    <out>/checkpoints/             last checkpoint and training log (train)
    <out>/model.weights            best-validation weights (train)
    <out>/classes.png, .wld        predicted class map (predict)
    <out>/confidence.npy           per-pixel max softmax probability (predict)
    <out>/dwellings.geojson        simplified polygons (vectorize)
    <out>/risk.geojson             scored dwellings (score)
    <out>/clusters.json            neighbourhood aggregation (score)
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from PIL import Image
from threadpoolctl import threadpool_limits

from . import geodata, metrics, risk, synthetic, tiler, vectorize
from . import ternausnet as tn
from . import train as tr

logger = logging.getLogger("roofrisk")

THREADS_ENV = "ROOFRISK_THREADS"


class ValidationError(Exception):
    """Bad manifest, flags or inputs; reported with exit status 1."""


@dataclass
class PipelineManifest:
    imagery: Path
    labels: Path
    legend: Path | None
    hazard: Path | None
    context: Path | None
    output_dir: Path
    aoi_id: str = "aoi"
    tile_size: int = 512
    split_ratios: tuple[float, float, float] = (0.7, 0.15, 0.15)
    seed: int = 0
    width_scale: float = 1.0
    epsilon: float = vectorize.DEFAULT_EPSILON_M
    min_component_size: int = vectorize.DEFAULT_MIN_COMPONENT
    pretrained_encoder: Path | None = None
    train: dict = field(default_factory=dict)
    scoring: risk.ScoringConfig = field(default_factory=risk.ScoringConfig)

    @classmethod
    def load(cls, path, overrides: dict | None = None) -> "PipelineManifest":
        """Reads a JSON manifest; relative paths resolve against its folder."""
        path = Path(path)
        try:
            doc = json.loads(path.read_text())
        except (OSError, json.JSONDecodeError) as exc:
            raise ValidationError(f"cannot read manifest {path}: {exc}") from None
        doc.update({k: v for k, v in (overrides or {}).items() if v is not None})
        base = path.parent

        def resolve(key, required=True):
            value = doc.get(key)
            if value is None:
                if required:
                    raise ValidationError(f"manifest is missing {key!r}")
                return None
            p = Path(value)
            return p if p.is_absolute() else base / p

        scoring = doc.get("scoring")
        try:
            if isinstance(scoring, dict):
                scoring_cfg = risk.ScoringConfig(**scoring)
            elif scoring:
                scoring_path = resolve("scoring")
                if not scoring_path.exists():
                    raise ValidationError(f"scoring file not found: {scoring_path}")
                scoring_cfg = risk.ScoringConfig.from_file(scoring_path)
            else:
                scoring_cfg = risk.ScoringConfig()
            m = cls(
                imagery=resolve("imagery"),
                labels=resolve("labels"),
                legend=resolve("legend", False),
                hazard=resolve("hazard", False),
                context=resolve("context", False),
                output_dir=resolve("output_dir"),
                aoi_id=str(doc.get("aoi_id", "aoi")),
                tile_size=int(doc.get("tile_size", 512)),
                split_ratios=tuple(float(r) for r in doc.get("split_ratios", (0.7, 0.15, 0.15))),
                seed=int(doc.get("seed", 0)),
                width_scale=float(doc.get("width_scale", 1.0)),
                epsilon=float(doc.get("epsilon", vectorize.DEFAULT_EPSILON_M)),
                min_component_size=int(doc.get("min_component_size", vectorize.DEFAULT_MIN_COMPONENT)),
                pretrained_encoder=resolve("pretrained_encoder", False),
                train=dict(doc.get("train", {})),
                scoring=scoring_cfg,
            )
        except (TypeError, ValueError) as exc:
            raise ValidationError(f"invalid manifest {path}: {exc}") from None
        m.validate()
        return m

    def validate(self) -> None:
        for key in ("imagery", "labels", "legend", "hazard", "context", "pretrained_encoder"):
            p = getattr(self, key)
            if p is not None and not p.exists():
                raise ValidationError(f"{key} file not found: {p}")
        if self.tile_size < 32 or self.tile_size % 32:
            raise ValidationError("tile_size must be a positive multiple of 32")
        if len(self.split_ratios) != 3 or min(self.split_ratios) <= 0 \
                or abs(sum(self.split_ratios) - 1) > 1e-9:
            raise ValidationError("split_ratios must be three positive numbers summing to 1")
        if not 0 < self.width_scale <= 1:
            raise ValidationError("width_scale must lie in (0, 1]")
        if self.epsilon < 0:
            raise ValidationError("epsilon must be >= 0")
        try:
            self.train_config()
        except (TypeError, ValueError) as exc:
            raise ValidationError(f"invalid train config: {exc}") from None

    def train_config(self) -> tr.TrainConfig:
        return tr.TrainConfig(**{"seed": self.seed, **self.train})

    def model_config(self) -> tn.ModelConfig:
        enc = str(self.pretrained_encoder) if self.pretrained_encoder else None
        return tn.ModelConfig(width_scale=self.width_scale, pretrained_encoder_path=enc)

    def legend_obj(self) -> geodata.ClassLegend:
        return geodata.load_legend(self.legend) if self.legend else geodata.default_legend()

    def run_metadata(self) -> dict:
        return {"seed": self.seed, "width_scale": self.width_scale, "epsilon_m": self.epsilon,
                "min_component_size": self.min_component_size, "scoring": self.scoring.metadata()}


# ---------------------------------------------------------------------------
# stages
# ---------------------------------------------------------------------------


def stage_rasterize(m: PipelineManifest):
    raster = geodata.load_raster_bundle(m.imagery)
    dwellings, dropped = geodata.parse_labels(m.labels, m.legend_obj())
    mask = geodata.rasterize_labels(dwellings, raster)
    m.output_dir.mkdir(parents=True, exist_ok=True)
    geodata.save_mask(mask, m.output_dir / "labels_mask.png")
    logger.info("rasterized %d dwellings (%d excluded labels dropped)", len(dwellings), dropped)
    return raster, mask


def stage_tile(m: PipelineManifest) -> list[tiler.TileSample]:
    raster, mask = stage_rasterize(m)
    tiles = tiler.tile_raster(raster, mask, m.tile_size, m.aoi_id)
    kept, removed = tiler.filter_empty(tiles)
    try:
        kept = tiler.split_dataset(kept, m.split_ratios, m.seed)
    except ValueError as exc:
        raise ValidationError(str(exc)) from None
    tiler.save_tiles(kept, m.output_dir / "tiles")
    logger.info("wrote %d tiles (%d without dwellings skipped)", len(kept), removed)
    return kept


def stage_train(m: PipelineManifest) -> tr.TrainResult:
    tiles = tiler.load_tiles(m.output_dir / "tiles")
    params = tn.build_model(m.model_config(), m.seed)
    try:
        result = tr.train_loop(params, tiles, m.train_config(), m.output_dir / "checkpoints")
    except ValueError as exc:
        raise ValidationError(str(exc)) from None
    tn.save_weights(result.params, m.output_dir / "model.weights")
    logger.info("best epoch %d of %d", result.best_epoch, len(result.log))
    return result


def predict_raster(params: tn.ModelParams, raster: geodata.GeoRaster, tile_size: int) -> np.ndarray:
    """Logits (C, H, W) for a whole raster, predicted tile by tile."""
    dummy = np.zeros((raster.height, raster.width), dtype=np.uint8)
    tiles = tiler.tile_raster(raster, dummy, tile_size)
    logits = tn.predict_logits(params, np.stack([t.image.data for t in tiles]))
    out = np.zeros((logits.shape[1], raster.height, raster.width), dtype=logits.dtype)
    for t, lg in zip(tiles, logits):
        r, c = t.tile_index
        vw, vh = t.valid_region
        out[:, r * tile_size : r * tile_size + vh, c * tile_size : c * tile_size + vw] = lg[:, :vh, :vw]
    return out


def stage_predict(m: PipelineManifest, weights=None) -> vectorize.SegmentationMap:
    weights = Path(weights) if weights else m.output_dir / "model.weights"
    if not weights.exists():
        raise ValidationError(f"weights not found: {weights}")
    params = tn.load_weights(weights, tn.ModelConfig(width_scale=m.width_scale))
    raster = geodata.load_raster_bundle(m.imagery)
    seg = vectorize.argmax_map(predict_raster(params, raster, m.tile_size), raster.transform)
    m.output_dir.mkdir(parents=True, exist_ok=True)
    geodata.save_mask(seg.classes, m.output_dir / "classes.png")
    geodata.write_world_file(seg.transform, m.output_dir / "classes.wld")
    np.save(m.output_dir / "confidence.npy", seg.confidence)
    return seg


def load_segmentation(out_dir) -> vectorize.SegmentationMap:
    out_dir = Path(out_dir)
    for name in ("classes.png", "classes.wld", "confidence.npy"):
        if not (out_dir / name).exists():
            raise ValidationError(f"missing prediction artifact {out_dir / name}")
    classes = geodata.load_mask(out_dir / "classes.png")
    transform = geodata.read_world_file(out_dir / "classes.wld")
    confidence = np.load(out_dir / "confidence.npy")
    return vectorize.SegmentationMap(classes, confidence, transform)


def _polygon_props(p: vectorize.DwellingPolygon, legend: geodata.ClassLegend) -> dict:
    return {"class": p.class_id, "class_name": legend.name_of(p.class_id),
            "confidence": p.confidence, "pixel_area": p.pixel_area}


def stage_vectorize(m: PipelineManifest) -> list[vectorize.DwellingPolygon]:
    seg = load_segmentation(m.output_dir)
    polys = vectorize.polygonize(seg, m.epsilon, m.min_component_size)
    legend = m.legend_obj()
    geodata.write_feature_collection(
        (geodata.dwelling_feature(p.ring, _polygon_props(p, legend)) for p in polys),
        m.output_dir / "dwellings.geojson",
        {"epsilon_m": m.epsilon, "min_component_size": m.min_component_size},
    )
    return polys


def read_polygons(path) -> list[vectorize.DwellingPolygon]:
    out = []
    for f in geodata.read_feature_collection(path):
        props = f["properties"]
        ring = np.asarray(f["geometry"]["coordinates"][0], dtype=np.float64)
        out.append(vectorize.DwellingPolygon(ring, int(props["class"]),
                                             float(props["confidence"]), int(props["pixel_area"])))
    return out


def stage_score(m: PipelineManifest) -> list[risk.RiskedDwelling]:
    src = m.output_dir / "dwellings.geojson"
    if not src.exists():
        raise ValidationError(f"missing vectorized dwellings {src}")
    polys = read_polygons(src)
    grid = risk.read_ascii_grid(m.hazard) if m.hazard else None
    layers = risk.load_context_layers(m.context) if m.context else None
    legend = m.legend_obj()
    scored = risk.score_dwellings(polys, legend, grid, layers, m.scoring)
    geodata.write_geojson(scored, m.output_dir / "risk.geojson", legend, m.run_metadata())
    cells = risk.aggregate_clusters(scored, m.scoring.cell_size_m)
    risk.write_clusters(cells, m.scoring.cell_size_m, m.output_dir / "clusters.json")
    logger.info("scored %d dwellings into %d cells", len(scored), len(cells))
    return scored


def render_classes(classes: np.ndarray, legend: geodata.ClassLegend) -> np.ndarray:
    """(H, W, 3) uint8 image coloring each class with its legend color."""
    classes = np.asarray(classes)
    if classes.size and classes.max() >= len(legend):
        raise ValidationError(f"class id {int(classes.max())} is not in the legend")
    return legend.palette()[classes]


# ---------------------------------------------------------------------------
# argument handling
# ---------------------------------------------------------------------------


def _common(p: argparse.ArgumentParser, manifest_required: bool = True) -> None:
    p.add_argument("--manifest", required=manifest_required, help="pipeline manifest (JSON)")
    p.add_argument("--seed", type=int, help="override the manifest seed")
    p.add_argument("--width-scale", type=float, help="override the model width scale")
    p.add_argument("--epsilon", type=float, help="simplification tolerance in meters")
    p.add_argument("--out", help="override the output directory")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="roofrisk", description=__doc__.splitlines()[0])
    parser.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = parser.add_subparsers(dest="command", metavar="<command>")
    sub.required = True
    for name, text in (("tile", "rasterize labels and cut split tiles"),
                       ("rasterize-labels", "burn label polygons into a class mask"),
                       ("train", "train the segmentation model on the tiles"),
                       ("vectorize", "turn the predicted class map into polygons"),
                       ("score", "attach hazard features and risk scores"),
                       ("pipeline", "tile, train, predict, vectorize and score")):
        _common(sub.add_parser(name, help=text))
    p = sub.add_parser("predict", help="predict a class map for the imagery")
    _common(p)
    p.add_argument("--weights", help="weight file (default <out>/model.weights)")
    p = sub.add_parser("evaluate", help="compare predicted and reference class masks")
    p.add_argument("--pred", required=True, help="predicted class mask (PNG)")
    p.add_argument("--truth", required=True, help="reference class mask (PNG)")
    p.add_argument("--legend", help="legend JSON for class names")
    p.add_argument("--out", help="write the JSON report here instead of stdout")
    p = sub.add_parser("render", help="color a class mask with the legend colors")
    p.add_argument("--classes", required=True, help="class mask (PNG)")
    p.add_argument("--legend", help="legend JSON (default legend if omitted)")
    p.add_argument("--out", required=True, help="output PNG")
    p = sub.add_parser("make-synthetic", help="write the synthetic demo AOI")
    p.add_argument("--out", required=True, help="destination directory")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--size", type=int, default=384, help="AOI side in pixels")
    return parser


def _manifest(args) -> PipelineManifest:
    overrides = {"seed": args.seed, "width_scale": args.width_scale, "epsilon": args.epsilon}
    if args.out:
        overrides["output_dir"] = str(Path(args.out).resolve())
    return PipelineManifest.load(args.manifest, overrides)


def _evaluate(args) -> None:
    pred, truth = geodata.load_mask(args.pred), geodata.load_mask(args.truth)
    if pred.shape != truth.shape:
        raise ValidationError(f"mask shapes differ: {pred.shape} vs {truth.shape}")
    legend = geodata.load_legend(args.legend) if args.legend else geodata.default_legend()
    try:
        cm = metrics.confusion(pred, truth, num_classes=len(legend))
    except ValueError as exc:
        raise ValidationError(str(exc)) from None
    rep = metrics.report(cm, metrics.binary_metrics(pred, truth), [e.name for e in legend.entries])
    text = metrics.format_report(rep)
    if args.out:
        Path(args.out).write_text(text)
    else:
        sys.stdout.write(text)


def _render(args) -> None:
    legend = geodata.load_legend(args.legend) if args.legend else geodata.default_legend()
    rgb = render_classes(geodata.load_mask(args.classes), legend)
    Image.fromarray(rgb).save(args.out, format="PNG")


def _dispatch(args) -> None:
    cmd = args.command
    if cmd == "evaluate":
        return _evaluate(args)
    if cmd == "render":
        return _render(args)
    if cmd == "make-synthetic":
        path = synthetic.write_synthetic_aoi(args.out, seed=args.seed, size=args.size)
        print(path)
        return None
    m = _manifest(args)
    if cmd == "rasterize-labels":
        stage_rasterize(m)
    elif cmd == "tile":
        stage_tile(m)
    elif cmd == "train":
        stage_train(m)
    elif cmd == "predict":
        stage_predict(m, args.weights)
    elif cmd == "vectorize":
        stage_vectorize(m)
    elif cmd == "score":
        stage_score(m)
    elif cmd == "pipeline":
        stage_tile(m)
        stage_train(m)
        stage_predict(m)
        stage_vectorize(m)
        stage_score(m)
    return None


def thread_limit() -> int | None:
    raw = os.environ.get(THREADS_ENV)
    if not raw:
        return None
    try:
        n = int(raw)
    except ValueError:
        raise ValidationError(f"{THREADS_ENV} must be a positive integer, got {raw!r}") from None
    if n < 1:
        raise ValidationError(f"{THREADS_ENV} must be a positive integer, got {raw!r}")
    return n


def run_command(argv=None) -> int:
    """Runs one subcommand; returns the process exit status."""
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:  # argparse already printed usage
        return int(exc.code or 0)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(asctime)s %(name)s %(message)s")
    try:
        with threadpool_limits(limits=thread_limit()):
            _dispatch(args)
    except ValidationError as exc:
        print(f"roofrisk {args.command}: error: {exc}", file=sys.stderr)
        return 1
    except (OSError, ValueError, KeyError, FloatingPointError) as exc:
        print(f"roofrisk {args.command}: error: {exc}", file=sys.stderr)
        return 1
    return 0


def main() -> None:
    sys.exit(run_command())
