"""Adam training over tiled datasets with validation-IoU model selection."""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from . import metrics
from . import tensor as T
from . import ternausnet as tn
from .geodata import GeoRaster
from .tiler import TileSample

logger = logging.getLogger(__name__)

AUGMENTATIONS = ("HFLIP", "ROT90", "RANDCROP")
LOG_HEADER = "epoch\ttrain_loss\tval_weighted_acc\tval_weighted_iou"


@dataclass
class TrainConfig:
    learning_rate: float = 1e-4
    beta1: float = 0.9
    beta2: float = 0.999
    epsilon: float = 1e-8
    batch_size: int = 4
    max_epochs: int = 50
    early_stop_patience: int = 10
    augment: frozenset = frozenset()
    seed: int = 0

    def __post_init__(self):
        if not self.learning_rate > 0:
            raise ValueError("learning_rate must be positive")
        if not (0 <= self.beta1 < 1 and 0 <= self.beta2 < 1):
            raise ValueError("betas must lie in [0, 1)")
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")
        self.augment = frozenset(a.upper() for a in self.augment)
        unknown = self.augment - set(AUGMENTATIONS)
        if unknown:
            raise ValueError(f"unknown augmentation(s): {sorted(unknown)}")


@dataclass
class OptimizerState:
    m: dict[str, np.ndarray]
    v: dict[str, np.ndarray]
    t: int = 0

    @classmethod
    def zeros_like(cls, tensors: dict[str, np.ndarray]) -> "OptimizerState":
        return cls({k: np.zeros_like(a) for k, a in tensors.items()},
                   {k: np.zeros_like(a) for k, a in tensors.items()})


def adam_step(params: dict[str, np.ndarray], grads: dict[str, np.ndarray],
              state: OptimizerState, config: TrainConfig):
    """One bias-corrected Adam update, applied in place; returns ``(params, state)``."""
    for name, g in grads.items():
        if not np.all(np.isfinite(g)):
            raise FloatingPointError(f"non-finite gradient in tensor {name}")
    state.t += 1
    b1, b2 = config.beta1, config.beta2
    c1 = 1.0 - b1 ** state.t
    c2 = 1.0 - b2 ** state.t
    for name, g in grads.items():
        m, v, p = state.m[name], state.v[name], params[name]
        m *= b1
        m += (1 - b1) * g
        v *= b2
        v += (1 - b2) * (g * g)
        p -= (config.learning_rate * (m / c1) / (np.sqrt(v / c2) + config.epsilon)).astype(p.dtype)
    return params, state


# ---------------------------------------------------------------------------
# augmentation
# ---------------------------------------------------------------------------


def _bilinear(img, out_h, out_w):
    """Half-pixel-center bilinear resize of a (C, H, W) array."""
    c, h, w = img.shape
    ys = np.clip((np.arange(out_h) + 0.5) * h / out_h - 0.5, 0, h - 1)
    xs = np.clip((np.arange(out_w) + 0.5) * w / out_w - 0.5, 0, w - 1)
    y0 = np.floor(ys).astype(int)
    x0 = np.floor(xs).astype(int)
    y1, x1 = np.minimum(y0 + 1, h - 1), np.minimum(x0 + 1, w - 1)
    fy, fx = (ys - y0)[:, None], (xs - x0)[None, :]
    f = img.astype(np.float64)
    top = f[:, y0][:, :, x0] * (1 - fx) + f[:, y0][:, :, x1] * fx
    bot = f[:, y1][:, :, x0] * (1 - fx) + f[:, y1][:, :, x1] * fx
    out = top * (1 - fy) + bot * fy
    return np.clip(np.rint(out), 0, 255).astype(img.dtype)


def _rebuild(sample: TileSample, image_block, mask_block) -> TileSample:
    img = np.zeros_like(sample.image.data)
    msk = np.zeros_like(sample.mask)
    bh, bw = mask_block.shape
    img[:, :bh, :bw] = image_block
    msk[:bh, :bw] = mask_block
    return replace(sample, image=GeoRaster(img, sample.image.transform), mask=msk,
                   valid_region=(bw, bh))


def augment_sample(sample: TileSample, mode: str, rng: np.random.Generator | None = None) -> TileSample:
    """Transforms image and mask together within the tile's valid region.

    HFLIP mirrors columns, ROT90 rotates counter-clockwise, RANDCROP takes a
    random half-size crop and scales it back up (nearest for the mask,
    bilinear for the image).
    """
    vw, vh = sample.valid_region
    img = sample.image.data[:, :vh, :vw]
    msk = sample.mask[:vh, :vw]
    mode = mode.upper()
    if mode == "HFLIP":
        return _rebuild(sample, img[:, :, ::-1], msk[:, ::-1])
    if mode == "ROT90":
        return _rebuild(sample, np.rot90(img, 1, axes=(1, 2)), np.rot90(msk, 1))
    if mode == "RANDCROP":
        rng = rng or np.random.default_rng()
        half = sample.mask.shape[0] // 2
        ch, cw = min(half, vh), min(half, vw)
        r0 = int(rng.integers(0, vh - ch + 1))
        c0 = int(rng.integers(0, vw - cw + 1))
        crop_img = img[:, r0 : r0 + ch, c0 : c0 + cw]
        crop_msk = msk[r0 : r0 + ch, c0 : c0 + cw]
        out_h, out_w = 2 * ch, 2 * cw
        big_msk = crop_msk[np.arange(out_h) // 2][:, np.arange(out_w) // 2]
        return _rebuild(sample, _bilinear(crop_img, out_h, out_w), big_msk)
    raise ValueError(f"unknown augmentation {mode!r}")


# ---------------------------------------------------------------------------
# training loop
# ---------------------------------------------------------------------------


def stack_batch(samples: list[TileSample]):
    """(images float32 NCHW, targets NHW, valid NHW) for a list of tiles."""
    images = tn.normalize_images(np.stack([s.image.data for s in samples]))
    targets = np.stack([s.mask for s in samples]).astype(np.int64)
    valid = np.stack([s.valid_mask for s in samples])
    return images, targets, valid


def evaluate_tiles(params: tn.ModelParams, tiles: list[TileSample], batch_size: int = 4):
    """Confusion matrix of argmax predictions over the tiles' valid regions."""
    cm = metrics.ConfusionMatrix.empty(params.config.num_classes)
    for start in range(0, len(tiles), batch_size):
        chunk = tiles[start : start + batch_size]
        images, targets, valid = stack_batch(chunk)
        pred = tn.forward(params, images).argmax(axis=1)
        cm = cm + metrics.confusion(pred, targets, valid, params.config.num_classes)
    return cm


@dataclass
class TrainResult:
    params: tn.ModelParams  # best by validation weighted IoU
    log: list[dict] = field(default_factory=list)
    best_epoch: int = 0
    last_params: tn.ModelParams | None = None
    state: OptimizerState | None = None


def format_log(log: list[dict]) -> str:
    lines = [LOG_HEADER]
    for e in log:
        lines.append(f"{e['epoch']}\t{e['train_loss']!r}\t{e['val_weighted_acc']!r}\t"
                     f"{e['val_weighted_iou']!r}")
    return "\n".join(lines) + "\n"


def save_checkpoint(directory, params: tn.ModelParams, state: OptimizerState,
                    log: list[dict] | None = None, name: str = "last") -> None:
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    tn.save_weights(params, directory / f"{name}.weights")
    opt = {f"m.{k}": a for k, a in state.m.items()}
    opt.update({f"v.{k}": a for k, a in state.v.items()})
    opt["t"] = np.array([state.t], dtype=np.float32)
    tn.write_weight_file(opt, directory / f"{name}.optim")
    if log is not None:
        (directory / "train_log.tsv").write_text(format_log(log))


def load_checkpoint(directory, config: tn.ModelConfig, name: str = "last"):
    directory = Path(directory)
    params = tn.load_weights(directory / f"{name}.weights", config)
    raw = tn.read_weight_file(directory / f"{name}.optim")
    state = OptimizerState(
        {k: raw[f"m.{k}"] for k in params.tensors},
        {k: raw[f"v.{k}"] for k in params.tensors},
        int(raw["t"][0]),
    )
    return params, state


def train_step(params: tn.ModelParams, state: OptimizerState, samples: list[TileSample],
               config: TrainConfig) -> float:
    images, targets, valid = stack_batch(samples)
    logits, cache = tn.forward_train(params, images)
    loss, dlogits = T.softmax_cross_entropy(logits, targets, valid)
    grads = tn.backward(dlogits, cache)
    adam_step(params.tensors, grads, state, config)
    return loss


def train_loop(params: tn.ModelParams, tiles: list[TileSample], config: TrainConfig,
               checkpoint_dir=None) -> TrainResult:
    """Trains on TRAIN tiles, selecting the epoch with the best VAL weighted IoU.

    Each epoch visits TRAIN tiles in a seeded random order. Every configured
    augmentation is applied to each sample with probability 1/2, in the
    order HFLIP, ROT90, RANDCROP. Training stops at ``max_epochs`` or after
    ``early_stop_patience`` epochs without a new best validation IoU.
    """
    train = [t for t in tiles if t.split == "TRAIN"]
    val = [t for t in tiles if t.split == "VAL"]
    if config.max_epochs == 0:
        return TrainResult(params.copy(), [], 0, params.copy(),
                           OptimizerState.zeros_like(params.tensors))
    if not train or not val:
        raise ValueError(f"need TRAIN and VAL tiles, got {len(train)} and {len(val)}")

    if checkpoint_dir is not None:
        Path(checkpoint_dir).mkdir(parents=True, exist_ok=True)
    rng = np.random.default_rng(config.seed)
    params = params.copy()
    state = OptimizerState.zeros_like(params.tensors)
    best, best_iou, best_epoch, stale = params.copy(), -math.inf, 0, 0
    log = []
    modes = [m for m in AUGMENTATIONS if m in config.augment]
    for epoch in range(1, config.max_epochs + 1):
        order = rng.permutation(len(train))
        losses = []
        for start in range(0, len(order), config.batch_size):
            batch = [train[i] for i in order[start : start + config.batch_size]]
            if modes:
                batch = [_augment_random(s, modes, rng) for s in batch]
            losses.append(train_step(params, state, batch, config))
        cm = evaluate_tiles(params, val, config.batch_size)
        entry = {
            "epoch": epoch,
            "train_loss": float(np.mean(losses)),
            "val_weighted_acc": metrics.weighted_accuracy(cm),
            "val_weighted_iou": metrics.weighted_iou(cm),
        }
        log.append(entry)
        logger.info("epoch %d loss %.5f val acc %.4f val iou %.4f", epoch,
                    entry["train_loss"], entry["val_weighted_acc"], entry["val_weighted_iou"])
        if entry["val_weighted_iou"] > best_iou:
            best, best_iou, best_epoch, stale = params.copy(), entry["val_weighted_iou"], epoch, 0
            if checkpoint_dir is not None:
                tn.save_weights(best, Path(checkpoint_dir) / "best.weights")
        else:
            stale += 1
        if checkpoint_dir is not None:
            save_checkpoint(checkpoint_dir, params, state, log)
        if stale >= config.early_stop_patience:
            break
    return TrainResult(best, log, best_epoch, params, state)


def _augment_random(sample, modes, rng):
    for mode in modes:
        if rng.random() < 0.5:
            sample = augment_sample(sample, mode, rng)
    return sample
