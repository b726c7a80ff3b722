"""VGG-encoder U-Net (TernausNet layout) with manual forward/backward.

Layer plan at ``width_scale=1`` for the VGG11 encoder, spatial extent relative
to an H x W input on the right::

    enc.0   conv3x3   3 ->  64   H      (skip s1)
            maxpool
    enc.1   conv3x3  64 -> 128   H/2    (skip s2)
            maxpool
    enc.2   conv3x3 128 -> 256   H/4
    enc.3   conv3x3 256 -> 256   H/4    (skip s3)
            maxpool
    enc.4   conv3x3 256 -> 512   H/8
    enc.5   conv3x3 512 -> 512   H/8    (skip s4)
            maxpool
    enc.6   conv3x3 512 -> 512   H/16
    enc.7   conv3x3 512 -> 512   H/16   (skip s5)
            maxpool                     H/32
    center  conv3x3 512 -> 512, up 512 -> 256          H/16
    dec5    cat(s5) conv3x3 768 -> 512, up 512 -> 256  H/8
    dec4    cat(s4) conv3x3 768 -> 512, up 512 -> 128  H/4
    dec3    cat(s3) conv3x3 384 -> 256, up 256 -> 64   H/2
    dec2    cat(s2) conv3x3 192 -> 128, up 128 -> 32   H
    dec1    cat(s1) conv3x3  96 -> 32                  H
    final   conv1x1  32 -> num_classes (no activation)

"up" is a 4x4 transposed convolution with stride 2 and padding 1 followed by
ReLU, which exactly doubles the spatial extent. Every channel count is scaled
by ``width_scale`` (rounded, at least 1). The VGG16 encoder uses the same
decoder with the deeper VGG16 conv stack.

Parameters are stored in a plain dict in the order produced by
:func:`param_shapes`; each layer contributes ``<name>.weight`` then
``<name>.bias``.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, field, replace
from fractions import Fraction
from pathlib import Path

import numpy as np

from . import tensor as T

VGG_PLANS = {
    "VGG11": [64, "M", 128, "M", 256, 256, "M", 512, 512, "M", 512, 512, "M"],
    "VGG16": [64, 64, "M", 128, 128, "M", 256, 256, 256, "M",
              512, 512, 512, "M", 512, 512, 512, "M"],
}
# (block name, conv width, up-sampled width); None = no up-sampling
DECODER_PLAN = [
    ("center", 512, 256),
    ("dec5", 512, 256),
    ("dec4", 512, 128),
    ("dec3", 256, 64),
    ("dec2", 128, 32),
    ("dec1", 32, None),
]
UP_SPEC = dict(kernel=(4, 4), stride=(2, 2), padding=(1, 1))

WEIGHT_MAGIC = b"RRWT"
WEIGHT_VERSION = 1


@dataclass(frozen=True)
class ModelConfig:
    encoder: str = "VGG11"
    width_scale: Fraction | float = 1
    num_classes: int = 8
    pretrained_encoder_path: str | None = None
    in_channels: int = 3

    def __post_init__(self):
        if self.encoder not in VGG_PLANS:
            raise ValueError(f"unknown encoder {self.encoder!r}")
        if not 0 < self.width_scale <= 1:
            raise ValueError("width_scale must lie in (0, 1]")
        if self.num_classes < 2:
            raise ValueError("num_classes must be >= 2")

    def width(self, channels: int) -> int:
        return max(1, int(round(channels * float(self.width_scale))))


@dataclass
class ModelParams:
    config: ModelConfig
    tensors: dict[str, np.ndarray] = field(default_factory=dict)

    def __getitem__(self, name):
        return self.tensors[name]

    def astype(self, dtype) -> "ModelParams":
        return ModelParams(self.config, {k: v.astype(dtype) for k, v in self.tensors.items()})

    def copy(self) -> "ModelParams":
        return ModelParams(self.config, {k: v.copy() for k, v in self.tensors.items()})


def encoder_stages(config: ModelConfig) -> list[list[int]]:
    """Scaled conv widths per pooling stage."""
    stages, cur = [], []
    for item in VGG_PLANS[config.encoder]:
        if item == "M":
            stages.append(cur)
            cur = []
        else:
            cur.append(config.width(item))
    return stages


def param_shapes(config: ModelConfig) -> dict[str, tuple[int, ...]]:
    """Every parameter name and shape, in the fixed storage order."""
    shapes: dict[str, tuple[int, ...]] = {}
    c_in, idx = config.in_channels, 0
    skips = []
    for stage in encoder_stages(config):
        for c_out in stage:
            shapes[f"enc.{idx}.weight"] = (c_out, c_in, 3, 3)
            shapes[f"enc.{idx}.bias"] = (c_out,)
            c_in, idx = c_out, idx + 1
        skips.append(c_in)

    prev = c_in
    for (name, mid, up), skip in zip(DECODER_PLAN, [None] + skips[::-1]):
        mid = config.width(mid)
        cin = prev if skip is None else prev + skip
        shapes[f"{name}.conv.weight"] = (mid, cin, 3, 3)
        shapes[f"{name}.conv.bias"] = (mid,)
        prev = mid
        if up is not None:
            up = config.width(up)
            shapes[f"{name}.up.weight"] = (mid, up, 4, 4)
            shapes[f"{name}.up.bias"] = (up,)
            prev = up
    shapes["final.weight"] = (config.num_classes, prev, 1, 1)
    shapes["final.bias"] = (config.num_classes,)
    return shapes


def is_encoder_param(name: str) -> bool:
    return name.startswith("enc.")


def _fan_in(name: str, shape) -> int:
    if ".up." in name:
        # each output of a stride-2 4x4 transposed conv sees 2x2 taps per input channel
        return shape[0] * (shape[2] // 2) * (shape[3] // 2)
    return shape[1] * shape[2] * shape[3]


def build_model(config: ModelConfig, seed: int = 0) -> ModelParams:
    """He-normal weights, zero biases, drawn in storage order from ``seed``.

    When ``config.pretrained_encoder_path`` is set the encoder tensors are
    replaced by the ones stored in that file.
    """
    rng = np.random.default_rng(seed)
    tensors = {}
    for name, shape in param_shapes(config).items():
        if name.endswith(".bias"):
            tensors[name] = np.zeros(shape, dtype=np.float32)
        else:
            std = np.sqrt(2.0 / _fan_in(name, shape))
            tensors[name] = (rng.standard_normal(shape) * std).astype(np.float32)
    if config.pretrained_encoder_path:
        stored = read_weight_file(config.pretrained_encoder_path)
        for name, shape in param_shapes(config).items():
            if not is_encoder_param(name):
                continue
            if name not in stored:
                raise ValueError(f"pretrained file lacks tensor {name}")
            if stored[name].shape != shape:
                raise ValueError(
                    f"shape mismatch for {name}: file {stored[name].shape}, model {shape}"
                )
            tensors[name] = stored[name].astype(np.float32)
    return ModelParams(config, tensors)


# ---------------------------------------------------------------------------
# forward / backward
# ---------------------------------------------------------------------------


def _spec(w, transposed=False):
    if transposed:
        return T.ConvSpec(w.shape[0], w.shape[1], **UP_SPEC)
    kh = w.shape[2]
    return T.ConvSpec(w.shape[1], w.shape[0], (kh, kh), (1, 1), (kh // 2, kh // 2))


def _conv_relu(p, name, x):
    w = p[f"{name}.weight"]
    y, conv_cache = T.conv2d_forward(x, w, p[f"{name}.bias"], _spec(w))
    y, mask = T.relu_forward(y)
    return y, (conv_cache, mask)


def _conv_relu_back(dy, cache, name, grads):
    conv_cache, mask = cache
    dx, grads[f"{name}.weight"], grads[f"{name}.bias"] = T.conv2d_backward(
        T.relu_backward(dy, mask), conv_cache
    )
    return dx


def _up_relu(p, name, x):
    w = p[f"{name}.weight"]
    y, conv_cache = T.transposed_conv2d_forward(x, w, p[f"{name}.bias"], _spec(w, True))
    y, mask = T.relu_forward(y)
    return y, (conv_cache, mask)


def _up_relu_back(dy, cache, name, grads):
    conv_cache, mask = cache
    dx, grads[f"{name}.weight"], grads[f"{name}.bias"] = T.transposed_conv2d_backward(
        T.relu_backward(dy, mask), conv_cache
    )
    return dx


def encoder_forward(params: ModelParams, x):
    """Runs the conv stack; returns ``(skips, bottom, cache)``.

    ``skips`` are the last activations of each stage before pooling and
    ``bottom`` is the final pooled map.
    """
    p, caches, skips, idx = params.tensors, [], [], 0
    for stage in encoder_stages(params.config):
        stage_caches = []
        for _ in stage:
            x, c = _conv_relu(p, f"enc.{idx}", x)
            stage_caches.append((idx, c))
            idx += 1
        skips.append(x)
        x, pool_cache = T.maxpool2d_forward(x)
        caches.append((stage_caches, pool_cache))
    return skips, x, caches


def encoder_backward(dskips, dbottom, caches, grads):
    """Backward of :func:`encoder_forward`; ``dskips`` entries may be None."""
    d = dbottom
    for (stage_caches, pool_cache), dskip in zip(caches[::-1], dskips[::-1]):
        d = T.maxpool2d_backward(d, pool_cache)
        if dskip is not None:
            d = d + dskip
        for idx, c in stage_caches[::-1]:
            d = _conv_relu_back(d, c, f"enc.{idx}", grads)
    return d


def _check_input(params: ModelParams, batch):
    if batch.ndim != 4 or batch.shape[1] != params.config.in_channels:
        raise ValueError(
            f"expected batch of shape (N, {params.config.in_channels}, H, W), got {batch.shape}"
        )
    h, w = batch.shape[2:]
    if h % 32 or w % 32:
        raise ValueError(f"spatial extent {h}x{w} is not divisible by 32")


def forward_train(params: ModelParams, batch):
    """Forward pass keeping everything needed by :func:`backward`."""
    _check_input(params, batch)
    p = params.tensors
    skips, x, enc_cache = encoder_forward(params, batch)
    dec_cache = []
    for (name, _, up), skip in zip(DECODER_PLAN, [None] + skips[::-1]):
        split = None
        if skip is not None:
            split = x.shape[1]
            x = T.concat_channels(x, skip)
        x, conv_c = _conv_relu(p, f"{name}.conv", x)
        up_c = None
        if up is not None:
            x, up_c = _up_relu(p, f"{name}.up", x)
        dec_cache.append((name, split, conv_c, up_c))
    w = p["final.weight"]
    logits, final_c = T.conv2d_forward(x, w, p["final.bias"], _spec(w))
    return logits, (enc_cache, dec_cache, final_c)


def forward(params: ModelParams, batch):
    """Logits of shape (N, num_classes, H, W) for a (N, 3, H, W) batch."""
    return forward_train(params, batch)[0]


def backward(dlogits, cache) -> dict[str, np.ndarray]:
    """Gradients of every parameter given the gradient w.r.t. the logits."""
    enc_cache, dec_cache, final_c = cache
    grads: dict[str, np.ndarray] = {}
    d, grads["final.weight"], grads["final.bias"] = T.conv2d_backward(dlogits, final_c)
    dskips = []
    for name, split, conv_c, up_c in dec_cache[::-1]:
        if up_c is not None:
            d = _up_relu_back(d, up_c, f"{name}.up", grads)
        d = _conv_relu_back(d, conv_c, f"{name}.conv", grads)
        if split is not None:
            d, dskip = T.split_channels(d, split)
            dskips.append(dskip)
    # dskips were collected from s1 upward
    encoder_backward(dskips, d, enc_cache, grads)
    return grads


def normalize_images(images):
    """uint8 (N, 3, H, W) -> float32 in [-1, 1]."""
    return (np.asarray(images, dtype=np.float32) / np.float32(127.5)) - np.float32(1.0)


def predict_logits(params: ModelParams, images, batch_size: int = 4):
    """Inference over a uint8 image stack, in fixed-size chunks."""
    out = []
    for start in range(0, len(images), batch_size):
        out.append(forward(params, normalize_images(images[start : start + batch_size])))
    return np.concatenate(out, axis=0)


# ---------------------------------------------------------------------------
# weight files
# ---------------------------------------------------------------------------


def write_weight_file(tensors: dict[str, np.ndarray], path) -> None:
    """Binary layout, all integers little-endian uint32::

        magic "RRWT" | version | count |
        per tensor: name length | utf-8 name | rank | extents... | float32 payload
    """
    parts = [WEIGHT_MAGIC, struct.pack("<II", WEIGHT_VERSION, len(tensors))]
    for name, arr in tensors.items():
        raw = name.encode("utf-8")
        parts.append(struct.pack("<I", len(raw)) + raw)
        parts.append(struct.pack(f"<I{arr.ndim}I", arr.ndim, *arr.shape))
        parts.append(np.ascontiguousarray(arr, dtype="<f4").tobytes())
    Path(path).write_bytes(b"".join(parts))


def read_weight_file(path) -> dict[str, np.ndarray]:
    buf = Path(path).read_bytes()
    pos = 0

    def take(n):
        nonlocal pos
        if pos + n > len(buf):
            raise ValueError("unexpected end of file")
        chunk = buf[pos : pos + n]
        pos += n
        return chunk

    if take(4) != WEIGHT_MAGIC:
        raise ValueError("bad magic: not a weight file")
    version, count = struct.unpack("<II", take(8))
    if version != WEIGHT_VERSION:
        raise ValueError(f"unsupported weight file version {version}")
    tensors = {}
    for _ in range(count):
        (nlen,) = struct.unpack("<I", take(4))
        name = take(nlen).decode("utf-8")
        (rank,) = struct.unpack("<I", take(4))
        shape = struct.unpack(f"<{rank}I", take(4 * rank))
        size = int(np.prod(shape, dtype=np.int64))
        tensors[name] = np.frombuffer(take(4 * size), dtype="<f4").reshape(shape).astype(np.float32)
    if pos != len(buf):
        raise ValueError("trailing bytes after last tensor")
    return tensors


def save_weights(params: ModelParams, path) -> None:
    write_weight_file(params.tensors, path)


def load_weights(path, config: ModelConfig) -> ModelParams:
    stored = read_weight_file(path)
    tensors = {}
    for name, shape in param_shapes(config).items():
        if name not in stored:
            raise ValueError(f"weight file lacks tensor {name}")
        if stored[name].shape != shape:
            raise ValueError(
                f"shape mismatch for {name}: file {stored[name].shape}, config expects {shape}"
            )
        tensors[name] = stored[name]
    extra = set(stored) - set(tensors)
    if extra:
        raise ValueError(f"weight file has unexpected tensors: {sorted(extra)[:3]}")
    return ModelParams(config, tensors)


# ---------------------------------------------------------------------------
# encoder pretraining
# ---------------------------------------------------------------------------


def _head_forward(tensors, feat):
    pooled = feat.mean(axis=(2, 3))
    logits = pooled @ tensors["head.weight"].T + tensors["head.bias"]
    return logits[:, :, None, None], pooled


def pretrain_encoder(config: ModelConfig, patches, labels, epochs: int, path,
                     train_config=None, seed: int = 0) -> dict[str, np.ndarray]:
    """Trains the encoder on patch classification and saves the encoder tensors.

    A temporary head (global average pool over the last encoder stage, then a
    linear layer) is trained jointly with the encoder and then discarded.

    Args:
        config: model configuration whose encoder is trained.
        patches: uint8 array (N, 3, P, P) with P divisible by 16.
        labels: integer class per patch.
        epochs: passes over the patches; 0 saves the initialization.
        path: destination weight file.
        train_config: optimizer settings (a ``train.TrainConfig``).
        seed: initialization and shuffling seed.
    """
    from .train import OptimizerState, TrainConfig, adam_step

    patches = np.asarray(patches)
    labels = np.asarray(labels, dtype=np.int64)
    if len(patches) == 0:
        raise ValueError("empty pretraining dataset")
    n_cls = int(labels.max()) + 1
    if n_cls < 2:
        raise ValueError("pretraining needs at least 2 classes")
    train_config = train_config or TrainConfig(seed=seed)

    full = build_model(replace(config, pretrained_encoder_path=None), seed)
    tensors = {k: v for k, v in full.tensors.items() if is_encoder_param(k)}
    enc = ModelParams(full.config, tensors)
    width = encoder_stages(config)[-1][-1]
    rng = np.random.default_rng(seed)
    head = {
        "head.weight": (rng.standard_normal((n_cls, width)) * np.sqrt(1.0 / width)).astype(np.float32),
        "head.bias": np.zeros(n_cls, dtype=np.float32),
    }
    all_tensors = {**tensors, **head}
    state = OptimizerState.zeros_like(all_tensors)
    for _ in range(epochs):
        order = rng.permutation(len(patches))
        for start in range(0, len(order), train_config.batch_size):
            idx = order[start : start + train_config.batch_size]
            x = normalize_images(patches[idx])
            skips, bottom, caches = encoder_forward(enc, x)
            logits, pooled = _head_forward(all_tensors, skips[-1])
            _, dlogits = T.softmax_cross_entropy(logits, labels[idx][:, None, None])
            dl = dlogits[:, :, 0, 0]
            grads = {"head.weight": dl.T @ pooled, "head.bias": dl.sum(axis=0)}
            feat = skips[-1]
            dfeat = np.broadcast_to(
                (dl @ all_tensors["head.weight"])[:, :, None, None] / (feat.shape[2] * feat.shape[3]),
                feat.shape,
            )
            dskips = [None] * (len(skips) - 1) + [np.ascontiguousarray(dfeat)]
            encoder_backward(dskips, np.zeros_like(bottom), caches, grads)
            adam_step(all_tensors, grads, state, train_config)
    write_weight_file(tensors, path)
    return tensors

