"""Minimal convolutional predictor with four heads, trained from scratch.

The trunk is a short stack of 3x3 convolutions with ReLU; enough of the
leading blocks use stride 2 to downsample from canvas to label resolution,
and the remaining blocks use growing dilation to keep the receptive field
wide. Four projection-head stacks (1x1 convolutions) share the trunk
output: two semantic heads with K+1 channels and two embedding heads with C
channels.

Everything runs in numpy: forward, reverse-mode backprop through im2col
convolutions, and adaptive-moment updates. Parameters and activations are
float32; loss reductions happen in float64 inside the loss module. Given
fixed seeds the whole training loop is deterministic.
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass, field, asdict
from pathlib import Path

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .losses import InstanceRegions, LossConfig, loss_with_gradient
from .scenegen import DatasetSample, SceneConfig, generate_dataset

CHECKPOINT_VERSION = 1
HEAD_NAMES = ("fg_semantic", "occ_semantic", "fg_embed", "occ_embed")


class TrainingDivergedError(RuntimeError):
    pass


@dataclass(frozen=True)
class NetConfig:
    num_classes: int = 3
    embed_dim: int = 6
    canvas_size: int = 256
    label_size: int = 64
    trunk_widths: tuple[int, ...] = (16, 32, 64, 128)
    head_widths: tuple[int, ...] = (256, 256, 128)
    width_factor: float = 0.125
    kernel_size: int = 3

    def __post_init__(self):
        ratio = self.canvas_size // self.label_size
        if self.canvas_size % self.label_size != 0 or ratio & (ratio - 1):
            raise ValueError("canvas/label ratio must be a power of two")
        if 2 ** self._num_strided() != ratio:
            raise ValueError(
                f"trunk needs {int(np.log2(ratio))} stride-2 blocks but only "
                f"{len(self.trunk_widths)} blocks are configured"
            )

    def _num_strided(self) -> int:
        ratio = self.canvas_size // self.label_size
        n = int(round(np.log2(ratio)))
        if n > len(self.trunk_widths):
            raise ValueError("not enough trunk blocks for the downsample ratio")
        return n

    def trunk_plan(self) -> list[tuple[int, int, int]]:
        """(width, stride, dilation) per trunk block; stride-2 blocks come
        first, later stride-1 blocks dilate 2, 4, ... to widen the context."""
        n_strided = self._num_strided()
        plan = []
        dilation = 1
        for b, width in enumerate(self.trunk_widths):
            if b < n_strided:
                plan.append((width, 2, 1))
            else:
                dilation *= 2
                plan.append((width, 1, dilation))
        return plan

    def scaled_head_widths(self) -> list[int]:
        return [max(1, int(round(w * self.width_factor))) for w in self.head_widths]

    def head_out_channels(self, name: str) -> int:
        return self.num_classes + 1 if name.endswith("semantic") else self.embed_dim


@dataclass
class ConvLayer:
    weight: np.ndarray  # (kh, kw, cin, cout) float32
    bias: np.ndarray    # (cout,) float32
    stride: int = 1
    dilation: int = 1


@dataclass
class PredictorParams:
    config: NetConfig
    trunk: list[ConvLayer]
    heads: dict[str, list[ConvLayer]]

    def named_layers(self):
        for i, layer in enumerate(self.trunk):
            yield f"trunk.{i}", layer
        for name in HEAD_NAMES:
            for i, layer in enumerate(self.heads[name]):
                yield f"{name}.{i}", layer


def init_params(config: NetConfig, seed: int = 0, dtype=np.float32) -> PredictorParams:
    rng = np.random.Generator(np.random.PCG64(np.random.SeedSequence(seed)))

    def make(kh, kw, cin, cout, stride=1, dilation=1):
        bound = np.sqrt(6.0 / (kh * kw * cin))
        w = rng.uniform(-bound, bound, size=(kh, kw, cin, cout)).astype(dtype)
        return ConvLayer(weight=w, bias=np.zeros(cout, dtype=dtype),
                         stride=stride, dilation=dilation)

    k = config.kernel_size
    trunk = []
    cin = 1
    for width, stride, dilation in config.trunk_plan():
        trunk.append(make(k, k, cin, width, stride, dilation))
        cin = width
    heads = {}
    for name in HEAD_NAMES:
        layers = []
        hin = cin
        for width in config.scaled_head_widths():
            layers.append(make(1, 1, hin, width))
            hin = width
        layers.append(make(1, 1, hin, config.head_out_channels(name)))
        heads[name] = layers
    return PredictorParams(config=config, trunk=trunk, heads=heads)


# ---------------------------------------------------------------------------
# conv2d with SAME padding via im2col


def _same_padding(size: int, stride: int, eff_k: int) -> tuple[int, int]:
    out = -(-size // stride)
    total = max((out - 1) * stride + eff_k - size, 0)
    return total // 2, total - total // 2


def conv2d_forward(x: np.ndarray, layer: ConvLayer):
    """x: (B, H, W, Cin) -> (B, Ho, Wo, Cout); returns (y, cache)."""
    kh, kw, cin, cout = layer.weight.shape
    s, d = layer.stride, layer.dilation
    ekh, ekw = (kh - 1) * d + 1, (kw - 1) * d + 1
    pt, pb = _same_padding(x.shape[1], s, ekh)
    pl, pr = _same_padding(x.shape[2], s, ekw)
    xp = np.pad(x, ((0, 0), (pt, pb), (pl, pr), (0, 0)))
    win = sliding_window_view(xp, (ekh, ekw), axis=(1, 2))
    cols = np.ascontiguousarray(win[:, ::s, ::s, :, ::d, ::d])
    b, ho, wo = cols.shape[:3]
    flat = cols.reshape(b * ho * wo, cin * kh * kw)
    wmat = layer.weight.transpose(2, 0, 1, 3).reshape(cin * kh * kw, cout)
    y = flat @ wmat + layer.bias
    cache = (flat, x.shape, (pt, pb, pl, pr), layer)
    return y.reshape(b, ho, wo, cout), cache


def conv2d_backward(dy: np.ndarray, cache):
    flat, x_shape, (pt, pb, pl, pr), layer = cache
    kh, kw, cin, cout = layer.weight.shape
    s, d = layer.stride, layer.dilation
    b, ho, wo, _ = dy.shape
    dy_flat = dy.reshape(b * ho * wo, cout)
    dw = (flat.T @ dy_flat).reshape(cin, kh, kw, cout).transpose(1, 2, 0, 3)
    db = dy_flat.sum(axis=0)
    wmat = layer.weight.transpose(2, 0, 1, 3).reshape(cin * kh * kw, cout)
    dcols = (dy_flat @ wmat.T).reshape(b, ho, wo, cin, kh, kw)
    hp = x_shape[1] + pt + pb
    wp = x_shape[2] + pl + pr
    dxp = np.zeros((b, hp, wp, cin), dtype=dy.dtype)
    for ki in range(kh):
        for kj in range(kw):
            dxp[:, ki * d:ki * d + s * ho:s, kj * d:kj * d + s * wo:s, :] += \
                dcols[:, :, :, :, ki, kj]
    dx = dxp[:, pt:hp - pb, pl:wp - pr, :]
    return dx, dw.astype(layer.weight.dtype), db.astype(layer.bias.dtype)


def _stack_forward(x, layers, final_linear: bool):
    caches = []
    for i, layer in enumerate(layers):
        x, cache = conv2d_forward(x, layer)
        last = i == len(layers) - 1
        if not (last and final_linear):
            mask = x > 0
            x = x * mask
            caches.append((cache, mask))
        else:
            caches.append((cache, None))
    return x, caches


def _stack_backward(dy, caches):
    dws = []
    for cache, relu_mask in reversed(caches):
        if relu_mask is not None:
            dy = dy * relu_mask
        dy, dw, db = conv2d_backward(dy, cache)
        dws.append((dw, db))
    return dy, list(reversed(dws))


def prepare_images(images) -> np.ndarray:
    """Stack uint8 canvas images into a normalized (B, H, W, 1) float32 batch."""
    arr = np.stack([np.asarray(im) for im in images])
    if arr.dtype == np.uint8:
        arr = arr.astype(np.float32) / 255.0
    arr = arr.astype(np.float32)
    if arr.ndim == 3:
        arr = arr[..., None]
    return arr


def forward(params: PredictorParams, images, return_cache: bool = False):
    """Run the trunk and all four heads; outputs are at label resolution.

    Returns a dict with keys fg_semantic/occ_semantic (B, L, L, K+1) and
    fg_embed/occ_embed (B, L, L, C).
    """
    x = prepare_images(images)
    if x.shape[1] != params.config.canvas_size or x.shape[2] != params.config.canvas_size:
        raise ValueError(
            f"expected {params.config.canvas_size}^2 input, got {x.shape[1]}x{x.shape[2]}"
        )
    feat, trunk_caches = _stack_forward(x, params.trunk, final_linear=False)
    outputs, head_caches = {}, {}
    for name in HEAD_NAMES:
        outputs[name], head_caches[name] = _stack_forward(
            feat, params.heads[name], final_linear=True
        )
    if return_cache:
        return outputs, (trunk_caches, head_caches)
    return outputs


def backward(params: PredictorParams, cache, d_outputs: dict) -> dict:
    """Backprop head gradients into per-layer (dw, db) keyed like named_layers."""
    trunk_caches, head_caches = cache
    grads = {}
    d_feat = None
    for name in HEAD_NAMES:
        d_in, dws = _stack_backward(d_outputs[name].astype(np.float32), head_caches[name])
        d_feat = d_in if d_feat is None else d_feat + d_in
        for i, (dw, db) in enumerate(dws):
            grads[f"{name}.{i}"] = (dw, db)
    _, dws = _stack_backward(d_feat, trunk_caches)
    for i, (dw, db) in enumerate(dws):
        grads[f"trunk.{i}"] = (dw, db)
    return grads


# ---------------------------------------------------------------------------
# optimizer and training loop


@dataclass(frozen=True)
class TrainConfig:
    learning_rate: float = 1e-4
    batch_size: int = 2
    epochs: int = 10
    samples_per_epoch: int = 200
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    seed: int = 0

    def __post_init__(self):
        if min(self.batch_size, self.epochs, self.samples_per_epoch) < 1:
            raise ValueError("batch_size, epochs, samples_per_epoch must be positive")
        if self.learning_rate < 0:
            raise ValueError("learning_rate must be nonnegative")


class Adam:
    """Adaptive moment estimation with bias correction."""

    def __init__(self, params: PredictorParams, config: TrainConfig):
        self.cfg = config
        self.t = 0
        self.m = {}
        self.v = {}
        for name, layer in params.named_layers():
            for suffix, arr in (("w", layer.weight), ("b", layer.bias)):
                self.m[f"{name}.{suffix}"] = np.zeros_like(arr)
                self.v[f"{name}.{suffix}"] = np.zeros_like(arr)

    def step(self, params: PredictorParams, grads: dict) -> None:
        self.t += 1
        c = self.cfg
        bc1 = 1.0 - c.beta1 ** self.t
        bc2 = 1.0 - c.beta2 ** self.t
        for name, layer in params.named_layers():
            dw, db = grads[name]
            for suffix, arr, g in (("w", layer.weight, dw), ("b", layer.bias, db)):
                key = f"{name}.{suffix}"
                m = self.m[key]
                v = self.v[key]
                m += (1.0 - c.beta1) * (g - m)
                v += (1.0 - c.beta2) * (g * g - v)
                arr -= (c.learning_rate * (m / bc1)
                        / (np.sqrt(v / bc2) + c.eps)).astype(arr.dtype)


class StreamingShapes:
    """Regenerates training samples each epoch with derived seeds.

    Epoch e, position i uses scene sample index e * samples_per_epoch + i,
    so every epoch sees fresh, reproducible data from one initial seed.
    """

    def __init__(self, scene_config: SceneConfig, samples_per_epoch: int):
        self.scene_config = scene_config
        self.samples_per_epoch = samples_per_epoch

    def epoch_samples(self, epoch: int) -> list[DatasetSample]:
        return generate_dataset(self.scene_config, self.samples_per_epoch,
                                start_index=epoch * self.samples_per_epoch)


def _sample_targets(sample: DatasetSample):
    r = sample.rendered
    regions = InstanceRegions.from_label_maps(r.fg_instance, r.occ_instance,
                                              r.fg_class, r.occ_class)
    return regions, (r.fg_class.astype(np.int64), r.occ_class.astype(np.int64))


def train(params: PredictorParams, data, loss_config: LossConfig,
          train_config: TrainConfig):
    """Adaptive-moment training over minibatches; returns (params, log).

    ``data`` is either a list of DatasetSample (reshuffled per epoch) or a
    StreamingShapes source. The log holds one dict per epoch with the mean
    loss breakdown. Raises TrainingDivergedError on non-finite loss.
    """
    optimizer = Adam(params, train_config)
    rng = np.random.Generator(np.random.PCG64(np.random.SeedSequence(train_config.seed)))
    log = []
    step = 0
    for epoch in range(train_config.epochs):
        if isinstance(data, StreamingShapes):
            samples = data.epoch_samples(epoch)
        else:
            order = rng.permutation(len(data))
            samples = [data[i] for i in order]
        sums = {"l_var": 0.0, "l_dst": 0.0, "l_reg": 0.0, "l_semantic": 0.0, "total": 0.0}
        batches = 0
        for start in range(0, len(samples), train_config.batch_size):
            batch = samples[start:start + train_config.batch_size]
            step += 1
            outputs, cache = forward(
                params, [s.rendered.image for s in batch], return_cache=True
            )
            d_heads = {name: np.zeros_like(outputs[name]) for name in HEAD_NAMES}
            bsz = len(batch)
            batch_terms = dict.fromkeys(sums, 0.0)
            for bi, sample in enumerate(batch):
                regions, targets = _sample_targets(sample)
                breakdown, grads = loss_with_gradient(
                    outputs["fg_embed"][bi], outputs["occ_embed"][bi],
                    outputs["fg_semantic"][bi], outputs["occ_semantic"][bi],
                    regions, targets, loss_config,
                )
                for term in sums:
                    value = getattr(breakdown, term if term != "total" else "total")
                    batch_terms[term] += value / bsz
                d_heads["fg_embed"][bi] = grads.d_fg / bsz
                d_heads["occ_embed"][bi] = grads.d_occ / bsz
                d_heads["fg_semantic"][bi] = grads.d_fg_logits / bsz
                d_heads["occ_semantic"][bi] = grads.d_occ_logits / bsz
            if not np.isfinite(batch_terms["total"]):
                bad = [k for k, v in batch_terms.items() if not np.isfinite(v)]
                raise TrainingDivergedError(
                    f"non-finite loss at epoch {epoch} step {step}: "
                    f"diverging term(s) {', '.join(bad)}"
                )
            grads = backward(params, cache, d_heads)
            optimizer.step(params, grads)
            for term in sums:
                sums[term] += batch_terms[term]
            batches += 1
        entry = {"epoch": epoch}
        entry.update({k: v / batches for k, v in sums.items()})
        log.append(entry)
    return params, log


def write_loss_log(log: list[dict], path) -> None:
    lines = ["epoch,l_var,l_dst,l_reg,l_semantic,total"]
    for e in log:
        lines.append(f"{e['epoch']},{e['l_var']:.8g},{e['l_dst']:.8g},"
                     f"{e['l_reg']:.8g},{e['l_semantic']:.8g},{e['total']:.8g}")
    Path(path).write_text("\n".join(lines) + "\n")


# ---------------------------------------------------------------------------
# checkpoint container: 4-byte LE header length, JSON index, raw <f4 tensors


def save_checkpoint(params: PredictorParams, path) -> None:
    tensors = []
    blobs = []
    offset = 0
    for name, layer in params.named_layers():
        for suffix, arr in (("weight", layer.weight), ("bias", layer.bias)):
            raw = np.ascontiguousarray(arr, dtype="<f4").tobytes()
            tensors.append({
                "name": f"{name}.{suffix}",
                "shape": list(arr.shape),
                "dtype": "<f4",
                "offset": offset,
                "stride": layer.stride,
                "dilation": layer.dilation,
            })
            blobs.append(raw)
            offset += len(raw)
    header = json.dumps({
        "format_version": CHECKPOINT_VERSION,
        "net_config": asdict(params.config),
        "tensors": tensors,
    }, sort_keys=True).encode()
    with open(path, "wb") as fh:
        fh.write(struct.pack("<I", len(header)))
        fh.write(header)
        for raw in blobs:
            fh.write(raw)


def load_checkpoint(path) -> PredictorParams:
    raw = Path(path).read_bytes()
    (hlen,) = struct.unpack("<I", raw[:4])
    header = json.loads(raw[4:4 + hlen].decode())
    if header.get("format_version") != CHECKPOINT_VERSION:
        raise ValueError(f"unsupported checkpoint version {header.get('format_version')!r}")
    cfg = dict(header["net_config"])
    cfg["trunk_widths"] = tuple(cfg["trunk_widths"])
    cfg["head_widths"] = tuple(cfg["head_widths"])
    config = NetConfig(**cfg)
    params = init_params(config, seed=0)
    data = raw[4 + hlen:]
    table = {t["name"]: t for t in header["tensors"]}
    for name, layer in params.named_layers():
        for suffix in ("weight", "bias"):
            t = table[f"{name}.{suffix}"]
            n = int(np.prod(t["shape"])) if t["shape"] else 1
            arr = np.frombuffer(data, dtype="<f4", count=n,
                                offset=t["offset"]).reshape(t["shape"]).copy()
            if suffix == "weight":
                layer.weight = arr
            else:
                layer.bias = arr
    return params
