"""Small convolutional network: layers, traced forward pass, SGD, container io.

Six layer kinds (conv, relu, maxpool, flatten, dense, output) compose into a
NetworkSpec whose shapes are checked end to end at build time. The forward
pass can record every conv activation (post-nonlinearity) plus max-pool
switch locations, which the deconvolution reverse pass consumes later.

All layer math follows the input's dtype: inference runs float32, while the
finite-difference tests cast a whole network to float64 and reuse the exact
same code paths.
"""
from __future__ import annotations

import math
import struct
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from typing import ClassVar

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .errors import DataFormatError, NumericError, PatchlensError, UsageError
from .tensor import DTYPE, Rng, ensure_finite


# ---------------------------------------------------------------------------
# layer kinds

@dataclass
class ConvLayer:
    kind: ClassVar[str] = "conv"
    w: np.ndarray  # [out_ch, in_ch, kh, kw]
    b: np.ndarray  # [out_ch]
    stride: int = 1
    pad: int = 0


@dataclass
class ReluLayer:
    kind: ClassVar[str] = "relu"


@dataclass
class MaxPoolLayer:
    kind: ClassVar[str] = "maxpool"
    window: int = 2
    stride: int = 2


@dataclass
class FlattenLayer:
    kind: ClassVar[str] = "flatten"


@dataclass
class DenseLayer:
    kind: ClassVar[str] = "dense"
    w: np.ndarray  # [out, in]
    b: np.ndarray  # [out]


@dataclass
class OutputLayer:
    kind: ClassVar[str] = "output"
    classes: int = 2
    squash: str = "softmax"


Layer = ConvLayer | ReluLayer | MaxPoolLayer | FlattenLayer | DenseLayer | OutputLayer


def conv_out_extent(extent: int, kernel: int, stride: int, pad: int) -> int:
    return (extent + 2 * pad - kernel) // stride + 1


class NetworkSpec:
    """Immutable-by-convention network: input shape plus an ordered layer list.

    Layer indices exposed to callers count conv layers only, 1-based, so
    "layer 3" always names the third convolution regardless of interleaved
    relu/pool layers.
    """

    def __init__(self, input_shape, layers):
        self.input_shape = tuple(int(s) for s in input_shape)
        self.layers: list[Layer] = list(layers)
        self.in_shapes: list[tuple] = []
        self.out_shapes: list[tuple] = []
        self.conv_positions: list[int] = []
        self._validate()

    # -- structure ----------------------------------------------------------

    def _validate(self) -> None:
        if len(self.input_shape) != 3 or any(s < 1 for s in self.input_shape):
            raise DataFormatError(f"input shape must be [channels, height, width], got {self.input_shape}")
        if not self.layers:
            raise DataFormatError("network has no layers")
        cur = self.input_shape
        for pos, layer in enumerate(self.layers):
            self.in_shapes.append(cur)
            where = f"layer {pos} ({layer.kind})"
            if isinstance(layer, ConvLayer):
                if layer.stride < 1 or layer.pad < 0:
                    raise DataFormatError(f"{where}: stride must be >= 1 and padding >= 0")
                if layer.w.ndim != 4 or layer.b.ndim != 1:
                    raise DataFormatError(f"{where}: weight rank {layer.w.ndim}, bias rank {layer.b.ndim}")
                o, ci, kh, kw = layer.w.shape
                if len(cur) != 3 or ci != cur[0]:
                    raise DataFormatError(f"{where}: expects {ci} input channels, gets shape {cur}")
                if layer.b.shape != (o,):
                    raise DataFormatError(f"{where}: bias shape {layer.b.shape} for {o} channels")
                ho = conv_out_extent(cur[1], kh, layer.stride, layer.pad)
                wo = conv_out_extent(cur[2], kw, layer.stride, layer.pad)
                if ho < 1 or wo < 1:
                    raise DataFormatError(f"{where}: kernel {kh}x{kw} does not fit input {cur}")
                self.conv_positions.append(pos)
                cur = (o, ho, wo)
            elif isinstance(layer, ReluLayer):
                pass
            elif isinstance(layer, MaxPoolLayer):
                if layer.window < 2 or layer.stride < 1:
                    raise DataFormatError(f"{where}: window must be >= 2 and stride >= 1")
                if len(cur) != 3:
                    raise DataFormatError(f"{where}: pooling needs a spatial input, got {cur}")
                ho = (cur[1] - layer.window) // layer.stride + 1
                wo = (cur[2] - layer.window) // layer.stride + 1
                if ho < 1 or wo < 1:
                    raise DataFormatError(f"{where}: window {layer.window} does not fit input {cur}")
                cur = (cur[0], ho, wo)
            elif isinstance(layer, FlattenLayer):
                cur = (int(np.prod(cur)),)
            elif isinstance(layer, DenseLayer):
                if layer.w.ndim != 2 or layer.b.ndim != 1:
                    raise DataFormatError(f"{where}: weight rank {layer.w.ndim}, bias rank {layer.b.ndim}")
                if len(cur) != 1 or layer.w.shape[1] != cur[0]:
                    raise DataFormatError(f"{where}: weight expects {layer.w.shape[1]} features, gets {cur}")
                if layer.b.shape != (layer.w.shape[0],):
                    raise DataFormatError(f"{where}: bias shape {layer.b.shape}")
                cur = (layer.w.shape[0],)
            elif isinstance(layer, OutputLayer):
                if pos != len(self.layers) - 1:
                    raise DataFormatError(f"{where}: output layer must be last")
                if layer.squash != "softmax":
                    raise DataFormatError(f"{where}: unknown squashing kind {layer.squash!r}")
                if len(cur) != 1 or layer.classes != cur[0]:
                    raise DataFormatError(f"{where}: {layer.classes} classes but {cur} input features")
            else:
                raise DataFormatError(f"{where}: unknown layer kind")
            self.out_shapes.append(cur)
        if not isinstance(self.layers[-1], OutputLayer):
            raise DataFormatError("network must end with exactly one output layer")

    @property
    def conv_count(self) -> int:
        return len(self.conv_positions)

    @property
    def num_classes(self) -> int:
        last = self.layers[-1]
        assert isinstance(last, OutputLayer)
        return last.classes

    def conv_position(self, index: int) -> int:
        """Position in the layer list of 1-based conv layer `index`."""
        if not 1 <= index <= self.conv_count:
            raise UsageError(f"conv layer index {index} outside 1..{self.conv_count}")
        return self.conv_positions[index - 1]

    def conv_layer(self, index: int) -> ConvLayer:
        layer = self.layers[self.conv_position(index)]
        assert isinstance(layer, ConvLayer)
        return layer

    def conv_out_channels(self, index: int) -> int:
        return self.out_shapes[self.conv_position(index)][0]

    def copy(self) -> "NetworkSpec":
        return NetworkSpec(self.input_shape, [_copy_layer(l) for l in self.layers])

    def astype(self, dtype) -> "NetworkSpec":
        """Copy with every weight tensor cast; used by high-precision checks."""
        layers = []
        for l in self.layers:
            l = _copy_layer(l)
            if isinstance(l, (ConvLayer, DenseLayer)):
                l.w = l.w.astype(dtype)
                l.b = l.b.astype(dtype)
            layers.append(l)
        return NetworkSpec(self.input_shape, layers)


def _copy_layer(layer: Layer) -> Layer:
    if isinstance(layer, ConvLayer):
        return ConvLayer(layer.w.copy(), layer.b.copy(), layer.stride, layer.pad)
    if isinstance(layer, DenseLayer):
        return DenseLayer(layer.w.copy(), layer.b.copy())
    if isinstance(layer, MaxPoolLayer):
        return MaxPoolLayer(layer.window, layer.stride)
    if isinstance(layer, OutputLayer):
        return OutputLayer(layer.classes, layer.squash)
    return type(layer)()


def networks_equal(a: NetworkSpec, b: NetworkSpec) -> bool:
    """Structural and bitwise weight equality."""
    if a.input_shape != b.input_shape or len(a.layers) != len(b.layers):
        return False
    for la, lb in zip(a.layers, b.layers):
        if la.kind != lb.kind:
            return False
        if isinstance(la, ConvLayer):
            if (la.stride, la.pad) != (lb.stride, lb.pad):
                return False
        if isinstance(la, MaxPoolLayer):
            if (la.window, la.stride) != (lb.window, lb.stride):
                return False
        if isinstance(la, OutputLayer):
            if (la.classes, la.squash) != (lb.classes, lb.squash):
                return False
        if isinstance(la, (ConvLayer, DenseLayer)):
            if la.w.dtype != lb.w.dtype or la.w.shape != lb.w.shape:
                return False
            if not (np.array_equal(la.w, lb.w) and np.array_equal(la.b, lb.b)):
                return False
    return True


# ---------------------------------------------------------------------------
# layer math (batched; dtype follows the input)

def _im2col(x: np.ndarray, kh: int, kw: int, stride: int, pad: int) -> np.ndarray:
    """[N, C, H, W] -> [N*Ho*Wo, C*kh*kw] patch matrix."""
    if pad:
        x = np.pad(x, ((0, 0), (0, 0), (pad, pad), (pad, pad)))
    win = sliding_window_view(x, (kh, kw), axis=(2, 3))[:, :, ::stride, ::stride]
    n, c, ho, wo = win.shape[:4]
    return win.transpose(0, 2, 3, 1, 4, 5).reshape(n * ho * wo, c * kh * kw)


def conv_forward(x: np.ndarray, layer: ConvLayer) -> np.ndarray:
    out, _ = conv_forward_cols(x, layer)
    return out


def conv_forward_cols(x: np.ndarray, layer: ConvLayer) -> tuple[np.ndarray, np.ndarray]:
    n, c, h, w = x.shape
    o, ci, kh, kw = layer.w.shape
    ho = conv_out_extent(h, kh, layer.stride, layer.pad)
    wo = conv_out_extent(w, kw, layer.stride, layer.pad)
    cols = _im2col(x, kh, kw, layer.stride, layer.pad)
    wmat = layer.w.reshape(o, -1).astype(x.dtype, copy=False)
    out = cols @ wmat.T
    out += layer.b.astype(x.dtype, copy=False)
    return out.reshape(n, ho, wo, o).transpose(0, 3, 1, 2), cols


def _col2im(dcols: np.ndarray, x_shape, kh: int, kw: int, stride: int, pad: int) -> np.ndarray:
    """Adjoint of _im2col: scatter-add patch columns back onto the image grid."""
    n, c, h, w = x_shape
    ho = conv_out_extent(h, kh, stride, pad)
    wo = conv_out_extent(w, kw, stride, pad)
    dxp = np.zeros((n, c, h + 2 * pad, w + 2 * pad), dtype=dcols.dtype)
    d6 = dcols.reshape(n, ho, wo, c, kh, kw).transpose(0, 3, 4, 5, 1, 2)
    for dy in range(kh):
        for dx in range(kw):
            dxp[:, :, dy:dy + ho * stride:stride, dx:dx + wo * stride:stride] += d6[:, :, dy, dx]
    if pad:
        dxp = dxp[:, :, pad:-pad, pad:-pad]
    return dxp


def conv_input_grad(dout: np.ndarray, layer: ConvLayer, x_shape) -> np.ndarray:
    """Map an output-shaped tensor back through the transposed kernels (no bias).

    This is both the training gradient w.r.t. the conv input and the
    deconvolution "filter" stage.
    """
    o, ci, kh, kw = layer.w.shape
    n = dout.shape[0]
    dmat = dout.transpose(0, 2, 3, 1).reshape(-1, o)
    dcols = dmat @ layer.w.reshape(o, -1).astype(dout.dtype, copy=False)
    return _col2im(dcols, (n,) + tuple(x_shape[1:]), kh, kw, layer.stride, layer.pad)


def conv_param_grad(dout: np.ndarray, cols: np.ndarray, layer: ConvLayer):
    o = layer.w.shape[0]
    dmat = dout.transpose(0, 2, 3, 1).reshape(-1, o)
    dw = (dmat.T @ cols).reshape(layer.w.shape)
    db = dmat.sum(axis=0)
    return dw, db


def maxpool_forward(x: np.ndarray, layer: MaxPoolLayer) -> tuple[np.ndarray, np.ndarray]:
    """Returns (pooled, switches).

    switches[n, c, i, j] is the flat row-major index into the pre-pool H*W
    plane of the cell that won pooled cell (i, j). Ties go to the first cell
    in row-major scan order.
    """
    n, c, h, w = x.shape
    k, s = layer.window, layer.stride
    ho = (h - k) // s + 1
    wo = (w - k) // s + 1
    out = np.full((n, c, ho, wo), -np.inf, dtype=x.dtype)
    switches = np.zeros((n, c, ho, wo), dtype=np.int32)
    for dy in range(k):
        for dx in range(k):
            vals = x[:, :, dy:dy + ho * s:s, dx:dx + wo * s:s]
            better = vals > out
            rows = (np.arange(ho, dtype=np.int32) * s + dy)[:, None]
            cols = (np.arange(wo, dtype=np.int32) * s + dx)[None, :]
            np.copyto(out, vals, where=better)
            np.copyto(switches, (rows * w + cols)[None, None], where=better)
    return out, switches


def maxpool_backward(dout: np.ndarray, switches: np.ndarray, x_shape) -> np.ndarray:
    n, c, h, w = x_shape
    dx = np.zeros((n, c, h * w), dtype=dout.dtype)
    flat_idx = switches.reshape(n, c, -1)
    flat_val = dout.reshape(n, c, -1)
    ni = np.arange(n)[:, None, None]
    ci = np.arange(c)[None, :, None]
    np.add.at(dx, (ni, ci, flat_idx), flat_val)
    return dx.reshape(n, c, h, w)


def softmax(z: np.ndarray) -> np.ndarray:
    shifted = z - z.max(axis=-1, keepdims=True)
    e = np.exp(shifted)
    return e / e.sum(axis=-1, keepdims=True)


# ---------------------------------------------------------------------------
# traced forward pass

@dataclass
class ActivationTrace:
    """Everything recorded about one sample's forward pass.

    conv_acts maps 1-based conv layer index to the activation recorded after
    that conv's nonlinearity (the raw conv output when no relu follows).
    switches maps the layer-list position of each max-pool to its switch
    tensor. output is the squashed class-probability vector.
    """

    sample_id: int
    conv_acts: dict[int, np.ndarray]
    switches: dict[int, np.ndarray]
    output: np.ndarray
    predicted_class: int
    predicted_prob: float


def forward(net: NetworkSpec, image: np.ndarray, record: bool = True,
            sample_id: int = 0) -> ActivationTrace:
    """Run one image through the network, optionally recording the full trace."""
    if tuple(image.shape) != net.input_shape:
        raise DataFormatError(f"image shape {tuple(image.shape)} does not match network input {net.input_shape}")
    x = image[None]
    conv_acts: dict[int, np.ndarray] = {}
    switches: dict[int, np.ndarray] = {}
    conv_index = 0
    prev_was_conv = False
    for pos, layer in enumerate(net.layers):
        if isinstance(layer, ConvLayer):
            x = conv_forward(x, layer)
            conv_index += 1
            if record:
                conv_acts[conv_index] = x[0].copy()
            prev_was_conv = True
            continue
        if isinstance(layer, ReluLayer):
            x = np.maximum(x, 0)
            if record and prev_was_conv:
                conv_acts[conv_index] = x[0].copy()
        elif isinstance(layer, MaxPoolLayer):
            x, sw = maxpool_forward(x, layer)
            if record:
                switches[pos] = sw[0].copy()
        elif isinstance(layer, FlattenLayer):
            x = x.reshape(x.shape[0], -1)
        elif isinstance(layer, DenseLayer):
            x = x @ layer.w.T.astype(x.dtype, copy=False) + layer.b.astype(x.dtype, copy=False)
        elif isinstance(layer, OutputLayer):
            x = softmax(x)
        prev_was_conv = False
    out = x[0]
    ensure_finite(out, "network output")
    pred = int(np.argmax(out))
    return ActivationTrace(sample_id, conv_acts, switches, out, pred, float(out[pred]))


def forward_batch(net: NetworkSpec, images, threads: int = 0) -> list[ActivationTrace]:
    """Trace every image independently; order and content match serial forward."""
    def run(i: int) -> ActivationTrace:
        try:
            return forward(net, images[i], record=True, sample_id=i)
        except PatchlensError as exc:
            raise type(exc)(f"sample {i}: {exc}") from exc

    if threads and threads > 1 and len(images) > 1:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            return list(pool.map(run, range(len(images))))
    return [run(i) for i in range(len(images))]


# ---------------------------------------------------------------------------
# training

@dataclass
class TrainConfig:
    epochs: int
    lr: float
    batch_size: int = 32

    def __post_init__(self):
        if self.epochs < 0:
            raise UsageError(f"epochs must be >= 0, got {self.epochs}")
        if self.lr < 0 or not math.isfinite(self.lr):
            raise UsageError(f"learning rate must be finite and >= 0, got {self.lr}")
        if self.batch_size < 1:
            raise UsageError(f"batch size must be >= 1, got {self.batch_size}")


@dataclass
class TrainResult:
    net: NetworkSpec
    checkpoints: list  # weight snapshot after each epoch
    history: list      # (epoch, mean_loss, train_accuracy, val_accuracy or nan)


def _forward_logits(net: NetworkSpec, x: np.ndarray) -> np.ndarray:
    """Batched forward up to (not through) the output squash."""
    for layer in net.layers:
        if isinstance(layer, ConvLayer):
            x = conv_forward(x, layer)
        elif isinstance(layer, ReluLayer):
            x = np.maximum(x, 0)
        elif isinstance(layer, MaxPoolLayer):
            x, _ = maxpool_forward(x, layer)
        elif isinstance(layer, FlattenLayer):
            x = x.reshape(x.shape[0], -1)
        elif isinstance(layer, DenseLayer):
            x = x @ layer.w.T.astype(x.dtype, copy=False) + layer.b.astype(x.dtype, copy=False)
        elif isinstance(layer, OutputLayer):
            break
    return x


def loss_gradients(net: NetworkSpec, xb: np.ndarray, yb: np.ndarray):
    """Cross-entropy loss and gradients for every conv/dense parameter.

    Returns (loss, grads) where grads maps layer-list position ->
    (dw, db). Does not modify the network.
    """
    n = len(xb)
    logits, caches = _forward_logits_cached(net, xb)
    shifted = logits - logits.max(axis=1, keepdims=True)
    lse = np.log(np.sum(np.exp(shifted), axis=1, keepdims=True))
    logp = shifted - lse
    loss = -float(np.mean(logp[np.arange(n), yb], dtype=np.float64))
    grad = np.exp(logp)
    grad[np.arange(n), yb] -= 1.0
    grad /= n
    grads = {}
    for pos, layer, cache in reversed(caches):
        if isinstance(layer, DenseLayer):
            x_in = cache
            grads[pos] = (grad.T @ x_in, grad.sum(axis=0))
            grad = grad @ layer.w.astype(grad.dtype, copy=False)
        elif isinstance(layer, FlattenLayer):
            grad = grad.reshape(cache)
        elif isinstance(layer, MaxPoolLayer):
            sw, x_shape = cache
            grad = maxpool_backward(grad, sw, x_shape)
        elif isinstance(layer, ReluLayer):
            grad = grad * cache
        elif isinstance(layer, ConvLayer):
            x_shape, cols = cache
            grads[pos] = conv_param_grad(grad, cols, layer)
            grad = conv_input_grad(grad, layer, x_shape)
    return loss, grads


def _forward_logits_cached(net: NetworkSpec, x: np.ndarray):
    caches = []
    for pos, layer in enumerate(net.layers):
        if isinstance(layer, ConvLayer):
            out, cols = conv_forward_cols(x, layer)
            caches.append((pos, layer, (x.shape, cols)))
            x = out
        elif isinstance(layer, ReluLayer):
            caches.append((pos, layer, x > 0))
            x = np.maximum(x, 0)
        elif isinstance(layer, MaxPoolLayer):
            shape_in = x.shape
            x, sw = maxpool_forward(x, layer)
            caches.append((pos, layer, (sw, shape_in)))
        elif isinstance(layer, FlattenLayer):
            caches.append((pos, layer, x.shape))
            x = x.reshape(x.shape[0], -1)
        elif isinstance(layer, DenseLayer):
            caches.append((pos, layer, x))
            x = x @ layer.w.T.astype(x.dtype, copy=False) + layer.b.astype(x.dtype, copy=False)
        elif isinstance(layer, OutputLayer):
            break
    return x, caches


def train(net: NetworkSpec, images, labels, cfg: TrainConfig, rng: Rng,
          val_images=None, val_labels=None) -> TrainResult:
    """Plain minibatch SGD with cross-entropy loss.

    Shuffles from a per-epoch child stream of rng, snapshots the full weight
    set after every epoch, and raises NumericError on divergence. The input
    network is trained in place and also returned.
    """
    x = np.stack([np.asarray(im, dtype=DTYPE) for im in images])
    y = np.asarray(labels, dtype=np.int64)
    if len(x) == 0:
        raise UsageError("training dataset is empty")
    if y.min() < 0 or y.max() >= net.num_classes:
        raise UsageError(f"labels outside 0..{net.num_classes - 1}")
    checkpoints = []
    history = []
    for epoch in range(cfg.epochs):
        order = rng.split(epoch).permutation(len(x))
        losses = []
        for step, start in enumerate(range(0, len(x), cfg.batch_size)):
            idx = order[start:start + cfg.batch_size]
            loss, grads = loss_gradients(net, x[idx], y[idx])
            if not math.isfinite(loss):
                raise NumericError(f"training diverged at epoch {epoch + 1}, step {step + 1}: loss={loss}")
            if cfg.lr != 0.0:
                for pos, (dw, db) in grads.items():
                    layer = net.layers[pos]
                    layer.w -= cfg.lr * dw
                    layer.b -= cfg.lr * db
            losses.append(loss)
        checkpoints.append(net.copy())
        train_acc = evaluate_accuracy(net, x, y)
        val_acc = float("nan")
        if val_images is not None and len(val_images):
            val_acc = evaluate_accuracy(net, val_images, val_labels)
        history.append((epoch + 1, float(np.mean(losses)) if losses else float("nan"), train_acc, val_acc))
    return TrainResult(net, checkpoints, history)


def evaluate_accuracy(net: NetworkSpec, images, labels, batch_size: int = 64) -> float:
    x = images if isinstance(images, np.ndarray) else np.stack([np.asarray(im, dtype=DTYPE) for im in images])
    y = np.asarray(labels, dtype=np.int64)
    correct = 0
    for start in range(0, len(x), batch_size):
        logits = _forward_logits(net, x[start:start + batch_size])
        correct += int(np.sum(np.argmax(logits, axis=1) == y[start:start + batch_size]))
    return correct / len(x)


# ---------------------------------------------------------------------------
# weight container + topology manifest

_KIND_TAG = {"conv": 1, "relu": 2, "maxpool": 3, "flatten": 4, "dense": 5, "output": 6}
_TAG_KIND = {v: k for k, v in _KIND_TAG.items()}
_MAGIC = b"NNWC"
_VERSION = 1


def _append_block(blob: bytearray, arr: np.ndarray) -> None:
    shape = arr.shape
    blob.append(len(shape))
    for extent in shape:
        blob += struct.pack("<I", extent)
    blob += np.ascontiguousarray(arr, dtype="<f4").tobytes()


def save_weights(net: NetworkSpec, container_path, manifest_path) -> None:
    """Write the binary weight container and its topology manifest."""
    blob = bytearray()
    blob += _MAGIC
    blob += struct.pack("<II", _VERSION, len(net.layers))
    for layer in net.layers:
        blob.append(_KIND_TAG[layer.kind])
        if isinstance(layer, (ConvLayer, DenseLayer)):
            _append_block(blob, layer.w)
            _append_block(blob, layer.b)
        else:
            blob.append(0)  # rank-0 block: no extents, no data
    with open(container_path, "wb") as fh:
        fh.write(bytes(blob))
    with open(manifest_path, "w") as fh:
        fh.write(manifest_text(net))


def manifest_text(net: NetworkSpec) -> str:
    lines = ["format=nnwc-manifest", "version=1"]
    lines.append("input=" + ",".join(str(s) for s in net.input_shape))
    lines.append(f"layers={len(net.layers)}")
    for pos, layer in enumerate(net.layers):
        if isinstance(layer, ConvLayer):
            o, ci, kh, kw = layer.w.shape
            desc = f"conv out={o} in={ci} kh={kh} kw={kw} stride={layer.stride} pad={layer.pad}"
        elif isinstance(layer, MaxPoolLayer):
            desc = f"maxpool window={layer.window} stride={layer.stride}"
        elif isinstance(layer, DenseLayer):
            desc = f"dense out={layer.w.shape[0]} in={layer.w.shape[1]}"
        elif isinstance(layer, OutputLayer):
            desc = f"output classes={layer.classes} squash={layer.squash}"
        else:
            desc = layer.kind
        lines.append(f"layer.{pos}={desc}")
    return "\n".join(lines) + "\n"


class _Reader:
    def __init__(self, data: bytes, path):
        self.data = data
        self.off = 0
        self.path = path
        self.context = "header"

    def take(self, count: int) -> bytes:
        if self.off + count > len(self.data):
            raise DataFormatError(f"{self.path}: truncated while reading {self.context}")
        piece = self.data[self.off:self.off + count]
        self.off += count
        return piece

    def u8(self) -> int:
        return self.take(1)[0]

    def u32(self) -> int:
        return struct.unpack("<I", self.take(4))[0]

    def block(self) -> np.ndarray:
        rank = self.u8()
        shape = tuple(self.u32() for _ in range(rank))
        count = int(np.prod(shape)) if shape else 1
        if rank == 0:
            return np.zeros((), dtype=DTYPE)
        raw = self.take(4 * count)
        return np.frombuffer(raw, dtype="<f4").reshape(shape).copy()


def _parse_manifest(path) -> tuple[tuple, list[dict]]:
    pairs = {}
    with open(path) as fh:
        for lineno, line in enumerate(fh, 1):
            line = line.strip()
            if not line:
                continue
            if "=" not in line:
                raise DataFormatError(f"{path}:{lineno}: expected key=value, got {line!r}")
            key, value = line.split("=", 1)
            pairs[key] = value
    if pairs.get("format") != "nnwc-manifest":
        raise DataFormatError(f"{path}: not a network manifest")
    if pairs.get("version") != "1":
        raise DataFormatError(f"{path}: unsupported manifest version {pairs.get('version')!r}")
    try:
        input_shape = tuple(int(s) for s in pairs["input"].split(","))
        count = int(pairs["layers"])
    except (KeyError, ValueError) as exc:
        raise DataFormatError(f"{path}: bad or missing input/layers declaration") from exc
    descs = []
    for i in range(count):
        key = f"layer.{i}"
        if key not in pairs:
            raise DataFormatError(f"{path}: missing {key}")
        tokens = pairs[key].split()
        desc = {"kind": tokens[0]}
        for token in tokens[1:]:
            if "=" not in token:
                raise DataFormatError(f"{path}: malformed token {token!r} in {key}")
            k, v = token.split("=", 1)
            desc[k] = v
        descs.append(desc)
    return input_shape, descs


def _desc_int(desc: dict, key: str, path, pos: int) -> int:
    try:
        return int(desc[key])
    except (KeyError, ValueError) as exc:
        raise DataFormatError(f"{path}: layer {pos} ({desc['kind']}) needs integer {key}") from exc


def load_weights(container_path, manifest_path) -> NetworkSpec:
    """Load and cross-validate the container against its topology manifest."""
    input_shape, descs = _parse_manifest(manifest_path)
    with open(container_path, "rb") as fh:
        reader = _Reader(fh.read(), container_path)
    if reader.take(4) != _MAGIC:
        raise DataFormatError(f"{container_path}: bad magic, not a weight container")
    version = reader.u32()
    if version != _VERSION:
        raise DataFormatError(f"{container_path}: unsupported container version {version}")
    count = reader.u32()
    if count != len(descs):
        raise DataFormatError(f"{container_path}: {count} layers but manifest declares {len(descs)}")
    layers: list[Layer] = []
    for pos, desc in enumerate(descs):
        kind = desc["kind"]
        reader.context = f"layer {pos} ({kind})"
        tag = reader.u8()
        if _TAG_KIND.get(tag) != kind:
            raise DataFormatError(
                f"{container_path}: layer {pos} kind tag {tag} does not match manifest kind {kind!r}")
        if kind == "conv":
            w = reader.block()
            b = reader.block()
            expect = tuple(_desc_int(desc, k, manifest_path, pos) for k in ("out", "in", "kh", "kw"))
            if w.shape != expect or b.shape != (expect[0],):
                raise DataFormatError(
                    f"{container_path}: layer {pos} weight shape {w.shape} does not match manifest {expect}")
            layers.append(ConvLayer(w, b,
                                    stride=_desc_int(desc, "stride", manifest_path, pos),
                                    pad=_desc_int(desc, "pad", manifest_path, pos)))
        elif kind == "dense":
            w = reader.block()
            b = reader.block()
            expect = (_desc_int(desc, "out", manifest_path, pos), _desc_int(desc, "in", manifest_path, pos))
            if w.shape != expect or b.shape != (expect[0],):
                raise DataFormatError(
                    f"{container_path}: layer {pos} weight shape {w.shape} does not match manifest {expect}")
            layers.append(DenseLayer(w, b))
        else:
            rank = reader.u8()
            if rank != 0:
                raise DataFormatError(f"{container_path}: layer {pos} ({kind}) should carry no tensor data")
            if kind == "relu":
                layers.append(ReluLayer())
            elif kind == "flatten":
                layers.append(FlattenLayer())
            elif kind == "maxpool":
                layers.append(MaxPoolLayer(_desc_int(desc, "window", manifest_path, pos),
                                           _desc_int(desc, "stride", manifest_path, pos)))
            elif kind == "output":
                layers.append(OutputLayer(_desc_int(desc, "classes", manifest_path, pos),
                                          desc.get("squash", "softmax")))
            else:
                raise DataFormatError(f"{manifest_path}: layer {pos} has unknown kind {kind!r}")
    if reader.off != len(reader.data):
        raise DataFormatError(f"{container_path}: {len(reader.data) - reader.off} trailing bytes after last layer")
    return NetworkSpec(input_shape, layers)


# ---------------------------------------------------------------------------
# reference architectures

def _he_conv(rng: Rng, out_ch: int, in_ch: int, kh: int, kw: int) -> np.ndarray:
    std = math.sqrt(2.0 / (in_ch * kh * kw))
    return rng.normal(0.0, std, (out_ch, in_ch, kh, kw))


def _he_dense(rng: Rng, out_features: int, in_features: int) -> np.ndarray:
    std = math.sqrt(2.0 / in_features)
    return rng.normal(0.0, std, (out_features, in_features))


def reference_network(rng: Rng, classes: int = 2) -> NetworkSpec:
    """The 7-conv desk-scale architecture every experiment here runs on.

    input 3x32x32; conv(16)+relu x2, pool; conv(32)+relu x3, pool;
    conv(64)+relu x2, pool; flatten; dense 128; dense `classes`; softmax.
    """
    layers: list[Layer] = []
    in_ch = 3
    key = 0

    def add_conv(out_ch: int) -> None:
        nonlocal in_ch, key
        layers.append(ConvLayer(_he_conv(rng.split(key), out_ch, in_ch, 3, 3),
                                np.zeros(out_ch, dtype=DTYPE), stride=1, pad=1))
        layers.append(ReluLayer())
        in_ch = out_ch
        key += 1

    add_conv(16)
    add_conv(16)
    layers.append(MaxPoolLayer(2, 2))
    add_conv(32)
    add_conv(32)
    add_conv(32)
    layers.append(MaxPoolLayer(2, 2))
    add_conv(64)
    add_conv(64)
    layers.append(MaxPoolLayer(2, 2))
    layers.append(FlattenLayer())
    flat = 64 * 4 * 4
    layers.append(DenseLayer(_he_dense(rng.split(key), 128, flat), np.zeros(128, dtype=DTYPE)))
    layers.append(DenseLayer(_he_dense(rng.split(key + 1), classes, 128), np.zeros(classes, dtype=DTYPE)))
    layers.append(OutputLayer(classes))
    return NetworkSpec((3, 32, 32), layers)
