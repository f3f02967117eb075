"""A small convolutional classifier with hand-written backprop, SGD and weight averaging.

Activations are NHWC float32 throughout. Convolutions use im2col with the
patch axis ordered (ky, kx, channel), matching the weight layout
(ky, kx, in, out).
"""

from __future__ import annotations

import hashlib
import io
import json
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from .imagecore import DTYPE, RngStream

CHECKPOINT_MAGIC = b"AUGATCKP"
CHECKPOINT_VERSION = 1


@dataclass(frozen=True)
class LayerSpec:
    """``kind`` is "conv", "dense", "relu", "flatten" or "center" (subtracts 0.5)."""

    kind: str
    out: int = 0
    kernel: int = 3
    stride: int = 1
    padding: int = 0

    def to_dict(self) -> dict:
        if self.kind == "conv":
            return {"kind": "conv", "out": self.out, "kernel": self.kernel,
                    "stride": self.stride, "padding": self.padding}
        if self.kind == "dense":
            return {"kind": "dense", "out": self.out}
        return {"kind": self.kind}


def conv(out: int, kernel: int = 3, stride: int = 1, padding: int | None = None) -> LayerSpec:
    return LayerSpec("conv", out, kernel, stride, kernel // 2 if padding is None else padding)


def dense(out: int) -> LayerSpec:
    return LayerSpec("dense", out)


RELU = LayerSpec("relu")
FLATTEN = LayerSpec("flatten")
CENTER = LayerSpec("center")


def default_architecture(channels: Sequence[int] = (16, 32, 64), hidden: int = 0) -> list[LayerSpec]:
    """Input centring, stride-2 3x3 conv blocks with ReLU, then a dense head.

    The classifier layer is appended by ``build_model``.
    """
    layers: list[LayerSpec] = [CENTER]
    for ch in channels:
        layers += [conv(ch, 3, 2), RELU]
    layers.append(FLATTEN)
    if hidden:
        layers += [dense(hidden), RELU]
    return layers


def _conv_out(size: int, kernel: int, stride: int, padding: int) -> int:
    return (size + 2 * padding - kernel) // stride + 1


class Model:
    """Layer specs plus named parameter arrays.

    Parameters are stored as ``{"0.w": ..., "0.b": ..., "2.w": ...}`` keyed
    by layer index. The fingerprint hashes the architecture only.
    """

    def __init__(self, input_shape: Sequence[int], class_count: int, layers: Sequence[LayerSpec],
                 params: dict[str, np.ndarray] | None = None):
        self.input_shape = tuple(int(v) for v in input_shape)
        self.class_count = int(class_count)
        self.layers = [l if isinstance(l, LayerSpec) else LayerSpec(**l) for l in layers]
        self.shapes = self._infer_shapes()
        if self.shapes[-1] != (self.class_count,):
            raise ValueError(f"network output {self.shapes[-1]} != ({self.class_count},)")
        self.params = params if params is not None else self._zero_params()
        for name, shape in self.param_shapes().items():
            if name not in self.params or self.params[name].shape != shape:
                raise ValueError(f"parameter {name} missing or not of shape {shape}")

    def _infer_shapes(self) -> list[tuple[int, ...]]:
        shape = self.input_shape
        shapes = [shape]
        for spec in self.layers:
            if spec.kind == "conv":
                if len(shape) != 3:
                    raise ValueError("conv layer needs an (H, W, C) input")
                h, w, _ = shape
                shape = (_conv_out(h, spec.kernel, spec.stride, spec.padding),
                         _conv_out(w, spec.kernel, spec.stride, spec.padding), spec.out)
                if min(shape[:2]) < 1:
                    raise ValueError(f"conv layer shrinks the input to {shape}")
            elif spec.kind == "dense":
                if len(shape) != 1:
                    raise ValueError("dense layer needs a flat input; add a flatten layer")
                shape = (spec.out,)
            elif spec.kind == "flatten":
                shape = (int(np.prod(shape)),)
            elif spec.kind not in ("relu", "center"):
                raise ValueError(f"unknown layer kind {spec.kind!r}")
            shapes.append(shape)
        return shapes

    def param_shapes(self) -> dict[str, tuple[int, ...]]:
        out = {}
        for i, spec in enumerate(self.layers):
            fan_in_shape = self.shapes[i]
            if spec.kind == "conv":
                out[f"{i}.w"] = (spec.kernel, spec.kernel, fan_in_shape[2], spec.out)
                out[f"{i}.b"] = (spec.out,)
            elif spec.kind == "dense":
                out[f"{i}.w"] = (fan_in_shape[0], spec.out)
                out[f"{i}.b"] = (spec.out,)
        return out

    def _zero_params(self) -> dict[str, np.ndarray]:
        return {k: np.zeros(s, dtype=DTYPE) for k, s in self.param_shapes().items()}

    @property
    def architecture(self) -> dict:
        return {"input_shape": list(self.input_shape), "class_count": self.class_count,
                "layers": [l.to_dict() for l in self.layers]}

    @property
    def fingerprint(self) -> str:
        blob = json.dumps(self.architecture, sort_keys=True).encode()
        return hashlib.sha256(blob).hexdigest()[:16]

    def copy(self) -> "Model":
        return Model(self.input_shape, self.class_count, self.layers,
                     {k: v.copy() for k, v in self.params.items()})

    def __call__(self, batch: np.ndarray) -> np.ndarray:
        return forward(self, batch)


def build_model(input_shape: Sequence[int], class_count: int,
                layers: Sequence[LayerSpec] | None = None, seed: int = 0) -> Model:
    """Model with a dense classifier head appended.

    Hidden weights use Kaiming fan-in normal init; the classifier uses
    variance 1/fan_in so initial logits stay small.

    ``layers`` should not include the classifier; a flatten layer is added
    if missing.
    """
    layers = list(default_architecture() if layers is None else layers)
    if not any(l.kind == "flatten" for l in layers):
        layers.append(FLATTEN)
    layers.append(dense(class_count))
    model = Model(input_shape, class_count, layers)
    gen = RngStream(seed, 0x1417).generator
    head = f"{len(layers) - 1}.w"
    for name, shape in model.param_shapes().items():
        if name.endswith(".w"):
            fan_in = int(np.prod(shape[:-1]))
            gain = 1.0 if name == head else 2.0
            model.params[name] = (gen.standard_normal(shape) * np.sqrt(gain / fan_in)).astype(DTYPE)
    return model


# ---------------------------------------------------------------------------
# forward / backward

def _im2col(x: np.ndarray, kernel: int, stride: int, padding: int):
    n, h, w, c = x.shape
    if padding:
        xp = np.zeros((n, h + 2 * padding, w + 2 * padding, c), dtype=x.dtype)
        xp[:, padding:padding + h, padding:padding + w] = x
    else:
        xp = x
    ho = _conv_out(h, kernel, stride, padding)
    wo = _conv_out(w, kernel, stride, padding)
    cols = np.empty((n, ho, wo, kernel * kernel, c), dtype=x.dtype)
    for ky in range(kernel):
        for kx in range(kernel):
            cols[:, :, :, ky * kernel + kx] = \
                xp[:, ky:ky + stride * ho:stride, kx:kx + stride * wo:stride]
    return cols.reshape(n * ho * wo, kernel * kernel * c), (n, ho, wo), xp.shape


def _col2im(dcols: np.ndarray, padded_shape, out_hw, kernel: int, stride: int, padding: int,
            c: int) -> np.ndarray:
    n, ho, wo = out_hw
    dxp = np.zeros(padded_shape, dtype=dcols.dtype)
    dc = dcols.reshape(n, ho, wo, kernel * kernel, c)
    for ky in range(kernel):
        for kx in range(kernel):
            dxp[:, ky:ky + stride * ho:stride, kx:kx + stride * wo:stride] += \
                dc[:, :, :, ky * kernel + kx]
    if padding:
        return dxp[:, padding:-padding, padding:-padding]
    return dxp


def _check_batch(model: Model, batch) -> np.ndarray:
    x = np.asarray(batch)
    if x.dtype != np.float64:
        # float64 passes through so gradient checks can run in double precision
        x = x.astype(DTYPE)
    if x.shape[1:] != model.input_shape:
        raise ValueError(f"batch of shape {x.shape[1:]} does not match model input {model.input_shape}")
    return x


def _forward(model: Model, x: np.ndarray, keep: bool):
    caches = []
    a = x
    for i, spec in enumerate(model.layers):
        if spec.kind == "conv":
            cols, hw, pshape = _im2col(a, spec.kernel, spec.stride, spec.padding)
            w = model.params[f"{i}.w"]
            out = cols @ w.reshape(-1, spec.out) + model.params[f"{i}.b"]
            caches.append((cols, hw, pshape, a.shape[3]) if keep else None)
            a = out.reshape(hw[0], hw[1], hw[2], spec.out)
        elif spec.kind == "dense":
            caches.append(a if keep else None)
            a = a @ model.params[f"{i}.w"] + model.params[f"{i}.b"]
        elif spec.kind == "relu":
            mask = a > 0
            caches.append(mask if keep else None)
            a = a * mask
        elif spec.kind == "flatten":
            caches.append(a.shape if keep else None)
            a = a.reshape(a.shape[0], -1)
        elif spec.kind == "center":
            caches.append(None)
            a = a - a.dtype.type(0.5)
    return a, caches


def forward(model: Model, batch) -> np.ndarray:
    """Logits of shape (N, class_count)."""
    x = _check_batch(model, batch)
    return _forward(model, x, keep=False)[0]


def softmax_cross_entropy(logits: np.ndarray, labels: np.ndarray):
    """Per-example losses and d(mean loss)/d(logits)."""
    z = logits.astype(np.float64)
    z = z - z.max(axis=1, keepdims=True)
    logsum = np.log(np.exp(z).sum(axis=1))
    n = len(labels)
    losses = logsum - z[np.arange(n), labels]
    probs = np.exp(z - logsum[:, None])
    probs[np.arange(n), labels] -= 1.0
    return losses, (probs / n).astype(logits.dtype)


@dataclass
class Gradients:
    loss: float
    params: dict[str, np.ndarray] | None
    inputs: np.ndarray | None
    losses: np.ndarray = field(repr=False, default=None)
    logits: np.ndarray = field(repr=False, default=None)


def loss_and_grads(model: Model, batch, labels, *, params: bool = True,
                   inputs: bool = True) -> Gradients:
    """Mean cross-entropy and its gradients.

    ``params`` / ``inputs`` switch off the gradient parts a caller does not
    need (an attack only needs input gradients).
    """
    x = _check_batch(model, batch)
    y = np.asarray(labels, dtype=np.int64)
    if y.shape != (len(x),) or (y.size and (y.min() < 0 or y.max() >= model.class_count)):
        raise ValueError("labels must be one class index per example")
    logits, caches = _forward(model, x, keep=True)
    losses, g = softmax_cross_entropy(logits, y)
    grads: dict[str, np.ndarray] = {}
    first = min((i for i, l in enumerate(model.layers) if l.kind in ("conv", "dense")), default=0)
    for i in range(len(model.layers) - 1, -1, -1):
        spec, cache = model.layers[i], caches[i]
        need_dx = inputs or i > first
        if spec.kind == "conv":
            cols, hw, pshape, cin = cache
            g2 = g.reshape(-1, spec.out)
            w2 = model.params[f"{i}.w"].reshape(-1, spec.out)
            if params:
                grads[f"{i}.w"] = (cols.T @ g2).reshape(model.params[f"{i}.w"].shape)
                grads[f"{i}.b"] = g2.sum(axis=0)
            if need_dx:
                g = _col2im(g2 @ w2.T, pshape, hw, spec.kernel, spec.stride, spec.padding, cin)
        elif spec.kind == "dense":
            if params:
                grads[f"{i}.w"] = cache.T @ g
                grads[f"{i}.b"] = g.sum(axis=0)
            if need_dx:
                g = g @ model.params[f"{i}.w"].T
        elif spec.kind == "relu":
            g = g * cache
        elif spec.kind == "flatten":
            g = g.reshape(cache)
        if not need_dx:
            g = None
            break
    return Gradients(float(losses.mean()), grads if params else None,
                     g if inputs else None, losses, logits)


def predict(model: Model, batch, batch_size: int = 512) -> np.ndarray:
    x = _check_batch(model, batch)
    out = [forward(model, x[i:i + batch_size]).argmax(axis=1) for i in range(0, len(x), batch_size)]
    return np.concatenate(out) if out else np.zeros(0, dtype=np.int64)


# ---------------------------------------------------------------------------
# optimisation

@dataclass
class OptimizerState:
    """SGD with momentum and weight decay; ``schedule`` holds (epoch, factor) milestones.

    Each factor multiplies the learning rate from its epoch onwards, so
    ``[(100, 0.1), (150, 0.1)]`` divides by 10 twice.
    """

    learning_rate: float = 0.1
    momentum: float = 0.9
    weight_decay: float = 5e-4
    schedule: list[tuple[int, float]] = field(default_factory=list)
    velocity: dict[str, np.ndarray] = field(default_factory=dict)

    def lr_at(self, epoch: int) -> float:
        lr = self.learning_rate
        for start, factor in self.schedule:
            if epoch >= start:
                lr *= factor
        return lr


def sgd_step(model: Model, grads: dict[str, np.ndarray], opt: OptimizerState, epoch: int = 0) -> None:
    """In-place update: v = momentum * v + (g + decay * theta); theta -= lr * v."""
    lr = DTYPE(opt.lr_at(epoch))
    mom = DTYPE(opt.momentum)
    wd = DTYPE(opt.weight_decay)
    for name, theta in model.params.items():
        g = grads[name]
        if g.shape != theta.shape:
            raise ValueError(f"gradient {name} has shape {g.shape}, expected {theta.shape}")
        step = g + wd * theta if wd else g.astype(DTYPE, copy=True)
        v = opt.velocity.get(name)
        if v is not None and mom:
            v *= mom
            v += step
        else:
            v = step
        opt.velocity[name] = v
        theta -= lr * v


class AveragedModel:
    """Running arithmetic mean of parameter snapshots (stochastic weight averaging)."""

    def __init__(self, model: Model, start_epoch: int = 0):
        self.template = model.copy()
        self.fingerprint = model.fingerprint
        self.start_epoch = start_epoch
        self.count = 0
        self.average = {k: np.zeros(v.shape, dtype=np.float64) for k, v in model.params.items()}

    def model(self) -> Model:
        out = self.template.copy()
        out.params = {k: v.astype(DTYPE) for k, v in self.average.items()}
        return out


def swa_update(avg: AveragedModel, model: Model) -> AveragedModel:
    if model.fingerprint != avg.fingerprint:
        raise ValueError("model architecture does not match the averaged model")
    n = avg.count
    for k, theta in model.params.items():
        avg.average[k] += (theta.astype(np.float64) - avg.average[k]) / (n + 1)
    avg.count = n + 1
    return avg


# ---------------------------------------------------------------------------
# checkpoints

def dumps_checkpoint(model: Model, meta: dict | None = None) -> bytes:
    """Serialise to bytes: magic, version, fingerprint, architecture JSON, f32 LE tensors.

    ``meta`` is stored inside the architecture JSON under "meta" and ignored on load.
    """
    buf = io.BytesIO()
    buf.write(CHECKPOINT_MAGIC)
    buf.write(struct.pack("<I", CHECKPOINT_VERSION))
    fp = model.fingerprint.encode()
    buf.write(struct.pack("<H", len(fp)) + fp)
    header = dict(model.architecture, meta=meta) if meta else model.architecture
    arch = json.dumps(header, sort_keys=True).encode()
    buf.write(struct.pack("<I", len(arch)) + arch)
    names = sorted(model.params)
    buf.write(struct.pack("<I", len(names)))
    for name in names:
        t = model.params[name]
        nb = name.encode()
        buf.write(struct.pack("<H", len(nb)) + nb)
        buf.write(struct.pack("<B", t.ndim))
        buf.write(struct.pack(f"<{t.ndim}I", *t.shape))
        buf.write(np.ascontiguousarray(t, dtype="<f4").tobytes())
    return buf.getvalue()


def loads_checkpoint(blob: bytes) -> Model:
    view = memoryview(blob)
    pos = 0

    def take(n: int) -> bytes:
        nonlocal pos
        if pos + n > len(view):
            raise ValueError(f"checkpoint truncated at byte {pos}")
        chunk = bytes(view[pos:pos + n])
        pos += n
        return chunk

    if take(8) != CHECKPOINT_MAGIC:
        raise ValueError("not a checkpoint file (bad magic)")
    (version,) = struct.unpack("<I", take(4))
    if version != CHECKPOINT_VERSION:
        raise ValueError(f"unsupported checkpoint version {version}")
    (n,) = struct.unpack("<H", take(2))
    fingerprint = take(n).decode()
    (n,) = struct.unpack("<I", take(4))
    arch = json.loads(take(n))
    (count,) = struct.unpack("<I", take(4))
    params = {}
    for _ in range(count):
        (n,) = struct.unpack("<H", take(2))
        name = take(n).decode()
        (ndim,) = struct.unpack("<B", take(1))
        shape = struct.unpack(f"<{ndim}I", take(4 * ndim))
        size = int(np.prod(shape)) if ndim else 1
        params[name] = np.frombuffer(take(4 * size), dtype="<f4").astype(DTYPE).reshape(shape)
    if pos != len(view):
        raise ValueError(f"trailing bytes after checkpoint at byte {pos}")
    model = Model(arch["input_shape"], arch["class_count"],
                  [LayerSpec(**l) for l in arch["layers"]], params)
    if model.fingerprint != fingerprint:
        raise ValueError("checkpoint fingerprint does not match its architecture")
    return model


def save_checkpoint(model: Model, path, meta: dict | None = None) -> None:
    Path(path).write_bytes(dumps_checkpoint(model, meta))


def load_checkpoint(path) -> Model:
    return loads_checkpoint(Path(path).read_bytes())
