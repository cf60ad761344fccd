"""Small NHWC convnet with hand-written backprop.

Parameters live in one flat vector so that federated rounds can average,
subtract and serialize them without caring about layer structure. Layer
kinds: ``conv2d`` (stride 1, zero padding), ``relu``, ``maxpool``,
``flatten``, ``dense`` and the terminal ``softmax_xent`` head.
"""
from __future__ import annotations

import json
import struct
from dataclasses import asdict, dataclass, field
from functools import cached_property
from typing import Sequence

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

KINDS = ("conv2d", "dense", "relu", "maxpool", "flatten", "softmax_xent")
_PARAM_MAGIC = b"HSP1"


class SpecError(ValueError):
    pass


@dataclass(frozen=True)
class Layer:
    kind: str
    filters: int = 0  # conv2d
    kernel: int = 0  # conv2d
    padding: int = 0  # conv2d
    units: int = 0  # dense
    size: int = 0  # maxpool

    @classmethod
    def from_dict(cls, d: dict) -> "Layer":
        return cls(**d)

    def to_dict(self) -> dict:
        keep = {"conv2d": ("filters", "kernel", "padding"), "dense": ("units",), "maxpool": ("size",)}
        d = {"kind": self.kind}
        for k in keep.get(self.kind, ()):
            d[k] = getattr(self, k)
        return d


def conv(filters: int, kernel: int = 3, padding: int | None = None) -> Layer:
    return Layer("conv2d", filters=filters, kernel=kernel, padding=kernel // 2 if padding is None else padding)


def dense(units: int) -> Layer:
    return Layer("dense", units=units)


def maxpool(size: int = 2) -> Layer:
    return Layer("maxpool", size=size)


RELU = Layer("relu")
FLATTEN = Layer("flatten")
HEAD = Layer("softmax_xent")


@dataclass(frozen=True)
class ModelSpec:
    layers: tuple[Layer, ...]
    input_shape: tuple[int, int, int]
    n_classes: int
    dtype: str = "float64"
    # filled by validation: per-layer (weight shape, bias shape) or None
    param_shapes: tuple = field(init=False, repr=False, compare=False)

    def __post_init__(self):
        object.__setattr__(self, "layers", tuple(self.layers))
        object.__setattr__(self, "input_shape", tuple(int(v) for v in self.input_shape))
        object.__setattr__(self, "param_shapes", tuple(self._check()))

    def _check(self) -> list:
        if self.n_classes < 2:
            raise SpecError(f"n_classes must be >= 2, got {self.n_classes}")
        if self.dtype not in ("float64", "float32"):
            raise SpecError(f"dtype must be float64 or float32, got {self.dtype}")
        if len(self.input_shape) != 3 or min(self.input_shape) < 1:
            raise SpecError(f"input_shape must be (H, W, C) positive, got {self.input_shape}")
        if not self.layers or self.layers[-1].kind != "softmax_xent":
            raise SpecError("last layer must be softmax_xent")
        shape: tuple = self.input_shape
        shapes = []
        for i, layer in enumerate(self.layers):
            where = f"layer {i} ({layer.kind})"
            if layer.kind not in KINDS:
                raise SpecError(f"{where}: unknown kind")
            ps = None
            if layer.kind == "conv2d":
                if len(shape) != 3:
                    raise SpecError(f"{where}: expects H×W×C input, got {shape}")
                if layer.filters < 1 or layer.kernel < 1 or layer.padding < 0:
                    raise SpecError(f"{where}: filters/kernel must be positive, padding >= 0")
                h, w, c = shape
                ho, wo = h + 2 * layer.padding - layer.kernel + 1, w + 2 * layer.padding - layer.kernel + 1
                if ho < 1 or wo < 1:
                    raise SpecError(f"{where}: kernel {layer.kernel} larger than padded input {shape}")
                ps = ((layer.kernel, layer.kernel, c, layer.filters), (layer.filters,))
                shape = (ho, wo, layer.filters)
            elif layer.kind == "maxpool":
                if len(shape) != 3:
                    raise SpecError(f"{where}: expects H×W×C input, got {shape}")
                s = layer.size
                if s < 1 or shape[0] % s or shape[1] % s:
                    raise SpecError(f"{where}: size {s} must divide spatial dims {shape[:2]}")
                shape = (shape[0] // s, shape[1] // s, shape[2])
            elif layer.kind == "flatten":
                shape = (int(np.prod(shape)),)
            elif layer.kind == "dense":
                if len(shape) != 1:
                    raise SpecError(f"{where}: expects flat input, got {shape}; add a flatten layer")
                if layer.units < 1:
                    raise SpecError(f"{where}: units must be positive")
                ps = ((shape[0], layer.units), (layer.units,))
                shape = (layer.units,)
            elif layer.kind == "softmax_xent":
                if i != len(self.layers) - 1:
                    raise SpecError(f"{where}: head must be the last layer")
                if shape != (self.n_classes,):
                    raise SpecError(f"{where}: head input {shape} != ({self.n_classes},)")
            shapes.append(ps)
        return shapes

    @cached_property
    def param_count(self) -> int:
        return sum(int(np.prod(w)) + int(np.prod(b)) for w, b in filter(None, self.param_shapes))

    @property
    def np_dtype(self):
        return np.dtype(self.dtype)

    def to_dict(self) -> dict:
        return {
            "input_shape": list(self.input_shape),
            "n_classes": self.n_classes,
            "dtype": self.dtype,
            "layers": [l.to_dict() for l in self.layers],
        }

    @classmethod
    def from_dict(cls, d: dict) -> "ModelSpec":
        return cls(
            layers=tuple(Layer.from_dict(l) for l in d["layers"]),
            input_shape=tuple(d["input_shape"]),
            n_classes=int(d["n_classes"]),
            dtype=d.get("dtype", "float64"),
        )

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True)

    @classmethod
    def from_json(cls, text: str) -> "ModelSpec":
        return cls.from_dict(json.loads(text))


def default_spec(input_shape=(16, 16, 3), n_classes: int = 4, dtype: str = "float64") -> ModelSpec:
    """conv3x3x8 → relu → pool2 → conv3x3x16 → relu → pool2 → dense → softmax."""
    return ModelSpec(
        layers=(conv(8), RELU, maxpool(2), conv(16), RELU, maxpool(2), FLATTEN, dense(n_classes), HEAD),
        input_shape=input_shape,
        n_classes=n_classes,
        dtype=dtype,
    )


@dataclass(frozen=True)
class ModelState:
    spec: ModelSpec
    params: np.ndarray

    def __post_init__(self):
        p = np.asarray(self.params, dtype=self.spec.np_dtype)
        if p.ndim != 1 or p.size != self.spec.param_count:
            raise ValueError(f"params length {p.size} != spec param count {self.spec.param_count}")
        if not np.all(np.isfinite(p)):
            raise FloatingPointError("non-finite model parameters")
        object.__setattr__(self, "params", p)

    def with_params(self, params: np.ndarray) -> "ModelState":
        return ModelState(self.spec, params)


@dataclass(frozen=True)
class Batch:
    images: np.ndarray  # (n, H, W, C)
    labels: np.ndarray  # (n,) int

    def __post_init__(self):
        x = np.asarray(self.images)
        y = np.asarray(self.labels, dtype=np.int64)
        if x.ndim != 4 or y.ndim != 1 or x.shape[0] != y.shape[0] or y.size == 0:
            raise ValueError(f"batch shape mismatch: images {x.shape}, labels {y.shape}")
        object.__setattr__(self, "images", x)
        object.__setattr__(self, "labels", y)

    def __len__(self) -> int:
        return int(self.labels.size)


def unflatten(spec: ModelSpec, params: np.ndarray) -> list:
    """Per-layer ``(W, b)`` views into ``params`` (``None`` for parameter-free layers)."""
    out, i = [], 0
    for ps in spec.param_shapes:
        if ps is None:
            out.append(None)
            continue
        wshape, bshape = ps
        nw, nb = int(np.prod(wshape)), int(np.prod(bshape))
        out.append((params[i:i + nw].reshape(wshape), params[i + nw:i + nw + nb].reshape(bshape)))
        i += nw + nb
    return out


def flatten(parts: Sequence) -> np.ndarray:
    chunks = []
    for p in parts:
        if p is not None:
            chunks.append(np.ravel(p[0]))
            chunks.append(np.ravel(p[1]))
    return np.concatenate(chunks) if chunks else np.zeros(0)


def init_params(spec: ModelSpec, seed: int) -> ModelState:
    """Weights ~ U(-1/sqrt(fan_in), 1/sqrt(fan_in)), biases zero."""
    rng = np.random.default_rng(seed)
    parts = []
    for ps in spec.param_shapes:
        if ps is None:
            parts.append(None)
            continue
        wshape, bshape = ps
        fan_in = int(np.prod(wshape[:-1]))
        lim = 1.0 / np.sqrt(fan_in)
        parts.append((rng.uniform(-lim, lim, size=wshape), np.zeros(bshape)))
    return ModelState(spec, flatten(parts).astype(spec.np_dtype))


# --- layer kernels -------------------------------------------------------

def _im2col(x: np.ndarray, k: int, pad: int) -> tuple[np.ndarray, tuple]:
    n, h, w, c = x.shape
    xp = np.pad(x, ((0, 0), (pad, pad), (pad, pad), (0, 0))) if pad else x
    ho, wo = xp.shape[1] - k + 1, xp.shape[2] - k + 1
    win = sliding_window_view(xp, (k, k), axis=(1, 2))  # n, ho, wo, c, k, k
    cols = win.transpose(0, 1, 2, 4, 5, 3).reshape(n * ho * wo, k * k * c)
    return cols, (n, ho, wo, xp.shape)


def _col2im(dcols: np.ndarray, k: int, pad: int, geom: tuple, c: int) -> np.ndarray:
    n, ho, wo, pshape = geom
    d = dcols.reshape(n, ho, wo, k, k, c)
    dxp = np.zeros(pshape, dtype=dcols.dtype)
    for i in range(k):
        for j in range(k):
            dxp[:, i:i + ho, j:j + wo, :] += d[:, :, :, i, j, :]
    if pad:
        dxp = dxp[:, pad:-pad, pad:-pad, :]
    return dxp


def _pool_windows(x: np.ndarray, s: int) -> np.ndarray:
    n, h, w, c = x.shape
    return x.reshape(n, h // s, s, w // s, s, c).transpose(0, 1, 3, 5, 2, 4).reshape(n, h // s, w // s, c, s * s)


def _pool_max(x: np.ndarray, s: int) -> np.ndarray:
    out = x[:, 0::s, 0::s]
    for k in range(1, s * s):
        i, j = divmod(k, s)
        out = np.maximum(out, x[:, i::s, j::s])
    return out


def _forward(spec: ModelSpec, params: np.ndarray, x: np.ndarray, keep: bool):
    parts = unflatten(spec, params)
    caches = []
    a = x
    for layer, p in zip(spec.layers, parts):
        kind = layer.kind
        if kind == "conv2d":
            w, b = p
            cols, geom = _im2col(a, layer.kernel, layer.padding)
            out = cols @ w.reshape(-1, layer.filters) + b
            n, ho, wo, _ = geom
            caches.append((cols, geom, a.shape[-1]) if keep else None)
            a = out.reshape(n, ho, wo, layer.filters)
        elif kind == "relu":
            caches.append(a > 0 if keep else None)
            a = np.maximum(a, 0)
        elif kind == "maxpool":
            if keep:
                win = _pool_windows(a, layer.size)
                idx = win.argmax(axis=-1)
                caches.append((idx, a.shape))
                a = np.take_along_axis(win, idx[..., None], axis=-1)[..., 0]
            else:
                caches.append(None)
                a = _pool_max(a, layer.size)
        elif kind == "flatten":
            caches.append(a.shape if keep else None)
            a = a.reshape(a.shape[0], -1)
        elif kind == "dense":
            w, b = p
            caches.append(a if keep else None)
            a = a @ w + b
        else:  # head: logits pass through
            caches.append(None)
    return a, caches, parts


def _xent(logits: np.ndarray, labels: np.ndarray) -> tuple[float, np.ndarray]:
    z = logits - logits.max(axis=1, keepdims=True)
    lse = np.log(np.exp(z).sum(axis=1))
    logp = z - lse[:, None]
    loss = -logp[np.arange(labels.size), labels].mean()
    return float(loss), logp


def _check_input(spec: ModelSpec, x: np.ndarray, y: np.ndarray | None = None) -> np.ndarray:
    if x.ndim != 4 or tuple(x.shape[1:]) != spec.input_shape:
        raise ValueError(f"input shape {x.shape[1:]} does not match spec {spec.input_shape}")
    if y is not None and (y.min() < 0 or y.max() >= spec.n_classes):
        raise ValueError(f"labels out of range [0, {spec.n_classes})")
    return x.astype(spec.np_dtype, copy=False)


def logits(state: ModelState, images: np.ndarray) -> np.ndarray:
    x = _check_input(state.spec, np.asarray(images))
    return _forward(state.spec, state.params, x, keep=False)[0]


def forward_loss(state: ModelState, batch: Batch) -> tuple[float, np.ndarray]:
    """Mean cross-entropy over the batch and the raw logits."""
    x = _check_input(state.spec, batch.images, batch.labels)
    out, _, _ = _forward(state.spec, state.params, x, keep=False)
    loss, _ = _xent(out, batch.labels)
    return loss, out


def backward(state: ModelState, batch: Batch) -> tuple[float, np.ndarray]:
    """Mean batch loss and its gradient w.r.t. the flat parameter vector."""
    spec = state.spec
    x = _check_input(spec, batch.images, batch.labels)
    y = batch.labels
    out, caches, parts = _forward(spec, state.params, x, keep=True)
    loss, logp = _xent(out, y)
    g = np.exp(logp)
    g[np.arange(y.size), y] -= 1.0
    g /= y.size
    grads: list = [None] * len(spec.layers)
    for i in range(len(spec.layers) - 1, -1, -1):
        layer, cache = spec.layers[i], caches[i]
        kind = layer.kind
        if kind == "dense":
            w, _ = parts[i]
            grads[i] = (cache.T @ g, g.sum(axis=0))
            g = g @ w.T
        elif kind == "conv2d":
            w, _ = parts[i]
            cols, geom, c = cache
            g2 = g.reshape(-1, layer.filters)
            grads[i] = ((cols.T @ g2).reshape(w.shape), g2.sum(axis=0))
            if i > 0:
                g = _col2im(g2 @ w.reshape(-1, layer.filters).T, layer.kernel, layer.padding, geom, c)
        elif kind == "relu":
            g = g * cache
        elif kind == "maxpool":
            idx, shape = cache
            n, h, wd, c = shape
            s = layer.size
            dwin = np.zeros((n, h // s, wd // s, c, s * s), dtype=g.dtype)
            np.put_along_axis(dwin, idx[..., None], g[..., None], axis=-1)
            g = dwin.reshape(n, h // s, wd // s, c, s, s).transpose(0, 1, 4, 2, 5, 3).reshape(shape)
        elif kind == "flatten":
            g = g.reshape(cache)
    grad = flatten(grads).astype(spec.np_dtype, copy=False)
    if not np.all(np.isfinite(grad)):
        raise FloatingPointError("non-finite gradient")
    return loss, grad


def sgd_step(state: ModelState, grad: np.ndarray, eta: float) -> ModelState:
    grad = np.asarray(grad)
    if grad.shape != state.params.shape:
        raise ValueError(f"gradient length {grad.size} != params length {state.params.size}")
    return state.with_params(state.params - eta * grad)


def predict(state: ModelState, images: np.ndarray, chunk: int = 512) -> np.ndarray:
    # argmax returns the first maximal index, i.e. the lowest class wins ties
    preds = [logits(state, images[i:i + chunk]).argmax(axis=1) for i in range(0, len(images), chunk)]
    return np.concatenate(preds)


def dataset_loss(state: ModelState, images: np.ndarray, labels: np.ndarray, chunk: int = 512) -> float:
    """Mean cross-entropy over a whole dataset, evaluated in chunks."""
    n = len(labels)
    if n == 0:
        raise ValueError("empty dataset")
    total = 0.0
    for i in range(0, n, chunk):
        b = Batch(images[i:i + chunk], labels[i:i + chunk])
        loss, _ = forward_loss(state, b)
        total += loss * len(b)
    return total / n


def accuracy(state: ModelState, images: np.ndarray, labels: np.ndarray) -> float:
    labels = np.asarray(labels)
    if labels.size == 0:
        raise ValueError("accuracy of an empty dataset is undefined")
    return float(np.mean(predict(state, np.asarray(images)) == labels))


def params_to_bytes(params: np.ndarray) -> bytes:
    p = np.ascontiguousarray(params, dtype="<f8")
    return _PARAM_MAGIC + struct.pack("<Q", p.size) + p.tobytes()


def params_from_bytes(blob: bytes) -> np.ndarray:
    if len(blob) < 12 or blob[:4] != _PARAM_MAGIC:
        raise ValueError("not a parameter blob (bad magic)")
    (n,) = struct.unpack("<Q", blob[4:12])
    if len(blob) != 12 + 8 * n:
        raise ValueError(f"parameter blob declares {n} values but holds {(len(blob) - 12) / 8:g}")
    return np.frombuffer(blob, dtype="<f8", offset=12, count=n).astype(np.float64)
