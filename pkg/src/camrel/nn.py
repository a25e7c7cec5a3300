"""Minimal deterministic neural-network engine on top of numpy.

Tensors are plain ``numpy.ndarray`` objects in float32.  Image tensors use
``(N, H, W, C)`` layout; single samples in ``(H, W, C)`` are accepted by the
functional ops and get a leading batch axis added.

Conventions
-----------
* Convolution is cross-correlation (no kernel flip), stride 1, no padding.
* 2x2 max pooling runs in ceil mode: odd borders keep a truncated window.
  Ties route the gradient to the first argmax in row-major window order.
* The ReLU subgradient at exactly 0 is 0.
"""
from __future__ import annotations

import copy
from dataclasses import dataclass, field
from typing import Callable

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

DTYPE = np.float32
LOG_CLAMP = 1e-12


def make_rng(seed: int, *keys: int) -> np.random.Generator:
    """Seeded PCG64 generator; ``keys`` derive independent child streams.

    Child streams come from ``SeedSequence(seed, spawn_key=keys)`` so the same
    ``(seed, keys)`` pair always yields the same values on any platform.
    """
    return np.random.Generator(np.random.PCG64(np.random.SeedSequence(seed, spawn_key=tuple(keys))))


def _as_batch(x: np.ndarray, ndim: int) -> tuple[np.ndarray, bool]:
    x = np.asarray(x)
    if x.ndim == ndim - 1:
        return x[None], True
    if x.ndim != ndim:
        raise ValueError(f"expected a {ndim - 1}-D sample or {ndim}-D batch, got shape {x.shape}")
    return x, False


# ---------------------------------------------------------------------------
# functional ops


def _im2col(x: np.ndarray, kh: int, kw: int) -> np.ndarray:
    n, h, w, c = x.shape
    win = sliding_window_view(x, (kh, kw), axis=(1, 2))  # N, Ho, Wo, C, kh, kw
    win = win.transpose(0, 1, 2, 4, 5, 3)
    return win.reshape(n * (h - kh + 1) * (w - kw + 1), kh * kw * c)


def _check_conv_shapes(x: np.ndarray, weights: np.ndarray, bias: np.ndarray) -> None:
    if weights.ndim != 4:
        raise ValueError(f"conv weights must be Kh x Kw x C x F, got shape {weights.shape}")
    kh, kw, c, f = weights.shape
    _, h, w, cin = x.shape
    if cin != c:
        raise ValueError(f"conv channel mismatch: input has C={cin}, weights expect C={c}")
    if h < kh or w < kw:
        raise ValueError(f"conv input {h}x{w} smaller than kernel {kh}x{kw}")
    if bias.shape != (f,):
        raise ValueError(f"conv bias must have shape ({f},), got {bias.shape}")


def conv2d_forward(x: np.ndarray, weights: np.ndarray, bias: np.ndarray) -> np.ndarray:
    """Valid cross-correlation of ``x`` (H x W x C or batch) with ``weights`` (Kh x Kw x C x F)."""
    xb, single = _as_batch(x, 4)
    _check_conv_shapes(xb, weights, bias)
    kh, kw, c, f = weights.shape
    n, h, w, _ = xb.shape
    ho, wo = h - kh + 1, w - kw + 1
    out = _im2col(xb, kh, kw) @ weights.reshape(kh * kw * c, f) + bias
    out = out.reshape(n, ho, wo, f)
    return out[0] if single else out


def _col2im(dcols: np.ndarray, shape: tuple[int, ...], kh: int, kw: int) -> np.ndarray:
    n, h, w, c = shape
    ho, wo = h - kh + 1, w - kw + 1
    dcols = dcols.reshape(n, ho, wo, kh, kw, c)
    dx = np.zeros(shape, dtype=dcols.dtype)
    for i in range(kh):
        for j in range(kw):
            dx[:, i:i + ho, j:j + wo, :] += dcols[:, :, :, i, j, :]
    return dx


def conv2d_backward(x: np.ndarray, weights: np.ndarray, upstream: np.ndarray, cols: np.ndarray | None = None,
                    need_input_grad: bool = True):
    """Gradients of :func:`conv2d_forward`.

    Returns ``(input_grad, weight_grad, bias_grad)``; ``input_grad`` is None
    when ``need_input_grad`` is false.
    """
    xb, single = _as_batch(x, 4)
    gb, _ = _as_batch(upstream, 4)
    kh, kw, c, f = weights.shape
    n, h, w, cin = xb.shape
    expected = (n, h - kh + 1, w - kw + 1, f)
    if cin != c or gb.shape != expected:
        raise ValueError(f"conv backward shape mismatch: input {xb.shape}, weights {weights.shape}, "
                         f"upstream {gb.shape} (expected {expected})")
    if cols is None:
        cols = _im2col(xb, kh, kw)
    g2 = gb.reshape(-1, f)
    weight_grad = (cols.T @ g2).reshape(weights.shape)
    bias_grad = g2.sum(axis=0)
    input_grad = None
    if need_input_grad:
        input_grad = _col2im(g2 @ weights.reshape(-1, f).T, xb.shape, kh, kw)
        if single:
            input_grad = input_grad[0]
    return input_grad, weight_grad, bias_grad


def _pool_quads(x: np.ndarray) -> list[np.ndarray]:
    """The four 2x2-window members in row-major order, -inf padded to even size."""
    n, h, w, c = x.shape
    ph, pw = h % 2, w % 2
    if ph or pw:
        x = np.pad(x, ((0, 0), (0, ph), (0, pw), (0, 0)), constant_values=-np.inf)
    return [x[:, 0::2, 0::2], x[:, 0::2, 1::2], x[:, 1::2, 0::2], x[:, 1::2, 1::2]]


def maxpool2x2_forward(x: np.ndarray) -> np.ndarray:
    """2x2/2 max pooling in ceil mode: output is ceil(H/2) x ceil(W/2) x C."""
    xb, single = _as_batch(x, 4)
    if xb.shape[1] < 1 or xb.shape[2] < 1:
        raise ValueError(f"maxpool input must be at least 1x1, got {xb.shape}")
    a, b, c, d = _pool_quads(xb)
    out = np.maximum(np.maximum(a, b), np.maximum(c, d))
    return out[0] if single else out


def maxpool2x2_backward(x: np.ndarray, upstream: np.ndarray, out: np.ndarray | None = None) -> np.ndarray:
    xb, single = _as_batch(x, 4)
    gb, _ = _as_batch(upstream, 4)
    n, h, w, c = xb.shape
    quads = _pool_quads(xb)
    if out is None:
        out = np.maximum(np.maximum(quads[0], quads[1]), np.maximum(quads[2], quads[3]))
    if gb.shape != out.shape:
        raise ValueError(f"maxpool backward: upstream {gb.shape} does not match output {out.shape}")
    dx = np.zeros((n, h + h % 2, w + w % 2, c), dtype=gb.dtype)
    taken = np.zeros(out.shape, dtype=bool)
    for q, (i, j) in zip(quads, ((0, 0), (0, 1), (1, 0), (1, 1))):
        hit = (q == out) & ~taken
        taken |= hit
        dx[:, i::2, j::2] = gb * hit
    dx = dx[:, :h, :w, :]
    return dx[0] if single else dx


def relu(x: np.ndarray) -> np.ndarray:
    return np.maximum(x, 0).astype(np.asarray(x).dtype, copy=False)


def relu_backward(x: np.ndarray, upstream: np.ndarray) -> np.ndarray:
    return upstream * (x > 0)


def inner_product_forward(x: np.ndarray, weights: np.ndarray, bias: np.ndarray) -> np.ndarray:
    """``x @ weights + bias`` for a flat input of n elements (or a batch of them)."""
    xb, single = _as_batch(x, 2)
    if weights.ndim != 2 or xb.shape[1] != weights.shape[0]:
        raise ValueError(f"inner product mismatch: input has {xb.shape[1]} elements, weights are {weights.shape}")
    if bias.shape != (weights.shape[1],):
        raise ValueError(f"inner product bias must have shape ({weights.shape[1]},), got {bias.shape}")
    out = xb @ weights + bias
    return out[0] if single else out


def softmax(x: np.ndarray) -> np.ndarray:
    x = np.asarray(x)
    if x.shape[-1] < 1:
        raise ValueError("softmax needs at least one element")
    z = np.exp(x - x.max(axis=-1, keepdims=True))
    return z / z.sum(axis=-1, keepdims=True)


def softmax_backward(probs: np.ndarray, upstream: np.ndarray) -> np.ndarray:
    return probs * (upstream - (upstream * probs).sum(axis=-1, keepdims=True))


# ---------------------------------------------------------------------------
# losses


def categorical_crossentropy(probs: np.ndarray, target) -> tuple[float, np.ndarray]:
    """Mean ``-log p[target]`` and its gradient w.r.t. the pre-softmax logits.

    ``probs`` is a single probability vector or an (N, m) batch; ``target``
    an int or an int array.  The logit gradient is ``(p - onehot) / N``.
    """
    pb, _ = _as_batch(probs, 2)
    t = np.atleast_1d(np.asarray(target))
    n, m = pb.shape
    if t.shape != (n,):
        raise ValueError(f"expected {n} targets, got shape {t.shape}")
    if not np.issubdtype(t.dtype, np.integer) or t.min() < 0 or t.max() >= m:
        raise ValueError(f"target class out of range [0, {m}): {t}")
    picked = pb[np.arange(n), t].astype(np.float64)
    loss = float(-np.log(np.maximum(picked, LOG_CLAMP)).mean())
    grad = pb.copy()
    grad[np.arange(n), t] -= 1
    grad /= n
    return loss, grad.reshape(np.shape(probs))


def binary_crossentropy(score, target) -> tuple[float, np.ndarray]:
    """Mean binary cross-entropy of scores in [0, 1] and its gradient w.r.t. the scores."""
    s = np.atleast_1d(np.asarray(score, dtype=np.float64))
    t = np.atleast_1d(np.asarray(target))
    if s.shape != t.shape:
        raise ValueError(f"score/target shape mismatch: {s.shape} vs {t.shape}")
    if not np.all((t == 0) | (t == 1)):
        raise ValueError("binary targets must be 0 or 1")
    lo = np.maximum(s, LOG_CLAMP)
    hi = np.maximum(1 - s, LOG_CLAMP)
    loss = float(-(t * np.log(lo) + (1 - t) * np.log(hi)).mean())
    grad = (-t / lo + (1 - t) / hi) / s.size
    return loss, grad.reshape(np.shape(score))


def binary_crossentropy_on_head(probs: np.ndarray, target) -> tuple[float, np.ndarray]:
    """Binary cross-entropy on the first output of a 2-way softmax head.

    Returns the loss and the gradient w.r.t. the head's pre-softmax logits,
    ``(s - t) * [1, -1] / N``, which avoids the 0 * inf of chaining through
    a saturated softmax.
    """
    pb, _ = _as_batch(probs, 2)
    if pb.shape[1] != 2:
        raise ValueError(f"binary head must have 2 outputs, got {pb.shape[1]}")
    t = np.atleast_1d(np.asarray(target))
    loss, _ = binary_crossentropy(pb[:, 0], t)
    d = (pb[:, 0] - t).astype(pb.dtype) / len(t)
    return loss, np.stack([d, -d], axis=1)


# ---------------------------------------------------------------------------
# layers


class Layer:
    kind = "layer"

    def __init__(self, name: str = "", part: str = ""):
        self.name = name or self.kind
        self.part = part
        self.params: dict[str, np.ndarray] = {}
        self.grads: dict[str, np.ndarray] = {}
        self.frozen = False
        self.need_input_grad = True

    @property
    def has_params(self) -> bool:
        return bool(self.params)

    def zero_grad(self) -> None:
        for k, v in self.params.items():
            self.grads[k] = np.zeros_like(v)

    def describe(self) -> dict:
        return {"kind": self.kind, "name": self.name, "part": self.part}

    def output_shape(self, shape: tuple[int, ...]) -> tuple[int, ...]:
        return shape

    def forward(self, x: np.ndarray, train: bool = False) -> np.ndarray:
        raise NotImplementedError

    def backward(self, grad: np.ndarray) -> np.ndarray:
        raise NotImplementedError

    def clear_cache(self) -> None:
        for attr in ("_x", "_cols", "_y"):
            if hasattr(self, attr):
                setattr(self, attr, None)

    def __repr__(self) -> str:
        shapes = {k: v.shape for k, v in self.params.items()}
        flag = ", frozen" if self.frozen else ""
        return f"{type(self).__name__}({self.name!r}{', ' + str(shapes) if shapes else ''}{flag})"


class Conv2D(Layer):
    kind = "conv2d"
    chunk = 32  # batch items per im2col block; bounds memory, keeps BLAS calls cache-sized

    def __init__(self, weights: np.ndarray, bias: np.ndarray, name: str = "", part: str = ""):
        super().__init__(name, part)
        self.params = {"weights": weights, "bias": bias}
        self.zero_grad()
        self._x = self._cols = None

    @classmethod
    def init(cls, kh: int, kw: int, c: int, f: int, rng: np.random.Generator, gain: float = 3.0,
             **kwargs) -> "Conv2D":
        limit = np.sqrt(gain / (kh * kw * c))
        w = rng.uniform(-limit, limit, size=(kh, kw, c, f)).astype(DTYPE)
        return cls(w, np.zeros(f, DTYPE), **kwargs)

    def describe(self) -> dict:
        return {**super().describe(), "shape": list(self.params["weights"].shape)}

    def output_shape(self, shape):
        kh, kw, _, f = self.params["weights"].shape
        return (shape[0] - kh + 1, shape[1] - kw + 1, f)

    def forward(self, x, train=False):
        w, b = self.params["weights"], self.params["bias"]
        _check_conv_shapes(x, w, b)
        kh, kw, c, f = w.shape
        n, h, ww, _ = x.shape
        wm = w.reshape(-1, f)
        out = np.empty((n, h - kh + 1, ww - kw + 1, f), dtype=np.result_type(x.dtype, w.dtype))
        cols = []
        for s in range(0, n, self.chunk):
            cc = _im2col(x[s:s + self.chunk], kh, kw)
            out[s:s + self.chunk] = (cc @ wm + b).reshape((-1,) + out.shape[1:])
            if train and not self.frozen:
                cols.append(cc)
        if train:
            self._x, self._cols = x, cols
        return out

    def backward(self, grad):
        w = self.params["weights"]
        kh, kw, _, f = w.shape
        wm = w.reshape(-1, f)
        dx = np.empty(self._x.shape, dtype=grad.dtype) if self.need_input_grad else None
        dw = np.zeros(wm.shape, dtype=grad.dtype) if not self.frozen else None
        db = np.zeros(f, dtype=grad.dtype) if not self.frozen else None
        for k, s in enumerate(range(0, len(grad), self.chunk)):
            g2 = grad[s:s + self.chunk].reshape(-1, f)
            if not self.frozen:
                dw += self._cols[k].T @ g2
                db += g2.sum(axis=0)
            if dx is not None:
                dx[s:s + self.chunk] = _col2im(g2 @ wm.T, self._x[s:s + self.chunk].shape, kh, kw)
        if not self.frozen:
            self.grads["weights"], self.grads["bias"] = dw.reshape(w.shape), db
        return dx


class MaxPool2x2(Layer):
    kind = "maxpool2x2"

    def output_shape(self, shape):
        return (-(-shape[0] // 2), -(-shape[1] // 2), shape[2])

    def forward(self, x, train=False):
        y = maxpool2x2_forward(x)
        if train:
            self._x, self._y = x, y
        return y

    def backward(self, grad):
        return maxpool2x2_backward(self._x, grad, self._y)


class ReLU(Layer):
    kind = "relu"

    def forward(self, x, train=False):
        if train:
            self._x = x
        return relu(x)

    def backward(self, grad):
        return relu_backward(self._x, grad)


class Flatten(Layer):
    """Row-major (H, W, C) flattening."""

    kind = "flatten"

    def output_shape(self, shape):
        return (int(np.prod(shape)),)

    def forward(self, x, train=False):
        if train:
            self._x = x.shape
        return x.reshape(x.shape[0], -1)

    def backward(self, grad):
        return grad.reshape(self._x)


class InnerProduct(Layer):
    kind = "inner_product"

    def __init__(self, weights: np.ndarray, bias: np.ndarray, name: str = "", part: str = ""):
        super().__init__(name, part)
        self.params = {"weights": weights, "bias": bias}
        self.zero_grad()
        self._x = None

    @classmethod
    def init(cls, n_in: int, n_out: int, rng: np.random.Generator, gain: float = 3.0,
             **kw) -> "InnerProduct":
        limit = np.sqrt(gain / n_in)
        w = rng.uniform(-limit, limit, size=(n_in, n_out)).astype(DTYPE)
        return cls(w, np.zeros(n_out, DTYPE), **kw)

    def describe(self):
        return {**super().describe(), "shape": list(self.params["weights"].shape)}

    def output_shape(self, shape):
        n_in, n_out = self.params["weights"].shape
        if int(np.prod(shape)) != n_in:
            raise ValueError(f"{self.name}: expects {n_in} inputs, got shape {shape}")
        return (n_out,)

    def forward(self, x, train=False):
        if train:
            self._x = x
        return inner_product_forward(x, self.params["weights"], self.params["bias"])

    def backward(self, grad):
        w = self.params["weights"]
        if not self.frozen:
            self.grads["weights"] = self._x.T @ grad
            self.grads["bias"] = grad.sum(axis=0)
        return grad @ w.T if self.need_input_grad else None


class Softmax(Layer):
    kind = "softmax"

    def forward(self, x, train=False):
        y = softmax(x)
        if train:
            self._y = y
        return y

    def backward(self, grad):
        return softmax_backward(self._y, grad)


LAYER_KINDS = {cls.kind: cls for cls in (Conv2D, MaxPool2x2, ReLU, Flatten, InnerProduct, Softmax)}


def layer_from_description(desc: dict) -> Layer:
    """Rebuild a layer (with zeroed parameters) from :meth:`Layer.describe` output."""
    kind = desc.get("kind")
    if kind not in LAYER_KINDS:
        raise ValueError(f"unknown layer kind {kind!r}")
    cls = LAYER_KINDS[kind]
    kw = {"name": desc.get("name", ""), "part": desc.get("part", "")}
    if cls in (Conv2D, InnerProduct):
        shape = tuple(desc["shape"])
        return cls(np.zeros(shape, DTYPE), np.zeros(shape[-1], DTYPE), **kw)
    return cls(**kw)


# ---------------------------------------------------------------------------
# network


class Network:
    """Ordered layer stack with per-layer parameters, gradients and freeze flags."""

    def __init__(self, layers: list[Layer], name: str = "net", input_shape: tuple[int, ...] | None = None,
                 meta: dict | None = None):
        self.layers = list(layers)
        self.name = name
        self.input_shape = tuple(input_shape) if input_shape is not None else None
        self.meta = dict(meta or {})
        if self.input_shape is not None:
            self.shape_chain()

    def __repr__(self):
        return f"Network({self.name!r}, {len(self.layers)} layers, {self.num_parameters()} params)"

    def __getitem__(self, name: str) -> Layer:
        for layer in self.layers:
            if layer.name == name:
                return layer
        raise KeyError(name)

    @property
    def dtype(self):
        for layer in self.param_layers():
            return layer.params["weights"].dtype
        return np.dtype(DTYPE)

    def param_layers(self) -> list[Layer]:
        return [layer for layer in self.layers if layer.has_params]

    def num_parameters(self, trainable_only: bool = False) -> int:
        return sum(v.size for layer in self.param_layers() if not (trainable_only and layer.frozen)
                   for v in layer.params.values())

    def shape_chain(self, input_shape: tuple[int, ...] | None = None) -> list[tuple[int, ...]]:
        """Per-layer output shapes for a single sample; raises on incompatible dims."""
        shape = tuple(input_shape or self.input_shape)
        shapes = []
        for layer in self.layers:
            shape = layer.output_shape(shape)
            if any(d < 1 for d in shape):
                raise ValueError(f"layer {layer.name} produces invalid shape {shape}")
            shapes.append(shape)
        return shapes

    def describe(self) -> dict:
        return {"name": self.name, "input_shape": list(self.input_shape or ()),
                "layers": [layer.describe() for layer in self.layers],
                "frozen": [layer.frozen for layer in self.param_layers()], "meta": self.meta}

    @classmethod
    def from_description(cls, desc: dict) -> "Network":
        layers = [layer_from_description(d) for d in desc["layers"]]
        net = cls(layers, name=desc.get("name", "net"), input_shape=tuple(desc["input_shape"]) or None,
                  meta=desc.get("meta"))
        for layer, fz in zip(net.param_layers(), desc.get("frozen", [])):
            layer.frozen = bool(fz)
        return net

    def copy(self) -> "Network":
        for layer in self.layers:
            layer.clear_cache()
        return copy.deepcopy(self)

    def astype(self, dtype) -> "Network":
        net = self.copy()
        for layer in net.param_layers():
            for k in layer.params:
                layer.params[k] = layer.params[k].astype(dtype)
            layer.zero_grad()
        return net

    def get_weights(self) -> list[np.ndarray]:
        return [v.copy() for layer in self.param_layers() for v in layer.params.values()]

    def set_weights(self, weights: list[np.ndarray]) -> None:
        it = iter(weights)
        for layer in self.param_layers():
            for k, v in layer.params.items():
                new = np.asarray(next(it))
                if new.shape != v.shape:
                    raise ValueError(f"{layer.name}.{k}: shape {new.shape} != {v.shape}")
                layer.params[k] = new.astype(v.dtype, copy=True)

    def _trailing_softmax(self) -> bool:
        return bool(self.layers) and isinstance(self.layers[-1], Softmax)

    def forward(self, x: np.ndarray, train: bool = False, logits: bool = False) -> np.ndarray:
        """Batch forward pass; ``logits=True`` stops before a trailing softmax."""
        x = np.asarray(x)
        layers = self.layers[:-1] if logits and self._trailing_softmax() else self.layers
        if train:
            self._mark_input_grads()
        for layer in layers:
            x = layer.forward(x, train=train)
        return x

    def __call__(self, x):
        return self.forward(x)

    def predict_one(self, x: np.ndarray, logits: bool = False) -> np.ndarray:
        return self.forward(np.asarray(x)[None], logits=logits)[0]

    def predict(self, x: np.ndarray, logits: bool = False) -> np.ndarray:
        """Inference one sample at a time so results do not depend on batch composition."""
        x = np.asarray(x)
        if len(x) == 0:
            return np.zeros((0,) + self.shape_chain(x.shape[1:])[-1], dtype=self.dtype)
        return np.stack([self.predict_one(s, logits=logits) for s in x])

    def _mark_input_grads(self) -> None:
        # layers ahead of the first trainable one never need an input gradient
        seen_trainable = False
        for layer in self.layers:
            layer.need_input_grad = seen_trainable
            if layer.has_params and not layer.frozen:
                seen_trainable = True

    def backward(self, grad: np.ndarray, from_logits: bool = False) -> None:
        """Back-propagate ``grad`` (w.r.t. the output, or the logits if ``from_logits``)."""
        layers = self.layers[:-1] if from_logits and self._trailing_softmax() else self.layers
        for layer in layers:
            if layer.has_params:
                layer.zero_grad()
        for layer in reversed(layers):
            grad = layer.backward(grad)
            if grad is None:
                break

    def clear_cache(self) -> None:
        for layer in self.layers:
            layer.clear_cache()


# ---------------------------------------------------------------------------
# optimizers


class Adam:
    """Adam with bias-corrected moments; frozen layers are skipped entirely."""

    kind = "adam"

    def __init__(self, lr: float = 1e-3, beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8):
        self.lr, self.beta1, self.beta2, self.eps = lr, beta1, beta2, eps
        self.t = 0
        self.m: dict[tuple[int, str], np.ndarray] = {}
        self.v: dict[tuple[int, str], np.ndarray] = {}

    def current_lr(self) -> float:
        return self.lr

    def step(self, network: Network) -> None:
        self.t += 1
        b1, b2 = self.beta1, self.beta2
        c1 = 1 - b1 ** self.t
        c2 = 1 - b2 ** self.t
        for i, layer in enumerate(network.layers):
            if not layer.has_params or layer.frozen:
                continue
            for k, p in layer.params.items():
                g = layer.grads[k]
                key = (i, k)
                if key not in self.m:
                    self.m[key] = np.zeros_like(p)
                    self.v[key] = np.zeros_like(p)
                m = self.m[key]
                v = self.v[key]
                m *= b1
                m += (1 - b1) * g
                v *= b2
                v += (1 - b2) * g * g
                step = (m / c1) / (np.sqrt(v / c2) + self.eps)
                p -= (self.lr * step).astype(p.dtype, copy=False)


def triangular_lr(t: int, lr_min: float, lr_max: float, half_cycle_steps: int) -> float:
    """Triangular cyclic learning rate: lr_min at t=0, lr_max at t=half_cycle_steps, period 2*half."""
    if half_cycle_steps < 1:
        raise ValueError("half_cycle_steps must be >= 1")
    pos = t % (2 * half_cycle_steps)
    frac = pos / half_cycle_steps if pos <= half_cycle_steps else (2 * half_cycle_steps - pos) / half_cycle_steps
    return lr_min * (1 - frac) + lr_max * frac


class CyclicSGD:
    """Plain SGD under a triangular learning-rate wave between ``lr_min`` and ``lr_max``."""

    kind = "cyclic_sgd"

    def __init__(self, lr_min: float = 5e-5, lr_max: float = 15e-5, half_cycle_steps: int = 100):
        if not 0 < lr_min <= lr_max:
            raise ValueError("need 0 < lr_min <= lr_max")
        self.lr_min, self.lr_max, self.half_cycle_steps = lr_min, lr_max, half_cycle_steps
        self.t = 0
        self.trace: list[float] = []

    def current_lr(self) -> float:
        return triangular_lr(self.t, self.lr_min, self.lr_max, self.half_cycle_steps)

    def step(self, network: Network) -> None:
        lr = self.current_lr()
        self.trace.append(lr)
        for layer in network.layers:
            if not layer.has_params or layer.frozen:
                continue
            for k, p in layer.params.items():
                p -= (lr * layer.grads[k]).astype(p.dtype, copy=False)
        self.t += 1


# ---------------------------------------------------------------------------
# gradient checking

LossFn = Callable[[np.ndarray], "tuple[float, np.ndarray]"]


def quadratic_loss(target: np.ndarray) -> LossFn:
    """``0.5 * ||y - target||^2`` summed over the batch."""
    target = np.asarray(target, dtype=np.float64)

    def loss(y):
        d = y - target
        return float(0.5 * np.sum(d * d)), d
    return loss


def crossentropy_loss(target) -> LossFn:
    """Categorical cross-entropy on softmax outputs; gradient w.r.t. the outputs."""
    target = np.atleast_1d(target)

    def loss(p):
        n = len(target)
        picked = p[np.arange(n), target]
        g = np.zeros_like(p)
        g[np.arange(n), target] = -1.0 / (n * picked)
        return float(-np.log(picked).mean()), g
    return loss


def binary_head_loss(target) -> LossFn:
    """Binary cross-entropy on the first softmax output; gradient w.r.t. the outputs."""
    target = np.atleast_1d(target)

    def loss(p):
        value, ds = binary_crossentropy(p[:, 0], target)
        g = np.zeros_like(p)
        g[:, 0] = ds
        return value, g
    return loss


@dataclass
class GradientReport:
    errors: dict[str, float] = field(default_factory=dict)
    tolerance: float = 1e-3
    checked: dict[str, int] = field(default_factory=dict)
    shrunk: dict[str, int] = field(default_factory=dict)     # coordinates that needed a smaller step
    skipped: dict[str, int] = field(default_factory=dict)    # kink inside even the smallest step

    @property
    def max_error(self) -> float:
        return max(self.errors.values(), default=0.0)

    @property
    def passed(self) -> bool:
        return self.max_error < self.tolerance


def _forward_with_pattern(net: Network, x: np.ndarray) -> tuple[np.ndarray, list[np.ndarray]]:
    """Forward pass plus the piecewise-linear "activation pattern" (pool argmaxes, ReLU signs)."""
    pattern = []
    for layer in net.layers:
        if isinstance(layer, MaxPool2x2):
            pattern.append(np.argmax(np.stack(_pool_quads(x)), axis=0).astype(np.int8))
        elif isinstance(layer, ReLU):
            pattern.append(x > 0)
        x = layer.forward(x)
    return x, pattern


def _same_pattern(a: list[np.ndarray], b: list[np.ndarray]) -> bool:
    return all(np.array_equal(u, v) for u, v in zip(a, b))


def gradient_check(network: Network, x: np.ndarray, loss_fn: LossFn, epsilon: float = 1e-3,
                   tolerance: float = 1e-3, max_coords: int | None = None, seed: int = 0,
                   dtype=np.float64, kink_retries: int = 3) -> GradientReport:
    """Compare analytic and central-difference gradients for every unfrozen parameter.

    The check runs on a copy of ``network`` cast to ``dtype`` (float64 by
    default; float32 rounding swamps the finite differences).  With
    ``max_coords`` set, that many coordinates per tensor are sampled instead
    of checking all of them.  Relative error is
    ``|a - n| / max(|a|, |n|, 1e-8)``.

    Max pooling and ReLU make the loss piecewise smooth.  When the +/- step
    changes a pooling argmax or a ReLU sign, the difference quotient straddles
    a kink and says nothing about the derivative, so the step is divided by
    10 (up to ``kink_retries`` times).  Coordinates that still straddle a kink
    are counted in ``skipped`` and left out of the error.
    """
    net = network.astype(dtype)
    x = np.asarray(x, dtype=dtype)
    report = GradientReport(tolerance=tolerance)
    if all(layer.frozen for layer in net.param_layers()):
        return report
    _, gout = loss_fn(net.forward(x, train=True))
    net.backward(gout)
    _, base_pattern = _forward_with_pattern(net, x)
    rng = make_rng(seed)
    for layer in net.param_layers():
        if layer.frozen:
            continue
        worst, count, shrunk, skipped = 0.0, 0, 0, 0
        for k, p in layer.params.items():
            analytic = layer.grads[k].copy()
            flat = p.reshape(-1)
            idx = np.arange(flat.size)
            if max_coords is not None and flat.size > max_coords:
                idx = np.sort(rng.choice(flat.size, size=max_coords, replace=False))
            for i in idx:
                old = flat[i]
                eps, num = epsilon, None
                for attempt in range(kink_retries + 1):
                    flat[i] = old + eps
                    yp, pat_p = _forward_with_pattern(net, x)
                    flat[i] = old - eps
                    ym, pat_m = _forward_with_pattern(net, x)
                    flat[i] = old
                    if _same_pattern(pat_p, base_pattern) and _same_pattern(pat_m, base_pattern):
                        num = (loss_fn(yp)[0] - loss_fn(ym)[0]) / (2 * eps)
                        shrunk += attempt > 0
                        break
                    eps /= 10
                if num is None:
                    skipped += 1
                    continue
                a = analytic.reshape(-1)[i]
                err = abs(a - num) / max(abs(a), abs(num), 1e-8)
                worst = max(worst, float(err))
                count += 1
        report.errors[layer.name] = worst
        report.checked[layer.name] = count
        report.shrunk[layer.name] = shrunk
        report.skipped[layer.name] = skipped
    return report
