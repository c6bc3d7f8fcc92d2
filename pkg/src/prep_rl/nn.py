"""Small numpy network core: the fixed layer menu used by the classifier and
Q-network bodies, Adam with L2, softmax cross-entropy and parameter files.

Activations are batched and channels-last, i.e. images arrive as (N, H, W, C).
"""
from __future__ import annotations

import struct
from dataclasses import dataclass, field

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

LAYER_KINDS = ("conv2d", "maxpool2d", "batchnorm", "relu", "flatten", "dense")


@dataclass
class LayerSpec:
    kind: str
    filters: int | None = None
    kernel: int = 3
    pad: int = 0
    units: int | None = None

    def __post_init__(self):
        if self.kind not in LAYER_KINDS:
            raise ValueError(f"unknown layer kind {self.kind!r}")
        if self.kind == "conv2d" and not self.filters:
            raise ValueError("conv2d needs a positive filter count")
        if self.kind == "dense" and not self.units:
            raise ValueError("dense needs a positive unit count")


@dataclass
class NetworkSpec:
    layers: list[LayerSpec]
    input_shape: tuple[int, ...]
    head: str = "classifier"
    outputs: int | None = None


# ---------------------------------------------------------------------------
# layers


class Layer:
    kind = ""

    def __init__(self):
        self.params: dict[str, np.ndarray] = {}
        self.grads: dict[str, np.ndarray] = {}
        self.buffers: dict[str, np.ndarray] = {}
        self._cache = None

    def output_shape(self, in_shape):
        return in_shape

    def forward(self, x, train=False):
        raise NotImplementedError

    def backward(self, dout):
        raise NotImplementedError


def _fan_in_uniform(rng, shape, fan_in, dtype):
    limit = np.sqrt(6.0 / fan_in)
    return rng.uniform(-limit, limit, size=shape).astype(dtype)


class Conv2D(Layer):
    """3x3 (or k x k) convolution, stride 1, optional zero padding."""

    kind = "conv2d"

    def __init__(self, in_channels, filters, kernel=3, pad=0, rng=None, dtype=np.float32):
        super().__init__()
        self.kernel, self.pad = kernel, pad
        rng = rng if rng is not None else np.random.default_rng()
        fan_in = kernel * kernel * in_channels
        self.params["W"] = _fan_in_uniform(rng, (kernel, kernel, in_channels, filters), fan_in, dtype)
        self.params["b"] = np.zeros(filters, dtype=dtype)

    def output_shape(self, in_shape):
        h, w, c = in_shape
        kh, kw, cin, f = self.params["W"].shape
        if c != cin:
            raise ValueError(f"expects {cin} input channels, got {c}")
        ho, wo = h + 2 * self.pad - kh + 1, w + 2 * self.pad - kw + 1
        if ho < 1 or wo < 1:
            raise ValueError(f"input {h}x{w} too small for {kh}x{kw} kernel")
        return (ho, wo, f)

    def forward(self, x, train=False):
        W, b = self.params["W"], self.params["b"]
        kh, kw, cin, f = W.shape
        p = self.pad
        xp = np.pad(x, ((0, 0), (p, p), (p, p), (0, 0))) if p else x
        win = sliding_window_view(xp, (kh, kw), axis=(1, 2))  # N, Ho, Wo, C, kh, kw
        n, ho, wo = win.shape[:3]
        cols = win.transpose(0, 1, 2, 4, 5, 3).reshape(n * ho * wo, kh * kw * cin)
        out = cols @ W.reshape(-1, f) + b
        self._cache = (x.shape, cols)
        return out.reshape(n, ho, wo, f)

    def backward(self, dout):
        x_shape, cols = self._cache
        W = self.params["W"]
        kh, kw, cin, f = W.shape
        n, ho, wo, _ = dout.shape
        d2 = dout.reshape(-1, f)
        self.grads["W"] = (cols.T @ d2).reshape(W.shape)
        self.grads["b"] = d2.sum(axis=0)
        dcols = (d2 @ W.reshape(-1, f).T).reshape(n, ho, wo, kh, kw, cin)
        p = self.pad
        dxp = np.zeros((n, x_shape[1] + 2 * p, x_shape[2] + 2 * p, cin), dtype=dout.dtype)
        for i in range(kh):
            for j in range(kw):
                dxp[:, i:i + ho, j:j + wo, :] += dcols[:, :, :, i, j, :]
        if p:
            dxp = dxp[:, p:-p, p:-p, :]
        return dxp


class MaxPool2D(Layer):
    """2x2 max pooling with stride 2; odd trailing rows/columns are dropped."""

    kind = "maxpool2d"

    def output_shape(self, in_shape):
        h, w, c = in_shape
        if h < 2 or w < 2:
            raise ValueError(f"input {h}x{w} too small for 2x2 pooling")
        return (h // 2, w // 2, c)

    def forward(self, x, train=False):
        n, h, w, c = x.shape
        ho, wo = h // 2, w // 2
        blocks = x[:, :2 * ho, :2 * wo, :].reshape(n, ho, 2, wo, 2, c)
        blocks = blocks.transpose(0, 1, 3, 5, 2, 4).reshape(n, ho, wo, c, 4)
        idx = blocks.argmax(axis=-1)
        self._cache = (x.shape, idx)
        return np.take_along_axis(blocks, idx[..., None], axis=-1)[..., 0]

    def backward(self, dout):
        x_shape, idx = self._cache
        n, h, w, c = x_shape
        ho, wo = h // 2, w // 2
        dblocks = np.zeros((n, ho, wo, c, 4), dtype=dout.dtype)
        np.put_along_axis(dblocks, idx[..., None], dout[..., None], axis=-1)
        dblocks = dblocks.reshape(n, ho, wo, c, 2, 2).transpose(0, 1, 4, 2, 5, 3)
        dx = np.zeros(x_shape, dtype=dout.dtype)
        dx[:, :2 * ho, :2 * wo, :] = dblocks.reshape(n, 2 * ho, 2 * wo, c)
        return dx


class BatchNorm(Layer):
    """Per-channel batch normalization over every axis but the last.

    Training mode normalizes with batch statistics and updates the running
    averages; inference mode uses the running averages only.
    """

    kind = "batchnorm"

    def __init__(self, channels, momentum=0.9, eps=1e-5, dtype=np.float32):
        super().__init__()
        self.momentum, self.eps = momentum, eps
        self.params["gamma"] = np.ones(channels, dtype=dtype)
        self.params["beta"] = np.zeros(channels, dtype=dtype)
        self.buffers["running_mean"] = np.zeros(channels, dtype=dtype)
        self.buffers["running_var"] = np.ones(channels, dtype=dtype)

    def forward(self, x, train=False):
        axes = tuple(range(x.ndim - 1))
        gamma, beta = self.params["gamma"], self.params["beta"]
        if train:
            mean = x.mean(axis=axes)
            var = x.var(axis=axes)
            m = self.momentum
            self.buffers["running_mean"] = (m * self.buffers["running_mean"] + (1 - m) * mean).astype(x.dtype)
            self.buffers["running_var"] = (m * self.buffers["running_var"] + (1 - m) * var).astype(x.dtype)
        else:
            mean, var = self.buffers["running_mean"], self.buffers["running_var"]
        inv_std = 1.0 / np.sqrt(var + self.eps)
        xhat = (x - mean) * inv_std
        self._cache = (xhat, inv_std, train)
        return gamma * xhat + beta

    def backward(self, dout):
        xhat, inv_std, train = self._cache
        axes = tuple(range(dout.ndim - 1))
        gamma = self.params["gamma"]
        self.grads["gamma"] = (dout * xhat).sum(axis=axes)
        self.grads["beta"] = dout.sum(axis=axes)
        dxhat = dout * gamma
        if not train:
            return dxhat * inv_std
        m = dout.size // dout.shape[-1]
        return inv_std / m * (m * dxhat - dxhat.sum(axis=axes) - xhat * (dxhat * xhat).sum(axis=axes))


class ReLU(Layer):
    kind = "relu"

    def forward(self, x, train=False):
        mask = x > 0
        self._cache = mask
        return x * mask

    def backward(self, dout):
        return dout * self._cache


class Flatten(Layer):
    kind = "flatten"

    def output_shape(self, in_shape):
        return (int(np.prod(in_shape)),)

    def forward(self, x, train=False):
        self._cache = x.shape
        return x.reshape(x.shape[0], -1)

    def backward(self, dout):
        return dout.reshape(self._cache)


class Dense(Layer):
    kind = "dense"

    def __init__(self, in_features, units, rng=None, dtype=np.float32):
        super().__init__()
        rng = rng if rng is not None else np.random.default_rng()
        self.params["W"] = _fan_in_uniform(rng, (in_features, units), in_features, dtype)
        self.params["b"] = np.zeros(units, dtype=dtype)

    def output_shape(self, in_shape):
        if len(in_shape) != 1:
            raise ValueError(f"dense expects a flat input, got shape {in_shape}")
        if in_shape[0] != self.params["W"].shape[0]:
            raise ValueError(f"dense expects {self.params['W'].shape[0]} features, got {in_shape[0]}")
        return (self.params["W"].shape[1],)

    def forward(self, x, train=False):
        self._cache = x
        return x @ self.params["W"] + self.params["b"]

    def backward(self, dout):
        x = self._cache
        self.grads["W"] = x.T @ dout
        self.grads["b"] = dout.sum(axis=0)
        return dout @ self.params["W"].T


def build_layer(spec: LayerSpec, in_shape, rng, dtype):
    if spec.kind == "conv2d":
        return Conv2D(in_shape[-1], spec.filters, spec.kernel, spec.pad, rng=rng, dtype=dtype)
    if spec.kind == "maxpool2d":
        return MaxPool2D()
    if spec.kind == "batchnorm":
        return BatchNorm(in_shape[-1], dtype=dtype)
    if spec.kind == "relu":
        return ReLU()
    if spec.kind == "flatten":
        return Flatten()
    if in_shape is not None and len(in_shape) != 1:
        raise ValueError(f"dense layer needs a flat input, got shape {in_shape}")
    return Dense(in_shape[0], spec.units, rng=rng, dtype=dtype)


# ---------------------------------------------------------------------------
# networks


class Network:
    """A feed-forward stack of layers built from a :class:`NetworkSpec`.

    ``forward`` keeps the per-layer caches needed by exactly one following
    ``backward`` call.
    """

    def __init__(self, spec: NetworkSpec, seed=0, dtype=np.float32):
        self.spec = spec
        self.dtype = np.dtype(dtype)
        self.input_shape = tuple(spec.input_shape)
        rng = np.random.default_rng(seed)
        self.layers: list[Layer] = []
        self.shapes = [self.input_shape]
        shape = self.input_shape
        for i, ls in enumerate(spec.layers):
            try:
                layer = build_layer(ls, shape, rng, self.dtype)
                shape = layer.output_shape(shape)
            except ValueError as exc:
                raise ValueError(f"layer {i} ({ls.kind}): {exc}") from None
            self.layers.append(layer)
            self.shapes.append(shape)
        self.output_shape = shape
        if spec.outputs is not None and shape != (spec.outputs,):
            raise ValueError(f"network output shape {shape} does not match head size {spec.outputs}")
        self._ready = False

    def forward(self, x, train=False):
        x = np.asarray(x, dtype=self.dtype)
        if x.shape[1:] != self.input_shape:
            raise ValueError(f"layer 0 ({self.layers[0].kind if self.layers else 'input'}): "
                             f"input shape {x.shape[1:]} does not match {self.input_shape}")
        for layer in self.layers:
            x = layer.forward(x, train)
        self._ready = True
        return x

    def backward(self, dout):
        """Backpropagate ``dout``; returns the gradient w.r.t. the input.

        Parameter gradients are left in each layer's ``grads`` (see ``grads()``).
        """
        if not self._ready:
            raise RuntimeError("backward called without a preceding forward")
        dout = np.asarray(dout, dtype=self.dtype)
        expected = self.output_shape
        if dout.shape[1:] != expected:
            raise ValueError(f"loss gradient shape {dout.shape[1:]} does not match output {expected}")
        for layer in reversed(self.layers):
            dout = layer.backward(dout)
        self._ready = False
        return dout

    def named(self, attr):
        out = {}
        for i, layer in enumerate(self.layers):
            for name, arr in getattr(layer, attr).items():
                out[f"{i}.{layer.kind}.{name}"] = arr
        return out

    def params(self):
        return self.named("params")

    def grads(self):
        return self.named("grads")

    def buffers(self):
        return self.named("buffers")

    def state(self):
        """Parameters plus running statistics, for checkpointing."""
        return {**self.params(), **self.buffers()}

    def load_state(self, tensors):
        for i, layer in enumerate(self.layers):
            for attr in ("params", "buffers"):
                d = getattr(layer, attr)
                for name in d:
                    key = f"{i}.{layer.kind}.{name}"
                    if key not in tensors:
                        raise KeyError(f"missing tensor {key!r}")
                    arr = np.asarray(tensors[key])
                    if arr.shape != d[name].shape:
                        raise ValueError(f"tensor {key!r} has shape {arr.shape}, expected {d[name].shape}")
                    d[name] = arr.astype(self.dtype, copy=True)

    def predict(self, x, batch_size=256):
        return np.concatenate([self.forward(x[i:i + batch_size]) for i in range(0, len(x), batch_size)])


ARCHITECTURES = ("arch1", "arch2", "arch3")


def arch_body(name):
    """Layer specs of a preset body, up to (not including) the output layer."""
    conv = lambda f: LayerSpec("conv2d", filters=f, kernel=3, pad=1)
    if name == "arch1":
        return [conv(8), LayerSpec("relu"), LayerSpec("maxpool2d"), LayerSpec("flatten")]
    if name == "arch2":
        return [conv(16), LayerSpec("relu"), LayerSpec("maxpool2d"),
                conv(32), LayerSpec("relu"), LayerSpec("maxpool2d"),
                LayerSpec("flatten"), LayerSpec("dense", units=128), LayerSpec("relu")]
    if name == "arch3":
        layers = []
        for f in (16, 32, 64):
            layers += [conv(f), LayerSpec("batchnorm"), LayerSpec("relu"), LayerSpec("maxpool2d")]
        return layers + [LayerSpec("flatten"), LayerSpec("dense", units=128), LayerSpec("relu")]
    raise ValueError(f"unknown architecture {name!r}; choose from {ARCHITECTURES}")


def classifier_spec(arch, input_shape, k):
    return NetworkSpec(arch_body(arch) + [LayerSpec("dense", units=k)], tuple(input_shape), "classifier", k)


def build_classifier(arch, input_shape, k, seed=0, dtype=np.float32):
    return Network(classifier_spec(arch, input_shape, k), seed=seed, dtype=dtype)


# ---------------------------------------------------------------------------
# loss and optimizer


def softmax(logits):
    z = logits - logits.max(axis=-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True)


def softmax_cross_entropy(logits, label):
    """Loss and gradient for one logit vector, or a batch averaged over rows."""
    logits = np.asarray(logits)
    single = logits.ndim == 1
    z = logits[None] if single else logits
    labels = np.atleast_1d(np.asarray(label))
    k = z.shape[-1]
    if labels.shape != (z.shape[0],):
        raise ValueError("need one label per logit row")
    if np.any(labels < 0) or np.any(labels >= k):
        raise ValueError(f"label out of range for {k} classes: {labels}")
    shifted = z - z.max(axis=1, keepdims=True)
    log_norm = np.log(np.exp(shifted).sum(axis=1))
    rows = np.arange(len(labels))
    losses = log_norm - shifted[rows, labels]
    grad = softmax(z)
    grad[rows, labels] -= 1
    if single:
        return float(losses[0]), grad[0]
    return float(losses.mean()), grad / len(labels)


def l2_mask(name):
    """Weight decay only touches conv/dense kernels."""
    return name.endswith(".W")


@dataclass
class Adam:
    lr: float = 1e-4
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    l2: float = 0.0
    t: int = 0
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)

    def step(self, params, grads):
        """Update ``params`` in place. L2 enters as ``l2 * w`` added to kernel gradients."""
        for name, g in grads.items():
            if not np.all(np.isfinite(g)):
                raise FloatingPointError(f"non-finite gradient for {name!r} at step {self.t + 1}")
        self.t += 1
        bc1 = 1.0 - self.beta1 ** self.t
        bc2 = 1.0 - self.beta2 ** self.t
        for name, p in params.items():
            g = grads[name]
            if g.shape != p.shape:
                raise ValueError(f"gradient for {name!r} has shape {g.shape}, parameter {p.shape}")
            if self.l2 and l2_mask(name):
                g = g + self.l2 * p
            if name not in self.m:
                self.m[name] = np.zeros_like(p)
                self.v[name] = np.zeros_like(p)
            m, v = self.m[name], self.v[name]
            m *= self.beta1
            m += (1 - self.beta1) * g
            v *= self.beta2
            v += (1 - self.beta2) * (g * g)
            p -= (self.lr * (m / bc1) / (np.sqrt(v / bc2) + self.eps)).astype(p.dtype)
        return params


def adam_step(opt: Adam, params, grads):
    return opt.step(params, grads)


# ---------------------------------------------------------------------------
# parameter files

MAGIC = b"PRLNET1"
_DTYPE_TAGS = {np.dtype("<f4"): 0, np.dtype("<f8"): 1}
_TAG_DTYPES = {v: k for k, v in _DTYPE_TAGS.items()}


def save_tensors(path, tensors: dict, dtype=None):
    """Write named tensors: magic, dtype tag (u8), count (u32), then per tensor
    name length (u32), utf-8 name, rank (u32), dims (u32 each), raw LE data."""
    arrays = {k: np.asarray(v) for k, v in tensors.items()}
    dt = np.dtype(dtype or (next(iter(arrays.values())).dtype if arrays else np.float32)).newbyteorder("<")
    if dt not in _DTYPE_TAGS:
        raise ValueError(f"unsupported dtype {dt}")
    with open(path, "wb") as f:
        f.write(MAGIC)
        f.write(struct.pack("<BI", _DTYPE_TAGS[dt], len(arrays)))
        for name, arr in arrays.items():
            raw = name.encode("utf-8")
            f.write(struct.pack("<I", len(raw)))
            f.write(raw)
            f.write(struct.pack("<I", arr.ndim))
            f.write(struct.pack(f"<{arr.ndim}I", *arr.shape))
            f.write(np.ascontiguousarray(arr, dtype=dt).tobytes())


def load_tensors(path):
    with open(path, "rb") as f:
        blob = f.read()
    if blob[:len(MAGIC)] != MAGIC:
        raise ValueError(f"{path}: not a parameter file (bad magic)")
    pos = len(MAGIC)

    def take(fmt):
        nonlocal pos
        size = struct.calcsize(fmt)
        if pos + size > len(blob):
            raise ValueError(f"{path}: truncated at byte {pos}")
        vals = struct.unpack_from(fmt, blob, pos)
        pos += size
        return vals

    tag, count = take("<BI")
    if tag not in _TAG_DTYPES:
        raise ValueError(f"{path}: unknown dtype tag {tag}")
    dt = _TAG_DTYPES[tag]
    out = {}
    for _ in range(count):
        (nlen,) = take("<I")
        if pos + nlen > len(blob):
            raise ValueError(f"{path}: truncated at byte {pos}")
        name = blob[pos:pos + nlen].decode("utf-8")
        pos += nlen
        (rank,) = take("<I")
        dims = take(f"<{rank}I")
        nbytes = int(np.prod(dims, dtype=np.int64)) * dt.itemsize
        if pos + nbytes > len(blob):
            raise ValueError(f"{path}: truncated in tensor {name!r} at byte {pos}")
        out[name] = np.frombuffer(blob, dtype=dt, count=int(np.prod(dims)), offset=pos).reshape(dims).copy()
        pos += nbytes
    return out
