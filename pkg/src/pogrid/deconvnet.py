"""Convolution / transposed-convolution network with a per-pixel softmax head.

Tensors are channels-last: a single image is (H, W, C) and a batch is
(N, H, W, C). A kernel tensor is (A, k1, k2, D): A output maps of a
convolution reading D input channels. The transposed convolution with the
same kernel tensor maps A channels back to D and is the exact adjoint of
the convolution.
"""

from __future__ import annotations

import logging
import math
import struct
from dataclasses import dataclass, field, replace

import numpy as np

from .autoencoder import TrainingDiverged, TrainSpec
from .grid import LEVELS, AugmentedOccupancyGrid, GridConfig, QuantizedPog

log = logging.getLogger(__name__)

LOG_FLOOR = 1e-12
_F32_MAX = float(np.finfo(np.float32).max)
ACTIVATIONS = ("relu", "linear")
PADDINGS = ("same", "valid")


def _geometry(size: int, k: int, stride: int, padding: str) -> tuple[int, int, int]:
    """(output size, pad before, pad after) of a convolution along one axis."""
    if padding == "same":
        out = -(-size // stride)
        total = max((out - 1) * stride + k - size, 0)
        return out, total // 2, total - total // 2
    if padding == "valid":
        if size < k:
            raise ValueError(f"input size {size} smaller than kernel {k}")
        return (size - k) // stride + 1, 0, 0
    raise ValueError(f"unknown padding {padding!r}")


def transposed_size(size: int, k: int, stride: int, padding: str) -> int:
    """Spatial size produced by a transposed convolution of ``size`` inputs."""
    return size * stride if padding == "same" else (size - 1) * stride + k


def _pad(x, ph, pw):
    if ph == (0, 0) and pw == (0, 0):
        return x
    return np.pad(x, ((0, 0), ph, pw, (0, 0)))


def conv2d(x: np.ndarray, K: np.ndarray, stride: int = 1, padding: str = "same") -> np.ndarray:
    """Batched cross-correlation without bias: (N, H, W, D) -> (N, H', W', A)."""
    N, H, W, D = x.shape
    A, k1, k2, Dk = K.shape
    if D != Dk:
        raise ValueError(f"input has {D} channels, kernel expects {Dk}")
    Ho, pt, pb = _geometry(H, k1, stride, padding)
    Wo, pl, pr = _geometry(W, k2, stride, padding)
    xp = _pad(x, (pt, pb), (pl, pr))
    out = np.zeros((N, Ho, Wo, A))
    for m in range(k1):
        for n in range(k2):
            patch = xp[:, m:m + stride * (Ho - 1) + 1:stride, n:n + stride * (Wo - 1) + 1:stride, :]
            out += patch @ K[:, m, n, :].T
    return out


def conv2d_transpose(y: np.ndarray, K: np.ndarray, stride: int, padding: str,
                     out_hw: tuple[int, int]) -> np.ndarray:
    """Adjoint of :func:`conv2d`: (N, H', W', A) -> (N, H, W, D)."""
    N, Ho, Wo, A = y.shape
    Ak, k1, k2, D = K.shape
    if A != Ak:
        raise ValueError(f"input has {A} channels, kernel expects {Ak}")
    H, W = out_hw
    h_chk, pt, pb = _geometry(H, k1, stride, padding)
    w_chk, pl, pr = _geometry(W, k2, stride, padding)
    if (h_chk, w_chk) != (Ho, Wo):
        raise ValueError(f"{Ho}x{Wo} input cannot come from a {H}x{W} convolution input")
    xp = np.zeros((N, H + pt + pb, W + pl + pr, D))
    # reversed offsets: every output pixel accumulates in increasing input-index order
    for m in reversed(range(k1)):
        for n in reversed(range(k2)):
            xp[:, m:m + stride * (Ho - 1) + 1:stride, n:n + stride * (Wo - 1) + 1:stride, :] += y @ K[:, m, n, :]
    return xp[:, pt:pt + H, pl:pl + W, :]


def conv2d_kernel_grad(x: np.ndarray, dy: np.ndarray, k1: int, k2: int, stride: int,
                       padding: str) -> np.ndarray:
    """d<conv2d(x, K), dy>/dK, shape (A, k1, k2, D)."""
    N, H, W, D = x.shape
    _, Ho, Wo, A = dy.shape
    _, pt, pb = _geometry(H, k1, stride, padding)
    _, pl, pr = _geometry(W, k2, stride, padding)
    xp = _pad(x, (pt, pb), (pl, pr))
    g = np.zeros((A, k1, k2, D))
    dyf = dy.reshape(-1, A)
    for m in range(k1):
        for n in range(k2):
            patch = xp[:, m:m + stride * (Ho - 1) + 1:stride, n:n + stride * (Wo - 1) + 1:stride, :]
            g[:, m, n, :] = dyf.T @ patch.reshape(-1, D)
    return g


def _activate(name, z):
    return np.maximum(z, 0.0) if name == "relu" else z


def _activate_grad(name, out, d):
    return d * (out > 0) if name == "relu" else d


@dataclass(frozen=True, eq=False)
class ConvLayer:
    kernels: np.ndarray
    bias: np.ndarray
    stride: int = 1
    activation: str = "relu"
    padding: str = "same"

    def __post_init__(self):
        K = np.asarray(self.kernels, dtype=np.float64)
        if K.ndim != 4 or min(K.shape) < 1:
            raise ValueError("kernels must be a non-empty (A, k1, k2, D) tensor")
        if self.stride < 1:
            raise ValueError("stride must be >= 1")
        if self.activation not in ACTIVATIONS or self.padding not in PADDINGS:
            raise ValueError("bad activation or padding")
        b = np.asarray(self.bias, dtype=np.float64)
        if b.shape != (self.n_bias(K),):
            raise ValueError(f"bias must have length {self.n_bias(K)}")
        object.__setattr__(self, "kernels", K)
        object.__setattr__(self, "bias", b)

    @staticmethod
    def n_bias(K):
        return K.shape[0]

    @property
    def kernel_hw(self):
        return self.kernels.shape[1:3]

    def output_shape(self, shape):
        H, W, D = shape
        if D != self.kernels.shape[3]:
            raise ValueError(f"conv layer expects {self.kernels.shape[3]} channels, got {D}")
        k1, k2 = self.kernel_hw
        return (_geometry(H, k1, self.stride, self.padding)[0],
                _geometry(W, k2, self.stride, self.padding)[0], self.kernels.shape[0])


@dataclass(frozen=True, eq=False)
class DeconvLayer(ConvLayer):
    """Transposed convolution: reads ``kernels.shape[0]`` channels, writes ``kernels.shape[3]``."""

    @staticmethod
    def n_bias(K):
        return K.shape[3]

    def output_shape(self, shape):
        H, W, A = shape
        if A != self.kernels.shape[0]:
            raise ValueError(f"deconv layer expects {self.kernels.shape[0]} channels, got {A}")
        k1, k2 = self.kernel_hw
        return (transposed_size(H, k1, self.stride, self.padding),
                transposed_size(W, k2, self.stride, self.padding), self.kernels.shape[3])


def conv_forward(layer: ConvLayer, x: np.ndarray) -> np.ndarray:
    """Activated feature maps of one (H, W, D) input."""
    x = np.asarray(x, dtype=np.float64)
    if x.ndim != 3:
        raise ValueError("conv_forward takes one (H, W, D) tensor")
    layer.output_shape(x.shape)
    z = conv2d(x[None], layer.kernels, layer.stride, layer.padding)[0] + layer.bias
    return _activate(layer.activation, z)


def deconv_forward(layer: DeconvLayer, y: np.ndarray) -> np.ndarray:
    y = np.asarray(y, dtype=np.float64)
    if y.ndim != 3:
        raise ValueError("deconv_forward takes one (H, W, A) tensor")
    H, W, _ = layer.output_shape(y.shape)
    z = conv2d_transpose(y[None], layer.kernels, layer.stride, layer.padding, (H, W))[0] + layer.bias
    return _activate(layer.activation, z)


def build_sparse_conv_matrix(kernel: np.ndarray, input_dims: tuple[int, int], stride: int = 1,
                             padding: str = "valid") -> np.ndarray:
    """Dense matrix S with vec(conv(x)) = S vec(x) for one-channel 2-D inputs (row-major vec).

    Meant for small cases only; the matrix has H'W' x HW entries.
    """
    kernel = np.asarray(kernel, dtype=np.float64)
    if kernel.ndim == 4:
        if kernel.shape[0] != 1 or kernel.shape[3] != 1:
            raise ValueError("sparse matrix construction supports single-channel kernels")
        kernel = kernel[0, :, :, 0]
    k1, k2 = kernel.shape
    H, W = input_dims
    Ho, pt, _ = _geometry(H, k1, stride, padding)
    Wo, pl, _ = _geometry(W, k2, stride, padding)
    S = np.zeros((Ho * Wo, H * W))
    for i in range(Ho):
        for j in range(Wo):
            for m in range(k1):
                for n in range(k2):
                    r, c = i * stride + m - pt, j * stride + n - pl
                    if 0 <= r < H and 0 <= c < W:
                        S[i * Wo + j, r * W + c] = kernel[m, n]
    return S


def pixel_softmax(logits: np.ndarray) -> np.ndarray:
    z = np.asarray(logits, dtype=np.float64)
    if not np.all(np.isfinite(z)):
        raise ValueError("non-finite logits")
    e = np.exp(z - z.max(axis=-1, keepdims=True))
    return e / e.sum(axis=-1, keepdims=True)


def cross_entropy_loss(pred: np.ndarray, truth: np.ndarray) -> float:
    """Mean over pixels of -sum_k y_k log(yhat_k), with log clamped at 1e-12."""
    pred = np.asarray(pred, dtype=np.float64)
    truth = np.asarray(truth, dtype=np.float64)
    if pred.shape != truth.shape:
        raise ValueError(f"shape mismatch {pred.shape} vs {truth.shape}")
    per_pixel = -np.sum(truth * np.log(np.maximum(pred, LOG_FLOOR)), axis=-1)
    return float(per_pixel.mean())


@dataclass(frozen=True, eq=False)
class ConvNetModel:
    """conv -> conv -> fully connected -> reshape -> deconv -> deconv -> softmax."""

    input_shape: tuple[int, int, int]
    convs: tuple[ConvLayer, ...]
    fc_weights: np.ndarray
    fc_bias: np.ndarray
    deconvs: tuple[DeconvLayer, ...]
    fc_activation: str = "relu"
    shapes: tuple = field(init=False, repr=False)

    def __post_init__(self):
        object.__setattr__(self, "input_shape", tuple(int(v) for v in self.input_shape))
        object.__setattr__(self, "convs", tuple(self.convs))
        object.__setattr__(self, "deconvs", tuple(self.deconvs))
        object.__setattr__(self, "fc_weights", np.asarray(self.fc_weights, dtype=np.float64))
        object.__setattr__(self, "fc_bias", np.asarray(self.fc_bias, dtype=np.float64))
        if not self.convs or not self.deconvs:
            raise ValueError("need at least one conv and one deconv layer")
        shapes = [self.input_shape]
        for c in self.convs:
            shapes.append(c.output_shape(shapes[-1]))
        H, W, A = shapes[-1]
        fc_out, fc_in = self.fc_weights.shape
        if fc_in != H * W * A:
            raise ValueError(f"fully connected layer reads {fc_in} values, encoder emits {H * W * A}")
        if self.fc_bias.shape != (fc_out,) or fc_out % (H * W):
            raise ValueError(f"fully connected output {fc_out} cannot be reshaped to {H}x{W}xB")
        shapes.append((H, W, fc_out // (H * W)))
        for d in self.deconvs:
            shapes.append(d.output_shape(shapes[-1]))
        if shapes[-1][:2] != self.input_shape[:2]:
            raise ValueError(f"decoder output {shapes[-1][:2]} differs from input {self.input_shape[:2]}")
        if shapes[-1][2] < 2:
            raise ValueError("need at least two classes")
        object.__setattr__(self, "shapes", tuple(shapes))

    @property
    def n_classes(self) -> int:
        return self.shapes[-1][2]

    @classmethod
    def initialize(cls, input_shape=(80, 80, 5), n_classes: int = 6, n_filters: int = 20,
                   kernel_size: int = 4, strides=(2, 2), fc_dim: int | None = None,
                   rng: np.random.Generator | int = 0) -> ConvNetModel:
        """Fan-based uniform init. ``fc_dim`` defaults to the encoder output size."""
        rng = np.random.default_rng(rng) if not isinstance(rng, np.random.Generator) else rng
        k = kernel_size

        def uni(shape, fan_in, fan_out):
            b = math.sqrt(6.0 / (fan_in + fan_out))
            return rng.uniform(-b, b, size=shape)

        H, W, D = input_shape
        convs, shape = [], (H, W, D)
        for s in strides:
            K = uni((n_filters, k, k, shape[2]), k * k * shape[2], k * k * n_filters)
            layer = ConvLayer(K, np.zeros(n_filters), s, "relu")
            convs.append(layer)
            shape = layer.output_shape(shape)
        flat = shape[0] * shape[1] * shape[2]
        fc_dim = flat if fc_dim is None else fc_dim
        fc_w = uni((fc_dim, flat), flat, fc_dim)
        b_in = fc_dim // (shape[0] * shape[1])
        deconvs = []
        chans = [n_filters] * (len(strides) - 1) + [n_classes]
        for s, c_out in zip(reversed(strides), chans):
            K = uni((b_in, k, k, c_out), k * k * b_in, k * k * c_out)
            deconvs.append(DeconvLayer(K, np.zeros(c_out), s, "relu" if c_out != n_classes or
                                       len(deconvs) < len(strides) - 1 else "linear"))
            b_in = c_out
        return cls(input_shape, tuple(convs), fc_w, np.zeros(fc_dim), tuple(deconvs))

    def params(self) -> dict[str, np.ndarray]:
        p = {}
        for u, c in enumerate(self.convs):
            p[f"conv{u}.K"], p[f"conv{u}.b"] = c.kernels, c.bias
        p["fc.W"], p["fc.b"] = self.fc_weights, self.fc_bias
        for v, d in enumerate(self.deconvs):
            p[f"deconv{v}.K"], p[f"deconv{v}.b"] = d.kernels, d.bias
        return p

    def with_params(self, p: dict[str, np.ndarray]) -> ConvNetModel:
        convs = tuple(replace(c, kernels=p[f"conv{u}.K"], bias=p[f"conv{u}.b"])
                      for u, c in enumerate(self.convs))
        deconvs = tuple(replace(d, kernels=p[f"deconv{v}.K"], bias=p[f"deconv{v}.b"])
                        for v, d in enumerate(self.deconvs))
        return ConvNetModel(self.input_shape, convs, p["fc.W"], p["fc.b"], deconvs, self.fc_activation)

    def rounded(self) -> ConvNetModel:
        return self.with_params({k: v.astype(np.float32).astype(np.float64)
                                 for k, v in self.params().items()})


def _forward_batch(model: ConvNetModel, x: np.ndarray):
    """Logits for a batch plus the cache needed for backprop."""
    cache = {"inputs": [], "outputs": []}
    h = x
    for c in model.convs:
        cache["inputs"].append(h)
        h = _activate(c.activation, conv2d(h, c.kernels, c.stride, c.padding) + c.bias)
        cache["outputs"].append(h)
    N = len(x)
    flat = h.reshape(N, -1)
    cache["fc_in"] = flat
    f = _activate(model.fc_activation, flat @ model.fc_weights.T + model.fc_bias)
    cache["fc_out"] = f
    h = f.reshape((N,) + model.shapes[len(model.convs) + 1])
    for k, d in enumerate(model.deconvs):
        cache["inputs"].append(h)
        H, W, _ = model.shapes[len(model.convs) + 2 + k]
        h = _activate(d.activation, conv2d_transpose(h, d.kernels, d.stride, d.padding, (H, W)) + d.bias)
        cache["outputs"].append(h)
    return h, cache


def _backward_batch(model: ConvNetModel, cache, d_logits: np.ndarray) -> dict[str, np.ndarray]:
    grads = {}
    nc = len(model.convs)
    g = d_logits
    for k in reversed(range(len(model.deconvs))):
        d = model.deconvs[k]
        g = _activate_grad(d.activation, cache["outputs"][nc + k], g)
        x_in = cache["inputs"][nc + k]
        grads[f"deconv{k}.b"] = g.sum(axis=(0, 1, 2))
        # the transposed conv is conv2d's adjoint, so roles of input and output swap
        grads[f"deconv{k}.K"] = conv2d_kernel_grad(g, x_in, *d.kernel_hw, d.stride, d.padding)
        g = conv2d(g, d.kernels, d.stride, d.padding)
    N = len(g)
    g = g.reshape(N, -1)
    g = _activate_grad(model.fc_activation, cache["fc_out"], g)
    grads["fc.W"] = g.T @ cache["fc_in"]
    grads["fc.b"] = g.sum(axis=0)
    g = (g @ model.fc_weights).reshape(cache["outputs"][nc - 1].shape)
    for u in reversed(range(nc)):
        c = model.convs[u]
        g = _activate_grad(c.activation, cache["outputs"][u], g)
        x_in = cache["inputs"][u]
        grads[f"conv{u}.b"] = g.sum(axis=(0, 1, 2))
        grads[f"conv{u}.K"] = conv2d_kernel_grad(x_in, g, *c.kernel_hw, c.stride, c.padding)
        if u > 0:
            g = conv2d_transpose(g, c.kernels, c.stride, c.padding, x_in.shape[1:3])
    return grads


def one_hot(classes: np.ndarray, n_classes: int) -> np.ndarray:
    return np.eye(n_classes)[np.asarray(classes, dtype=np.int64)]


def loss_and_grad(model: ConvNetModel, x: np.ndarray, classes: np.ndarray):
    """Mean per-pixel cross-entropy of a batch and its gradients.

    Non-finite logits give ``(inf, None)`` so callers can report divergence.
    """
    with np.errstate(over="ignore", invalid="ignore"):
        logits, cache = _forward_batch(model, x)
    if not np.all(np.isfinite(logits)):
        return math.inf, None
    prob = pixel_softmax(logits)
    y = one_hot(classes, model.n_classes)
    loss = cross_entropy_loss(prob, y)
    d_logits = (prob - y) / (prob.size // model.n_classes)
    return loss, _backward_batch(model, cache, d_logits)


def _input_array(aog) -> np.ndarray:
    return aog.cells if isinstance(aog, AugmentedOccupancyGrid) else np.asarray(aog, dtype=np.float64)


def forward(model: ConvNetModel, aog) -> np.ndarray:
    """Per-pixel class distribution, shape (rows, cols, C)."""
    x = _input_array(aog)
    if x.shape != model.input_shape:
        raise ValueError(f"model expects input {model.input_shape}, got {x.shape}")
    return pixel_softmax(_forward_batch(model, x[None])[0][0])


def forward_batch(model: ConvNetModel, x: np.ndarray) -> np.ndarray:
    return pixel_softmax(_forward_batch(model, np.asarray(x, dtype=np.float64))[0])


def predict_pog(model: ConvNetModel, aog, config: GridConfig | None = None, t_pred: float = 0.0) -> QuantizedPog:
    """Level of the most probable class per cell (ties to the lower level)."""
    probs = forward(model, aog)
    if config is None:
        config = aog.config if isinstance(aog, AugmentedOccupancyGrid) else GridConfig(*probs.shape[:2], 1.0, 1.0)
    return QuantizedPog(config.with_attributes(1), t_pred, LEVELS[np.argmax(probs, axis=-1)])


def train_convnet(inputs, classes, spec: TrainSpec, model: ConvNetModel | None = None,
                  holdout=None, history: list | None = None, **init_kw) -> ConvNetModel:
    """Mini-batch SGD on the per-pixel cross-entropy.

    ``inputs`` is (n, H, W, D) and ``classes`` (n, H, W) integer levels.
    ``holdout`` is an optional (inputs, classes) pair evaluated after each
    epoch; ``history`` receives one dict per epoch.
    """
    X = np.asarray(inputs, dtype=np.float64)
    Y = np.asarray(classes, dtype=np.int64)
    if X.ndim != 4 or Y.shape != X.shape[:3]:
        raise ValueError(f"inputs {X.shape} and classes {Y.shape} are inconsistent")
    rng = np.random.default_rng(spec.rng_seed)
    if model is None:
        model = ConvNetModel.initialize(X.shape[1:], rng=rng, **init_kw)
    params = {k: v.copy() for k, v in model.params().items()}
    decay = {k for k in params if k.endswith(".K") or k.endswith(".W")}
    n = len(X)
    for epoch in range(spec.epochs):
        order = rng.permutation(n)
        total = 0.0
        for start in range(0, n, spec.batch_size):
            idx = order[start:start + spec.batch_size]
            cur = model.with_params(params)
            loss, g = loss_and_grad(cur, X[idx], Y[idx])
            if not np.isfinite(loss):
                raise TrainingDiverged(f"non-finite cross-entropy at epoch {epoch}, batch offset {start}")
            total += loss * len(idx)
            for k, v in params.items():
                step = g[k] + (spec.weight_decay * v if k in decay else 0.0)
                v -= spec.learning_rate * step
                if not np.all(np.abs(v) <= _F32_MAX):
                    raise TrainingDiverged(f"parameter {k} left the float32 range at epoch {epoch}, "
                                           f"batch offset {start} (lr={spec.learning_rate})")
        record = {"epoch": epoch, "train_loss": total / n}
        if holdout is not None:
            hx, hy = holdout
            hp = forward_batch(model.with_params(params), hx)
            record["holdout_loss"] = cross_entropy_loss(hp, one_hot(hy, model.n_classes))
        log.info("convnet epoch %d %s", epoch, record)
        if history is not None:
            history.append(record)
    return model.with_params(params).rounded()


# -- model files --------------------------------------------------------------

CNN_MAGIC = b"CNVM"
CNN_VERSION = 1
_ACT = {name: k for k, name in enumerate(ACTIVATIONS)}
_PAD = {name: k for k, name in enumerate(PADDINGS)}


def convnet_to_bytes(model: ConvNetModel) -> bytes:
    out = [struct.pack("<4sHIIIBBB", CNN_MAGIC, CNN_VERSION, *model.input_shape,
                       len(model.convs), len(model.deconvs), _ACT[model.fc_activation])]
    for layer in model.convs + model.deconvs:
        out.append(struct.pack("<IIIIIBB", *layer.kernels.shape, layer.stride,
                               _ACT[layer.activation], _PAD[layer.padding]))
    out.append(struct.pack("<II", *model.fc_weights.shape))
    for layer in model.convs:
        out += [layer.kernels.astype("<f4").tobytes(), layer.bias.astype("<f4").tobytes()]
    out += [model.fc_weights.astype("<f4").tobytes(), model.fc_bias.astype("<f4").tobytes()]
    for layer in model.deconvs:
        out += [layer.kernels.astype("<f4").tobytes(), layer.bias.astype("<f4").tobytes()]
    return b"".join(out)


def convnet_from_bytes(data: bytes) -> ConvNetModel:
    head = struct.Struct("<4sHIIIBBB")
    magic, version, H, W, D, n_conv, n_deconv, fc_act = head.unpack_from(data, 0)
    if magic != CNN_MAGIC or version != CNN_VERSION:
        raise ValueError(f"not a convnet model file (magic {magic!r}, version {version})")
    off = head.size
    ls = struct.Struct("<IIIIIBB")
    metas = []
    for _ in range(n_conv + n_deconv):
        metas.append(ls.unpack_from(data, off))
        off += ls.size
    fc_out, fc_in = struct.unpack_from("<II", data, off)
    off += 8

    def take(shape):
        nonlocal off
        count = int(np.prod(shape))
        arr = np.frombuffer(data, dtype="<f4", count=count, offset=off).astype(np.float64)
        off += 4 * count
        return arr.reshape(shape)

    def layer(cls, meta):
        a, k1, k2, d, stride, act, pad = meta
        K = take((a, k1, k2, d))
        b = take((cls.n_bias(K),))
        return cls(K, b, stride, ACTIVATIONS[act], PADDINGS[pad])

    convs = tuple(layer(ConvLayer, m) for m in metas[:n_conv])
    fc_w, fc_b = take((fc_out, fc_in)), take((fc_out,))
    deconvs = tuple(layer(DeconvLayer, m) for m in metas[n_conv:])
    if off != len(data):
        raise ValueError(f"trailing bytes in convnet model file at offset {off}")
    return ConvNetModel((H, W, D), convs, fc_w, fc_b, deconvs, ACTIVATIONS[fc_act])
