"""Tied-weight denoising autoencoders and greedy layer-wise stacking."""

from __future__ import annotations

import logging
import struct
from dataclasses import dataclass, field, replace

import numpy as np

log = logging.getLogger(__name__)

ACTIVATIONS = ("linear", "sigmoid", "tanh")
CORRUPTIONS = ("gaussian", "masking", "salt_pepper")


class TrainingDiverged(FloatingPointError):
    pass


@dataclass(frozen=True)
class CorruptionSpec:
    kind: str = "gaussian"
    strength: float = 0.1

    def __post_init__(self):
        if self.kind not in CORRUPTIONS:
            raise ValueError(f"unknown corruption {self.kind!r}")
        if self.strength < 0:
            raise ValueError("corruption strength must be >= 0")
        if self.kind != "gaussian" and self.strength > 1:
            raise ValueError(f"{self.kind} corruption needs a fraction in [0, 1]")


@dataclass(frozen=True)
class TrainSpec:
    """Defaults are the full-scale reference settings: 500 epochs, lr 1e-3, weight decay 5e-3, Gaussian noise."""

    epochs: int = 500
    learning_rate: float = 0.001
    weight_decay: float = 0.005
    corruption: CorruptionSpec = field(default_factory=CorruptionSpec)
    batch_size: int = 32
    rng_seed: int = 0
    activation: str = "linear"

    def __post_init__(self):
        if self.epochs < 1:
            raise ValueError("epochs must be >= 1")
        if not self.learning_rate > 0:
            raise ValueError("learning_rate must be > 0")
        if self.weight_decay < 0:
            raise ValueError("weight_decay must be >= 0")
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")
        if self.activation not in ACTIVATIONS:
            raise ValueError(f"unknown activation {self.activation!r}")

    def to_dict(self) -> dict:
        return {"epochs": self.epochs, "learning_rate": self.learning_rate,
                "weight_decay": self.weight_decay, "batch_size": self.batch_size,
                "rng_seed": self.rng_seed, "activation": self.activation,
                "corruption": {"kind": self.corruption.kind, "strength": self.corruption.strength}}

    @classmethod
    def from_dict(cls, d: dict) -> TrainSpec:
        d = dict(d)
        c = d.pop("corruption", None)
        spec = cls(**d)
        return replace(spec, corruption=CorruptionSpec(**c)) if c else spec


def corrupt(p, spec: CorruptionSpec, rng: np.random.Generator, value_range=None) -> np.ndarray:
    """Partially destroyed copy of ``p``.

    ``value_range`` gives the (min, max) used by salt-and-pepper noise;
    it defaults to the range of ``p`` itself.
    """
    p = np.asarray(p, dtype=np.float64)
    if spec.strength == 0:
        return p.copy()
    if spec.kind == "gaussian":
        return p + rng.normal(0.0, spec.strength, size=p.shape)
    hit = rng.random(p.shape) < spec.strength
    out = p.copy()
    if spec.kind == "masking":
        out[hit] = 0.0
        return out
    lo, hi = (p.min(), p.max()) if value_range is None else value_range
    salt = rng.random(p.shape) < 0.5
    out[hit & salt] = hi
    out[hit & ~salt] = lo
    return out


def _act(name: str, z: np.ndarray) -> np.ndarray:
    if name == "linear":
        return z
    if name == "sigmoid":
        return 1.0 / (1.0 + np.exp(-z))
    return np.tanh(z)


def _act_grad(name: str, out: np.ndarray) -> np.ndarray | float:
    """Derivative expressed through the activation output."""
    if name == "linear":
        return 1.0
    if name == "sigmoid":
        return out * (1.0 - out)
    return 1.0 - out * out


@dataclass(frozen=True, eq=False)
class AutoencoderLayer:
    """One denoising autoencoder. ``weights`` is (hidden, visible).

    With ``tied`` the decoder applies ``weights.T``; no separate matrix exists.
    """

    weights: np.ndarray
    bias_enc: np.ndarray
    bias_dec: np.ndarray
    activation: str = "linear"
    tied: bool = True
    weights_dec: np.ndarray | None = None

    def __post_init__(self):
        W = np.asarray(self.weights, dtype=np.float64)
        if W.ndim != 2:
            raise ValueError("weights must be a matrix")
        if self.activation not in ACTIVATIONS:
            raise ValueError(f"unknown activation {self.activation!r}")
        if np.shape(self.bias_enc) != (W.shape[0],) or np.shape(self.bias_dec) != (W.shape[1],):
            raise ValueError("bias sizes do not match the weight matrix")
        if self.tied and self.weights_dec is not None:
            raise ValueError("tied layers carry no decoder weight")
        if not self.tied and np.shape(self.weights_dec) != W.shape[::-1]:
            raise ValueError("untied decoder weight must be (visible, hidden)")
        object.__setattr__(self, "weights", W)
        object.__setattr__(self, "bias_enc", np.asarray(self.bias_enc, dtype=np.float64))
        object.__setattr__(self, "bias_dec", np.asarray(self.bias_dec, dtype=np.float64))

    @property
    def in_dim(self) -> int:
        return self.weights.shape[1]

    @property
    def out_dim(self) -> int:
        return self.weights.shape[0]

    @property
    def decoder_weights(self) -> np.ndarray:
        return self.weights.T if self.tied else self.weights_dec

    @classmethod
    def initialize(cls, in_dim: int, hidden_dim: int, rng: np.random.Generator,
                   activation: str = "linear") -> AutoencoderLayer:
        bound = np.sqrt(6.0 / (in_dim + hidden_dim))
        return cls(rng.uniform(-bound, bound, size=(hidden_dim, in_dim)),
                   np.zeros(hidden_dim), np.zeros(in_dim), activation)

    def rounded(self) -> AutoencoderLayer:
        """Copy with parameters snapped to float32 so saved models reload bit-exactly."""
        f = lambda a: None if a is None else a.astype(np.float32).astype(np.float64)
        return AutoencoderLayer(f(self.weights), f(self.bias_enc), f(self.bias_dec),
                                self.activation, self.tied, f(self.weights_dec))


def _check_dim(x: np.ndarray, n: int, what: str):
    if x.shape[-1] != n:
        raise ValueError(f"{what}: expected length {n}, got {x.shape[-1]}")


def encode_layer(layer: AutoencoderLayer, p_tilde) -> np.ndarray:
    """q = f(W p + b); accepts a vector or a batch of row vectors."""
    p = np.asarray(p_tilde, dtype=np.float64)
    _check_dim(p, layer.in_dim, "encode")
    return _act(layer.activation, p @ layer.weights.T + layer.bias_enc)


def decode_layer(layer: AutoencoderLayer, q) -> np.ndarray:
    """r = f(W' q + b') with W' = W.T for tied layers."""
    q = np.asarray(q, dtype=np.float64)
    _check_dim(q, layer.out_dim, "decode")
    return _act(layer.activation, q @ layer.decoder_weights.T + layer.bias_dec)


def loss_and_grad(layer: AutoencoderLayer, clean: np.ndarray, noisy: np.ndarray, weight_decay: float):
    """Reconstruction loss of ``noisy`` against ``clean`` and its parameter gradients.

    Returns ``(loss, grads)`` where grads holds ``weights``, ``bias_enc``,
    ``bias_dec`` and, for untied layers, ``weights_dec``.
    """
    G = clean.shape[0]
    W = layer.weights
    h = _act(layer.activation, noisy @ W.T + layer.bias_enc)
    r = _act(layer.activation, h @ layer.decoder_weights.T + layer.bias_dec)
    err = r - clean
    loss = 0.5 * np.sum(err * err) / G + 0.5 * weight_decay * np.sum(W * W)
    if not layer.tied:
        loss += 0.5 * weight_decay * np.sum(layer.weights_dec ** 2)
    d_r = err * _act_grad(layer.activation, r) / G
    d_h = (d_r @ layer.decoder_weights) * _act_grad(layer.activation, h)
    grads = {"bias_dec": d_r.sum(axis=0), "bias_enc": d_h.sum(axis=0)}
    if layer.tied:
        grads["weights"] = d_h.T @ noisy + h.T @ d_r + weight_decay * W
    else:
        grads["weights"] = d_h.T @ noisy + weight_decay * W
        grads["weights_dec"] = d_r.T @ h + weight_decay * layer.weights_dec
    return float(loss), grads


def layer_loss(layer: AutoencoderLayer, batch, spec: TrainSpec, rng: np.random.Generator) -> float:
    """Mean half squared reconstruction error of the corrupted batch plus weight decay."""
    clean = np.atleast_2d(np.asarray(batch, dtype=np.float64))
    if clean.shape[0] == 0:
        raise ValueError("empty batch")
    noisy = corrupt(clean, spec.corruption, rng)
    return loss_and_grad(layer, clean, noisy, spec.weight_decay)[0]


def train_layer(data, in_dim: int, hidden_dim: int, spec: TrainSpec,
                history: list | None = None) -> AutoencoderLayer:
    """Mini-batch gradient descent on the denoising loss.

    Fresh corruption is drawn for every presentation of a batch. ``history``,
    if given, receives the clean-input loss before training and after each epoch.
    """
    X = np.asarray(data, dtype=np.float64)
    if X.ndim != 2 or X.shape[1] != in_dim:
        raise ValueError(f"training data must be (n, {in_dim}), got {X.shape}")
    rng = np.random.default_rng(spec.rng_seed)
    layer = AutoencoderLayer.initialize(in_dim, hidden_dim, rng, spec.activation)
    W, be, bd = layer.weights.copy(), layer.bias_enc.copy(), layer.bias_dec.copy()
    value_range = (X.min(), X.max())
    n = len(X)

    def clean_loss():
        cur = AutoencoderLayer(W, be, bd, spec.activation)
        return loss_and_grad(cur, X, X, spec.weight_decay)[0]

    losses = [clean_loss()] if history is not None else None
    for epoch in range(spec.epochs):
        order = rng.permutation(n)
        for start in range(0, n, spec.batch_size):
            idx = order[start:start + spec.batch_size]
            clean = X[idx]
            noisy = corrupt(clean, spec.corruption, rng, value_range)
            cur = AutoencoderLayer(W, be, bd, spec.activation)
            with np.errstate(over="ignore", invalid="ignore"):
                loss, g = loss_and_grad(cur, clean, noisy, spec.weight_decay)
            if not np.isfinite(loss):
                raise TrainingDiverged(
                    f"non-finite loss at epoch {epoch}, batch offset {start}: loss={loss}, "
                    f"|W|max={np.abs(W).max():.3g}, lr={spec.learning_rate}")
            W -= spec.learning_rate * g["weights"]
            be -= spec.learning_rate * g["bias_enc"]
            bd -= spec.learning_rate * g["bias_dec"]
        if losses is not None:
            losses.append(clean_loss())
            log.debug("layer %d->%d epoch %d loss %.6g", in_dim, hidden_dim, epoch, losses[-1])
    if losses is not None:
        history.extend(losses)
    return AutoencoderLayer(W, be, bd, spec.activation).rounded()


@dataclass(frozen=True, eq=False)
class SdaModel:
    layers: tuple[AutoencoderLayer, ...]

    def __post_init__(self):
        layers = tuple(self.layers)
        if not layers:
            raise ValueError("an SDA needs at least one layer")
        for a, b in zip(layers[:-1], layers[1:]):
            if a.out_dim != b.in_dim:
                raise ValueError(f"layer sizes do not chain: {a.out_dim} -> {b.in_dim}")
        object.__setattr__(self, "layers", layers)

    @property
    def layer_sizes(self) -> list[int]:
        return [self.layers[0].in_dim] + [l.out_dim for l in self.layers]

    @property
    def nl(self) -> int:
        return len(self.layers)


def _layer_seed(seed: int, l: int) -> int:
    return int(np.random.SeedSequence([seed, l]).generate_state(1, np.uint32)[0])


def train_stack(data, layer_sizes, spec: TrainSpec, histories: list | None = None) -> SdaModel:
    """Greedy layer-wise training; layer l learns from the clean codes of layer l-1."""
    sizes = list(layer_sizes)
    X = np.asarray(data, dtype=np.float64)
    if len(sizes) < 2 or X.shape[1] != sizes[0]:
        raise ValueError(f"layer_sizes {sizes} must start at the input dimension {X.shape[1]}")
    layers = []
    codes = X
    for l, (a, b) in enumerate(zip(sizes[:-1], sizes[1:])):
        hist = [] if histories is not None else None
        layer_spec = spec if len(sizes) == 2 else replace(spec, rng_seed=_layer_seed(spec.rng_seed, l))
        layer = train_layer(codes, a, b, layer_spec, hist)
        if histories is not None:
            histories.append(hist)
        layers.append(layer)
        codes = encode_layer(layer, codes)
    return SdaModel(tuple(layers))


def encode_stack(model: SdaModel, p) -> np.ndarray:
    q = np.asarray(p, dtype=np.float64)
    for layer in model.layers:
        q = encode_layer(layer, q)
    return q


def decode_stack(model: SdaModel, q) -> np.ndarray:
    r = np.asarray(q, dtype=np.float64)
    for layer in reversed(model.layers):
        r = decode_layer(layer, r)
    return r


# -- model files --------------------------------------------------------------

SDA_MAGIC = b"SDAM"
SDA_VERSION = 1
_ACT_TAGS = {name: k for k, name in enumerate(ACTIVATIONS)}


def sda_to_bytes(model: SdaModel) -> bytes:
    out = [struct.pack("<4sHI", SDA_MAGIC, SDA_VERSION, model.nl)]
    for layer in model.layers:
        out.append(struct.pack("<IIBB", layer.in_dim, layer.out_dim,
                               _ACT_TAGS[layer.activation], int(layer.tied)))
        arrays = [layer.weights, layer.bias_enc, layer.bias_dec]
        if not layer.tied:
            arrays.append(layer.weights_dec)
        out.extend(np.ascontiguousarray(a, dtype="<f4").tobytes() for a in arrays)
    return b"".join(out)


def sda_from_bytes(data: bytes) -> SdaModel:
    magic, version, nl = struct.unpack_from("<4sHI", data, 0)
    if magic != SDA_MAGIC or version != SDA_VERSION:
        raise ValueError(f"not an SDA model file (magic {magic!r}, version {version})")
    off = struct.calcsize("<4sHI")
    layers = []

    def take(shape):
        nonlocal off
        count = int(np.prod(shape))
        arr = np.frombuffer(data, dtype="<f4", count=count, offset=off).astype(np.float64)
        off += 4 * count
        return arr.reshape(shape)

    for _ in range(nl):
        n_in, n_out, act, tied = struct.unpack_from("<IIBB", data, off)
        off += struct.calcsize("<IIBB")
        W, be, bd = take((n_out, n_in)), take((n_out,)), take((n_in,))
        wd = None if tied else take((n_in, n_out))
        layers.append(AutoencoderLayer(W, be, bd, ACTIVATIONS[act], bool(tied), wd))
    if off != len(data):
        raise ValueError(f"trailing bytes in SDA model file at offset {off}")
    return SdaModel(tuple(layers))
