"""MLP embedding network with an L2-normalised output and a hand-written backward pass."""
from __future__ import annotations

import base64
from dataclasses import asdict, dataclass, field

import numpy as np

from .numerics import DTYPE, as_matrix, l2_normalize, l2_normalize_backward, make_rng


class StaleCacheError(RuntimeError):
    """Backward was called with activations from before a parameter update."""


@dataclass(frozen=True)
class NetConfig:
    input_dim: int
    hidden: tuple[int, ...] = (400, 400)
    latent_dim: int = 100
    init_seed: int = 0
    # None means 1/sqrt(fan_in) per layer
    weight_init_scale: float | None = None

    def __post_init__(self):
        object.__setattr__(self, "hidden", tuple(int(h) for h in self.hidden))
        if self.latent_dim < 2:
            raise ValueError("latent_dim must be >= 2")
        if self.input_dim < 1 or any(h < 1 for h in self.hidden):
            raise ValueError("layer widths must be >= 1")

    @property
    def widths(self) -> tuple[int, ...]:
        return (self.input_dim, *self.hidden, self.latent_dim)


@dataclass
class BatchActivations:
    inputs: np.ndarray
    pre: list[np.ndarray]  # pre-activation of every linear layer
    post: list[np.ndarray]  # input fed to every linear layer
    raw: np.ndarray  # embedding before normalisation
    features: np.ndarray
    version: int


@dataclass
class ParamGrads:
    weights: list[np.ndarray]
    biases: list[np.ndarray]

    def scaled(self, s: float) -> "ParamGrads":
        return ParamGrads([w * s for w in self.weights], [b * s for b in self.biases])

    def __add__(self, other: "ParamGrads") -> "ParamGrads":
        return ParamGrads(
            [a + b for a, b in zip(self.weights, other.weights)],
            [a + b for a, b in zip(self.biases, other.biases)],
        )


def _uniform_layer(rng: np.random.Generator, fan_in: int, fan_out: int, scale: float | None):
    s = 1.0 / np.sqrt(fan_in) if scale is None else scale
    w = rng.uniform(-s, s, size=(fan_in, fan_out))
    b = rng.uniform(-s, s, size=fan_out)
    return w, b


class EmbeddingNetwork:
    """ReLU MLP mapping inputs to unit vectors in ``R^latent_dim``.

    Parameters are float64 and the parameter count is fixed at construction.
    Every :meth:`sgd_step` bumps ``version`` so stale caches are detected.
    """

    def __init__(self, config: NetConfig):
        self.config = config
        rng = make_rng(config.init_seed, "net-init")
        self.weights: list[np.ndarray] = []
        self.biases: list[np.ndarray] = []
        widths = config.widths
        for fan_in, fan_out in zip(widths[:-1], widths[1:]):
            w, b = _uniform_layer(rng, fan_in, fan_out, config.weight_init_scale)
            self.weights.append(w)
            self.biases.append(b)
        self.version = 0

    @property
    def num_params(self) -> int:
        return sum(w.size + b.size for w, b in zip(self.weights, self.biases))

    def forward(self, inputs) -> tuple[np.ndarray, BatchActivations]:
        x = as_matrix(inputs, "inputs")
        if x.shape[1] != self.config.input_dim:
            raise ValueError(f"expected input dim {self.config.input_dim}, got {x.shape[1]}")
        pre, post = [], []
        h = x
        last = len(self.weights) - 1
        for k, (w, b) in enumerate(zip(self.weights, self.biases)):
            post.append(h)
            z = h @ w + b
            pre.append(z)
            h = z if k == last else np.maximum(z, 0.0)
        features = l2_normalize(h)
        cache = BatchActivations(x, pre, post, h, features, self.version)
        return features, cache

    def embed(self, inputs) -> np.ndarray:
        return self.forward(inputs)[0]

    def backward(self, cache: BatchActivations, d_features=None, d_raw=None) -> ParamGrads:
        """Parameter gradients given dLoss/dFeatures and/or dLoss/dRaw.

        ``d_raw`` is the gradient w.r.t. the embedding before normalisation and
        is used by heads that read the unnormalised output.
        """
        if cache.version != self.version:
            raise StaleCacheError("activations were produced before the last parameter update")
        g = np.zeros_like(cache.raw)
        if d_features is not None:
            g = g + l2_normalize_backward(cache.raw, np.asarray(d_features, dtype=DTYPE))
        if d_raw is not None:
            g = g + np.asarray(d_raw, dtype=DTYPE)
        n_layers = len(self.weights)
        dw: list[np.ndarray] = [None] * n_layers  # type: ignore[list-item]
        db: list[np.ndarray] = [None] * n_layers  # type: ignore[list-item]
        for k in range(n_layers - 1, -1, -1):
            if k != n_layers - 1:
                g = g * (cache.pre[k] > 0.0)
            dw[k] = cache.post[k].T @ g
            db[k] = g.sum(axis=0)
            if k > 0:
                g = g @ self.weights[k].T
        return ParamGrads(dw, db)

    def sgd_step(self, grads: ParamGrads, lr: float) -> None:
        # descent: theta <- theta - lr * grad
        for w, gw in zip(self.weights, grads.weights):
            w -= lr * gw
        for b, gb in zip(self.biases, grads.biases):
            b -= lr * gb
        self.version += 1

    def copy(self) -> "EmbeddingNetwork":
        other = EmbeddingNetwork.__new__(EmbeddingNetwork)
        other.config = self.config
        other.weights = [w.copy() for w in self.weights]
        other.biases = [b.copy() for b in self.biases]
        other.version = self.version
        return other

    def to_dict(self) -> dict:
        cfg = asdict(self.config)
        cfg["hidden"] = list(cfg["hidden"])
        return {
            "config": cfg,
            "weights": [encode_array(w) for w in self.weights],
            "biases": [encode_array(b) for b in self.biases],
        }

    @classmethod
    def from_dict(cls, d: dict) -> "EmbeddingNetwork":
        net = cls.__new__(cls)
        net.config = NetConfig(**d["config"])
        net.weights = [decode_array(w) for w in d["weights"]]
        net.biases = [decode_array(b) for b in d["biases"]]
        widths = net.config.widths
        for k, (w, b) in enumerate(zip(net.weights, net.biases)):
            if w.shape != (widths[k], widths[k + 1]) or b.shape != (widths[k + 1],):
                raise ValueError(f"layer {k} has shape {w.shape}, inconsistent with config")
        net.version = 0
        return net


@dataclass
class LinearHead:
    """Softmax classifier head with one output column per observed class.

    Columns follow first-seen class order and are appended as classes appear.
    """

    in_dim: int
    seed: int = 0
    classes: list[int] = field(default_factory=list)
    weight: np.ndarray = None  # type: ignore[assignment]
    bias: np.ndarray = None  # type: ignore[assignment]

    def __post_init__(self):
        if self.weight is None:
            self.weight = np.zeros((self.in_dim, 0), dtype=DTYPE)
            self.bias = np.zeros(0, dtype=DTYPE)

    def add_class(self, y: int) -> None:
        if y in self.classes:
            raise ValueError(f"class {y} already in head")
        rng = make_rng(self.seed, f"head-class-{y}")
        w, b = _uniform_layer(rng, self.in_dim, 1, None)
        self.weight = np.concatenate([self.weight, w], axis=1)
        self.bias = np.concatenate([self.bias, b])
        self.classes.append(int(y))

    def column_of(self, labels) -> np.ndarray:
        index = {c: i for i, c in enumerate(self.classes)}
        try:
            return np.array([index[int(y)] for y in labels], dtype=np.int64)
        except KeyError as err:
            raise ValueError(f"label {err.args[0]} outside head range") from None

    def logits(self, h: np.ndarray) -> np.ndarray:
        return h @ self.weight + self.bias

    def predict(self, h: np.ndarray) -> np.ndarray:
        cols = np.argmax(self.logits(h), axis=1)
        return np.asarray(self.classes, dtype=np.int64)[cols]

    def sgd_step(self, d_logits: np.ndarray, h: np.ndarray, lr: float) -> None:
        self.weight -= lr * (h.T @ d_logits)
        self.bias -= lr * d_logits.sum(axis=0)

    def copy(self) -> "LinearHead":
        return LinearHead(self.in_dim, self.seed, list(self.classes), self.weight.copy(), self.bias.copy())

    def to_dict(self) -> dict:
        return {
            "in_dim": self.in_dim,
            "seed": self.seed,
            "classes": list(self.classes),
            "weight": encode_array(self.weight),
            "bias": encode_array(self.bias),
        }

    @classmethod
    def from_dict(cls, d: dict) -> "LinearHead":
        return cls(d["in_dim"], d["seed"], list(d["classes"]), decode_array(d["weight"]), decode_array(d["bias"]))


def encode_array(a: np.ndarray) -> dict:
    """Exact JSON-safe encoding: little-endian float64 bytes in base64."""
    a = np.ascontiguousarray(a, dtype="<f8")
    return {"shape": list(a.shape), "data": base64.b64encode(a.tobytes()).decode("ascii")}


def decode_array(d: dict) -> np.ndarray:
    raw = base64.b64decode(d["data"])
    return np.frombuffer(raw, dtype="<f8").astype(DTYPE).reshape(d["shape"])
