"""Small dense networks with hand-derived gradients.

A :class:`Network` is an encoder (every layer but the last) followed by a
linear classifier. The classifier reads the raw encoder output ``h``; the
unit-norm copy ``z = h / ||h||`` is exposed separately for centroid and
contrastive computations, and ``backward`` accepts a gradient on ``z`` so
feature-space losses chain through the normalization.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import ContractError, DivergenceError

ACTIVATIONS = ("relu", "identity")
NORM_EPS = 1e-12


@dataclass(frozen=True)
class Layer:
    weight: np.ndarray  # (out, in)
    bias: np.ndarray  # (out,)
    activation: str = "relu"

    @property
    def shape(self) -> tuple[int, int]:
        return self.weight.shape


@dataclass(frozen=True)
class Network:
    layers: tuple[Layer, ...]

    def __post_init__(self):
        if len(self.layers) < 2:
            raise ContractError("network needs at least one encoder layer and a classifier")
        for i, layer in enumerate(self.layers):
            if layer.activation not in ACTIVATIONS:
                raise ContractError(f"layers[{i}]: unknown activation {layer.activation!r}")
            if layer.bias.shape != (layer.weight.shape[0],):
                raise ContractError(f"layers[{i}]: bias shape {layer.bias.shape} vs weight {layer.weight.shape}")
        for i in range(1, len(self.layers)):
            if self.layers[i].weight.shape[1] != self.layers[i - 1].weight.shape[0]:
                raise ContractError(f"layers[{i}] input dim does not chain with layers[{i - 1}] output")
        if self.layers[-1].activation != "identity":
            raise ContractError("classifier layer must use the identity activation")

    @property
    def input_dim(self) -> int:
        return self.layers[0].weight.shape[1]

    @property
    def feature_dim(self) -> int:
        return self.layers[-2].weight.shape[0]

    @property
    def n_classes(self) -> int:
        return self.layers[-1].weight.shape[0]

    @property
    def encoder(self) -> tuple[Layer, ...]:
        return self.layers[:-1]

    @property
    def classifier(self) -> Layer:
        return self.layers[-1]

    def params(self) -> list[np.ndarray]:
        out = []
        for layer in self.layers:
            out.extend((layer.weight, layer.bias))
        return out

    def param_names(self) -> list[str]:
        names = []
        for i in range(len(self.layers)):
            names.extend((f"layers[{i}].weight", f"layers[{i}].bias"))
        return names

    def with_params(self, params: list[np.ndarray]) -> "Network":
        layers = tuple(
            Layer(params[2 * i], params[2 * i + 1], layer.activation) for i, layer in enumerate(self.layers)
        )
        return Network(layers)

    def copy(self) -> "Network":
        return self.with_params([p.copy() for p in self.params()])

    def flat(self) -> np.ndarray:
        return np.concatenate([p.ravel() for p in self.params()])

    def all_finite(self) -> bool:
        return all(np.isfinite(p).all() for p in self.params())


@dataclass
class ForwardCache:
    inputs: list[np.ndarray]  # input to each layer
    preacts: list[np.ndarray]  # pre-activation of each layer
    features: np.ndarray  # raw encoder output h
    norms: np.ndarray  # ||h|| per row, clamped at NORM_EPS
    z: np.ndarray  # h / ||h||
    logits: np.ndarray
    probs: np.ndarray


@dataclass
class Gradients:
    grads: list[np.ndarray] = field(default_factory=list)  # same order as Network.params()

    def __add__(self, other: "Gradients") -> "Gradients":
        return Gradients([a + b for a, b in zip(self.grads, other.grads)])

    def scale(self, c: float) -> "Gradients":
        return Gradients([c * g for g in self.grads])

    def flat(self) -> np.ndarray:
        return np.concatenate([g.ravel() for g in self.grads])


def init_network(
    input_dim: int,
    n_classes: int,
    rng: np.random.Generator,
    hidden: tuple[int, ...] = (32, 32),
    feature_dim: int = 16,
) -> Network:
    """He-initialised ReLU encoder, linear feature projection, linear classifier."""
    sizes = [input_dim, *hidden, feature_dim]
    layers = []
    for i in range(len(sizes) - 1):
        fan_in, fan_out = sizes[i], sizes[i + 1]
        act = "relu" if i < len(sizes) - 2 else "identity"
        w = rng.normal(0.0, np.sqrt(2.0 / fan_in), size=(fan_out, fan_in))
        layers.append(Layer(w, np.zeros(fan_out), act))
    w = rng.normal(0.0, np.sqrt(1.0 / feature_dim), size=(n_classes, feature_dim))
    layers.append(Layer(w, np.zeros(n_classes), "identity"))
    return Network(tuple(layers))


def softmax(logits: np.ndarray) -> np.ndarray:
    shifted = logits - logits.max(axis=-1, keepdims=True)
    e = np.exp(shifted)
    return e / e.sum(axis=-1, keepdims=True)


def l2_normalize(h: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    norms = np.maximum(np.sqrt((h * h).sum(axis=-1, keepdims=True)), NORM_EPS)
    return h / norms, norms


def forward(net: Network, x: np.ndarray) -> ForwardCache:
    x = np.asarray(x, dtype=float)
    if x.ndim != 2 or x.shape[0] < 1:
        raise ContractError(f"forward expects a non-empty (N, D) array, got shape {x.shape}")
    if x.shape[1] != net.input_dim:
        raise ContractError(f"input dim {x.shape[1]} does not match network input dim {net.input_dim}")
    inputs, preacts = [], []
    a = x
    for layer in net.layers:
        inputs.append(a)
        pre = a @ layer.weight.T + layer.bias
        preacts.append(pre)
        a = np.maximum(pre, 0.0) if layer.activation == "relu" else pre
    features, logits = inputs[-1], a
    z, norms = l2_normalize(features)
    return ForwardCache(inputs, preacts, features, norms, z, logits, softmax(logits))


def backward(
    net: Network,
    cache: ForwardCache,
    grad_logits: np.ndarray | None,
    grad_z: np.ndarray | None = None,
) -> Gradients:
    """Reverse-mode gradients of ``loss(logits) + loss(z)`` for every parameter.

    Either upstream gradient may be ``None`` (treated as zero).
    """
    if grad_logits is None:
        grad_logits = np.zeros_like(cache.logits)
    if grad_logits.shape != cache.logits.shape:
        raise ContractError(f"logit gradient shape {grad_logits.shape} != {cache.logits.shape}")
    if grad_z is not None and grad_z.shape != cache.z.shape:
        raise ContractError(f"feature gradient shape {grad_z.shape} != {cache.z.shape}")

    grads: list[np.ndarray] = [None] * (2 * len(net.layers))
    last = len(net.layers) - 1
    cls = net.classifier
    grads[2 * last] = grad_logits.T @ cache.inputs[last]
    grads[2 * last + 1] = grad_logits.sum(axis=0)
    delta = grad_logits @ cls.weight  # d/dh
    if grad_z is not None:
        z = cache.z
        radial = (z * grad_z).sum(axis=1, keepdims=True)
        delta = delta + (grad_z - z * radial) / cache.norms

    for i in range(last - 1, -1, -1):
        layer = net.layers[i]
        if layer.activation == "relu":
            delta = delta * (cache.preacts[i] > 0.0)
        grads[2 * i] = delta.T @ cache.inputs[i]
        grads[2 * i + 1] = delta.sum(axis=0)
        if i > 0:
            delta = delta @ layer.weight
    return Gradients(grads)


def cross_entropy(probs: np.ndarray, labels: np.ndarray) -> tuple[float, np.ndarray]:
    """Mean negative log-likelihood of hard labels and its gradient w.r.t. logits."""
    n = probs.shape[0]
    if n == 0:
        return 0.0, np.zeros_like(probs)
    rows = np.arange(n)
    loss = -np.log(np.maximum(probs[rows, labels], 1e-300)).mean()
    grad = probs.copy()
    grad[rows, labels] -= 1.0
    return float(loss), grad / n


def mean_entropy(probs: np.ndarray) -> tuple[float, np.ndarray]:
    """Mean Shannon entropy of the rows and its gradient w.r.t. logits."""
    n = probs.shape[0]
    logp = np.log(np.maximum(probs, 1e-300))
    ent = -(probs * logp).sum(axis=1, keepdims=True)
    grad = -probs * (logp + ent) / n
    return float(ent.mean()), grad


def sgd_step(net: Network, grads: Gradients, lr: float) -> Network:
    if lr < 0:
        raise ContractError(f"learning rate must be non-negative, got {lr}")
    names = net.param_names()
    params = net.params()
    if len(grads.grads) != len(params):
        raise ContractError("gradient list does not match network parameters")
    new = []
    for name, p, g in zip(names, params, grads.grads):
        if g.shape != p.shape:
            raise ContractError(f"{name}: gradient shape {g.shape} != parameter shape {p.shape}")
        if not np.isfinite(g).all():
            raise DivergenceError(f"non-finite gradient in {name}")
        new.append(p - lr * g)
    return net.with_params(new)


def ema_update(teacher: Network, student: Network, momentum: float) -> Network:
    """teacher <- (1 - momentum) * student + momentum * teacher."""
    if not 0.0 <= momentum <= 1.0:
        raise ContractError(f"EMA momentum must lie in [0, 1], got {momentum}")
    tp, sp = teacher.params(), student.params()
    for name, a, b in zip(teacher.param_names(), tp, sp):
        if a.shape != b.shape:
            raise ContractError(f"{name}: teacher/student shapes differ")
    return teacher.with_params([(1.0 - momentum) * s + momentum * t for t, s in zip(tp, sp)])


def param_distance(a: Network, b: Network) -> float:
    return float(np.linalg.norm(a.flat() - b.flat()))
