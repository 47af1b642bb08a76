"""Central finite-difference check of the hand-derived parameter gradients."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import ContractError
from .memory import contrastive_loss
from .nn import Network, backward, cross_entropy, forward, l2_normalize

LOSSES = ("ce", "contrastive", "contrastive_literal", "combined")


@dataclass
class GradCheckReport:
    loss: str
    max_rel_error: float
    worst_param: str
    n_checked: int


@dataclass
class LossInstance:
    """Inputs of a loss evaluation: points, hard labels and per-class queues."""

    x: np.ndarray
    labels: np.ndarray
    queues: list[np.ndarray]

    @classmethod
    def random(cls, net: Network, rng: np.random.Generator, n: int = 6, queue_size: int = 5) -> "LossInstance":
        x = rng.standard_normal((n, net.input_dim))
        labels = rng.integers(0, net.n_classes, n)
        queues = [l2_normalize(rng.standard_normal((queue_size, net.feature_dim)))[0] for _ in range(net.n_classes)]
        return cls(x, labels, queues)


def loss_and_grad(net: Network, inst: LossInstance, loss: str, lambda_cts: float = 1.0):
    """Value of the named loss and its analytic parameter gradient.

    Contrastive anchors are the points' own features, grouped by label.
    """
    if loss not in LOSSES:
        raise ContractError(f"unknown loss {loss!r}; expected one of {LOSSES}")
    cache = forward(net, inst.x)
    total = 0.0
    g_logits = None
    g_z = None
    if loss in ("ce", "combined"):
        total, g_logits = cross_entropy(cache.probs, inst.labels)
    if loss != "ce":
        form = "literal" if loss == "contrastive_literal" else "log"
        weight = lambda_cts if loss == "combined" else 1.0
        g_z = np.zeros_like(cache.z)
        for k in range(net.n_classes):
            idx = np.flatnonzero(inst.labels == k)
            value, g = contrastive_loss(cache.z[idx], k, inst.queues, form)
            total += weight * value
            g_z[idx] = weight * g
    return total, backward(net, cache, g_logits, g_z)


def grad_check(
    net: Network,
    loss: str,
    eps: float = 1e-5,
    inst: LossInstance | None = None,
    rng: np.random.Generator | None = None,
    lambda_cts: float = 1.0,
    floor: float = 1e-6,
) -> GradCheckReport:
    """Compare every analytic parameter gradient entry with a central difference.

    Relative error is ``|a - n| / max(|a|, |n|, floor)``; the floor keeps
    entries whose true gradient is zero from dividing round-off by zero.
    """
    if inst is None:
        inst = LossInstance.random(net, rng if rng is not None else np.random.default_rng(0))
    _, grads = loss_and_grad(net, inst, loss, lambda_cts)
    params = [p.copy() for p in net.params()]
    worst, worst_name, count = 0.0, "", 0
    for b, (name, p) in enumerate(zip(net.param_names(), params)):
        g = grads.grads[b]
        for idx in np.ndindex(p.shape):
            orig = p[idx]
            p[idx] = orig + eps
            up, _ = loss_and_grad(net.with_params(params), inst, loss, lambda_cts)
            p[idx] = orig - eps
            down, _ = loss_and_grad(net.with_params(params), inst, loss, lambda_cts)
            p[idx] = orig
            num = (up - down) / (2 * eps)
            rel = abs(num - g[idx]) / max(abs(num), abs(g[idx]), floor)
            count += 1
            if rel > worst:
                worst, worst_name = rel, f"{name}{list(idx)}"
    return GradCheckReport(loss, float(worst), worst_name, count)
