"""Source centroids, pseudo-source banks and class-wise momentum queues.

Each (modality, class) pair owns a fixed-capacity FIFO of unit-norm
features. Queues start full of pseudo-source features sampled around the
source centroid, receive the student's most confident target features each
step, and are occasionally refilled from the pseudo-source bank instead so
that source geometry keeps reappearing in the running centroid.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import ContractError, InsufficientSupportError

UNIT_TOL = 1e-9


@dataclass
class ClassCentroids:
    """Per-class diagonal Gaussian fit of normalized source features."""

    mu_src: np.ndarray  # (n_classes, F)
    sigma_src: np.ndarray  # (n_classes, F)
    live: np.ndarray  # (n_classes, F), tracks the queue means during adaptation

    @property
    def n_classes(self) -> int:
        return self.mu_src.shape[0]


@dataclass(frozen=True)
class RestorationPolicy:
    p_rs: float = 0.5
    n_enq: int = 200
    tau_cf: float = 0.8

    def __post_init__(self):
        if not 0.0 <= self.p_rs <= 1.0:
            raise ContractError(f"p_rs must lie in [0, 1], got {self.p_rs}")
        if not 0.0 <= self.tau_cf <= 1.0:
            raise ContractError(f"tau_cf must lie in [0, 1], got {self.tau_cf}")
        if self.n_enq < 0:
            raise ContractError(f"n_enq must be non-negative, got {self.n_enq}")


@dataclass(frozen=True)
class MomentumQueue:
    """FIFO of unit-norm rows, oldest first.

    ``tags`` are global insertion sequence numbers and ``from_source`` marks
    rows that came from the pseudo-source bank; both travel with the rows.
    """

    data: np.ndarray
    tags: np.ndarray
    from_source: np.ndarray
    inserted: int  # total rows ever enqueued, including the initial fill

    @property
    def capacity(self) -> int:
        return self.data.shape[0]

    def __len__(self) -> int:
        return self.data.shape[0]

    @property
    def source_fraction(self) -> float:
        return float(self.from_source.mean())


def build_source_centroids(features: np.ndarray, labels: np.ndarray, n_classes: int) -> ClassCentroids:
    features = np.asarray(features, dtype=float)
    labels = np.asarray(labels)
    f = features.shape[1]
    mu = np.zeros((n_classes, f))
    sigma = np.zeros((n_classes, f))
    for k in range(n_classes):
        rows = features[labels == k]
        if rows.shape[0] < 2:
            raise InsufficientSupportError(f"class {k} has {rows.shape[0]} source feature rows; need at least 2")
        mu[k] = rows.mean(axis=0)
        sigma[k] = rows.std(axis=0)
    return ClassCentroids(mu, sigma, mu.copy())


def sample_pseudo_source(mu: np.ndarray, sigma: np.ndarray, n_q: int, rng: np.random.Generator) -> np.ndarray:
    """Draw ``n_q`` rows from N(mu, diag(sigma^2)) and L2-normalize each."""
    if n_q < 1:
        raise ContractError(f"n_q must be positive, got {n_q}")
    draws = mu + sigma * rng.standard_normal((n_q, mu.shape[0]))
    norms = np.linalg.norm(draws, axis=1, keepdims=True)
    if (norms < 1e-12).any():
        raise ContractError("pseudo-source draw with zero norm; centroid is degenerate")
    return draws / norms


def new_queue(rows: np.ndarray, from_source: bool = True) -> MomentumQueue:
    n = rows.shape[0]
    if n < 1:
        raise ContractError("queue must be initialised with at least one row")
    return MomentumQueue(rows.copy(), np.arange(n), np.full(n, from_source), n)


def enqueue(q: MomentumQueue, feats: np.ndarray, from_source: bool = False) -> MomentumQueue:
    b = feats.shape[0]
    if b == 0:
        return q
    if b > q.capacity:
        raise ContractError(f"cannot enqueue {b} rows into a queue of capacity {q.capacity}")
    data = np.concatenate([q.data[b:], feats])
    tags = np.concatenate([q.tags[b:], np.arange(q.inserted, q.inserted + b)])
    origin = np.concatenate([q.from_source[b:], np.full(b, from_source)])
    return MomentumQueue(data, tags, origin, q.inserted + b)


def maybe_restore(
    previous: MomentumQueue,
    updated: MomentumQueue,
    bank: np.ndarray,
    policy: RestorationPolicy,
    rng: np.random.Generator,
    gamma: float | None = None,
) -> tuple[MomentumQueue, bool]:
    """Keep ``updated`` unless the restoring draw fires.

    On restore the target update is discarded and ``n_enq`` bank rows,
    drawn without replacement, are enqueued into ``previous`` instead.
    Pass ``gamma`` to share one draw across several queues in a step.
    """
    if gamma is None:
        gamma = rng.random()
    if gamma > policy.p_rs:
        return updated, False
    n = min(policy.n_enq, bank.shape[0], previous.capacity)
    idx = rng.choice(bank.shape[0], size=n, replace=False)
    return enqueue(previous, bank[idx], from_source=True), True


def centroid_mean(q: MomentumQueue) -> np.ndarray:
    if len(q) == 0:
        raise ContractError("centroid of an empty queue")
    return q.data.mean(axis=0)


@dataclass
class ConfidentSet:
    indices: list[np.ndarray]  # per class, row indices into the batch, most confident first
    features: list[np.ndarray]  # per class, normalized feature rows in the same order

    def counts(self) -> list[int]:
        return [len(i) for i in self.indices]


def select_confident(probs: np.ndarray, features: np.ndarray, tau_cf: float, n_enq: int) -> ConfidentSet:
    """Per predicted class, the up-to-``n_enq`` most confident rows with confidence >= ``tau_cf``.

    Ties keep the lower row index first.
    """
    n_classes = probs.shape[1]
    pred = probs.argmax(axis=1)
    conf = probs[np.arange(probs.shape[0]), pred]
    norms = np.maximum(np.linalg.norm(features, axis=1, keepdims=True), 1e-12)
    unit = features / norms
    indices, feats = [], []
    for k in range(n_classes):
        cand = np.flatnonzero((pred == k) & (conf >= tau_cf))
        order = np.argsort(-conf[cand], kind="stable")
        chosen = cand[order[:n_enq]]
        indices.append(chosen)
        feats.append(unit[chosen])
    return ConfidentSet(indices, feats)


def _logsumexp_rows(s: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    m = s.max(axis=1, keepdims=True)
    e = np.exp(s - m)
    return e, m[:, 0] + np.log(e.sum(axis=1))


def contrastive_loss(
    anchors: np.ndarray,
    k: int,
    queues: list[np.ndarray],
    form: str = "log",
    temperature: float = 1.0,
) -> tuple[float, np.ndarray]:
    """Class-wise contrastive loss of ``anchors`` (all of class ``k``) against the queues.

    Positives are the rows of ``queues[k]``; negatives are the rows of every
    other class's queue. Queue rows are constants. The ``"log"`` form is the
    supervised-contrastive log-ratio with the positives inside the
    denominator. The ``"literal"`` form drops the log and puts only the
    negatives in the denominator. Returns the summed loss over anchors and
    its gradient with respect to the anchors.
    """
    anchors = np.asarray(anchors, dtype=float)
    if anchors.shape[0] == 0:
        return 0.0, np.zeros_like(anchors)
    if len(queues) < 2:
        raise ContractError("contrastive loss needs at least one negative class")
    pos = np.asarray(queues[k])
    neg = np.concatenate([np.asarray(q) for j, q in enumerate(queues) if j != k])
    if neg.shape[0] == 0:
        raise ContractError(f"no negatives for class {k}")
    t = temperature
    if form == "log":
        keys = np.concatenate([pos, neg])
        s = anchors @ keys.T / t
        e, lse = _logsumexp_rows(s)
        pos_mean = pos.mean(axis=0)
        loss = float((lse - anchors @ pos_mean / t).sum())
        soft = e / e.sum(axis=1, keepdims=True)
        grad = (soft @ keys - pos_mean) / t
        return loss, grad
    if form == "literal":
        s_pos = anchors @ pos.T / t
        s_neg = anchors @ neg.T / t
        # common shift cancels in the ratio
        m = np.maximum(s_pos.max(axis=1), s_neg.max(axis=1))[:, None]
        e_pos = np.exp(s_pos - m)
        e_neg = np.exp(s_neg - m)
        d = e_neg.sum(axis=1, keepdims=True)
        ratio = e_pos / d  # (A, |P|)
        n_pos = pos.shape[0]
        loss = float(-ratio.sum() / n_pos)
        neg_soft = e_neg / d
        r = ratio.sum(axis=1, keepdims=True)
        grad = -(ratio @ pos - r * (neg_soft @ neg)) / (n_pos * t)
        return loss, grad
    raise ContractError(f"unknown contrastive form {form!r}")


def contrastive_loss_all(
    anchor_sets: list[np.ndarray],
    queues: list[np.ndarray],
    form: str = "log",
    temperature: float = 1.0,
) -> tuple[float, list[np.ndarray]]:
    """Sum of :func:`contrastive_loss` over every class with at least one anchor.

    The log form shares one similarity matrix across classes.
    """
    n_classes = len(queues)
    if form != "log" or len(set(q.shape[0] for q in queues)) != 1:
        total, grads = 0.0, []
        for k in range(n_classes):
            loss, g = contrastive_loss(anchor_sets[k], k, queues, form, temperature)
            total += loss
            grads.append(g)
        return total, grads

    counts = [a.shape[0] for a in anchor_sets]
    if sum(counts) == 0:
        return 0.0, [np.zeros_like(a) for a in anchor_sets]
    if n_classes < 2:
        raise ContractError("contrastive loss needs at least one negative class")
    keys = np.concatenate(queues)
    pos_means = np.stack([q.mean(axis=0) for q in queues])
    anchors = np.concatenate(anchor_sets)
    cls = np.repeat(np.arange(n_classes), counts)
    s = anchors @ keys.T / temperature
    e, lse = _logsumexp_rows(s)
    pm = pos_means[cls]
    loss = float((lse - (anchors * pm).sum(axis=1) / temperature).sum())
    grad = ((e @ keys) / e.sum(axis=1, keepdims=True) - pm) / temperature
    return loss, np.split(grad, np.cumsum(counts)[:-1])


@dataclass
class ModalityMemory:
    """Everything the adapter keeps per modality: centroids, bank and queues."""

    centroids: ClassCentroids
    banks: list[np.ndarray]
    queues: list[MomentumQueue]

    def queue_arrays(self) -> list[np.ndarray]:
        return [q.data for q in self.queues]


def init_memory(features: np.ndarray, labels: np.ndarray, n_classes: int, n_q: int, rng: np.random.Generator) -> ModalityMemory:
    """Fit centroids, sample banks and fill every queue from its bank.

    The live centroid starts at the mean of the freshly filled queue.
    """
    centroids = build_source_centroids(features, labels, n_classes)
    banks = [sample_pseudo_source(centroids.mu_src[k], centroids.sigma_src[k], n_q, rng) for k in range(n_classes)]
    queues = [new_queue(bank, from_source=True) for bank in banks]
    for k, q in enumerate(queues):
        centroids.live[k] = centroid_mean(q)
    return ModalityMemory(centroids, banks, queues)
