"""Online multi-modal continual adaptation loop and its ablation variants.

Each streamed sample is predicted once, from the state that existed before
the sample arrived, and then used for one adaptation step:

1. augment each modality and run the teacher on raw and augmented inputs,
2. fuse raw/augmented predictions per modality with centroid weights,
3. fuse the two modalities into one pseudo-label per point,
4. run the student on the raw input, push its confident features into the
   class queues (or restore pseudo-source features instead), refresh the
   centroids and compute the contrastive loss,
5. take one SGD step on cross-entropy plus contrastive loss, then move the
   teacher towards the student by EMA.
"""

from __future__ import annotations

import enum
import time
from collections.abc import Callable, Iterable
from dataclasses import dataclass, field, replace

import numpy as np

from .errors import ConfigError, DivergenceError
from .fusion import intra_modal, teacher_predict, xmpf_fuse
from .memory import (
    ModalityMemory,
    RestorationPolicy,
    centroid_mean,
    contrastive_loss_all,
    enqueue,
    init_memory,
    maybe_restore,
    select_confident,
)
from .metrics import SegmentMetrics, confusion_matrix
from .nn import Gradients, backward, cross_entropy, ema_update, forward, mean_entropy, sgd_step
from .stream import DEFAULT_ANGLES_3D, DEFAULT_SCALES_2D, MODALITIES, ModelPair, PointBatch, augment


class MethodVariant(str, enum.Enum):
    COMAC = "comac"
    RAW_ONLY = "raw_only"
    AUG_ONLY = "aug_only"
    NO_IMPA = "no_impa"
    NO_XMPF = "no_xmpf"
    NO_UPDATE = "no_update"
    NO_RESTORE = "no_restore"
    PSLABEL = "pslabel"
    ENTROPY_MIN = "entropy_min"
    SOURCE_ONLY = "source_only"


# variants that run the full fusion + queue pipeline
QUEUE_VARIANTS = {
    MethodVariant.COMAC,
    MethodVariant.RAW_ONLY,
    MethodVariant.AUG_ONLY,
    MethodVariant.NO_IMPA,
    MethodVariant.NO_XMPF,
    MethodVariant.NO_UPDATE,
    MethodVariant.NO_RESTORE,
}

INTRA_MODE = {
    MethodVariant.RAW_ONLY: "raw",
    MethodVariant.AUG_ONLY: "aug",
    MethodVariant.NO_IMPA: "average",
}


@dataclass(frozen=True)
class AdapterConfig:
    lambda_s: float = 0.999
    lambda_cts: float = 1.0
    p_rs: float = 0.5
    tau_cf: float = 0.8
    n_q: int = 4096
    n_enq: int = 200
    lr: float = 1e-3
    aug_2d: tuple[float, ...] = DEFAULT_SCALES_2D
    aug_3d: tuple[float, ...] = DEFAULT_ANGLES_3D
    variant: MethodVariant = MethodVariant.COMAC
    eval_output: str = "softmax_average"
    cts_form: str = "log"
    cts_temperature: float = 1.0
    cts_reduction: str = "sum"

    def __post_init__(self):
        object.__setattr__(self, "variant", MethodVariant(self.variant))
        self.validate()

    def validate(self) -> None:
        for name in ("lambda_s", "p_rs", "tau_cf"):
            v = getattr(self, name)
            if not 0.0 <= v <= 1.0:
                raise ConfigError(f"{name} must lie in [0, 1], got {v}")
        if self.lambda_cts < 0:
            raise ConfigError(f"lambda_cts must be non-negative, got {self.lambda_cts}")
        if self.lr < 0:
            raise ConfigError(f"lr must be non-negative, got {self.lr}")
        if self.n_q < 1 or self.n_enq < 0 or self.n_enq > self.n_q:
            raise ConfigError(f"need 0 <= n_enq <= n_q and n_q >= 1, got n_q={self.n_q}, n_enq={self.n_enq}")
        if self.eval_output not in ("softmax_average", "cross_modal"):
            raise ConfigError(f"eval_output must be softmax_average or cross_modal, got {self.eval_output!r}")
        if self.cts_form not in ("log", "literal"):
            raise ConfigError(f"cts_form must be log or literal, got {self.cts_form!r}")
        if self.cts_reduction not in ("sum", "mean"):
            raise ConfigError(f"cts_reduction must be sum or mean, got {self.cts_reduction!r}")
        if self.cts_temperature <= 0:
            raise ConfigError("cts_temperature must be positive")

    @property
    def policy(self) -> RestorationPolicy:
        return RestorationPolicy(self.p_rs, self.n_enq, self.tau_cf)


@dataclass
class AdapterState:
    pairs: dict[str, ModelPair]
    memory: dict[str, ModalityMemory]
    rng: np.random.Generator  # restoration draws and bank sampling
    t: int = 0
    last_record: dict = field(default_factory=dict)
    last_pseudo_labels: np.ndarray | None = None


def init(
    pair_2d: ModelPair,
    pair_3d: ModelPair,
    source_features: dict[str, tuple[np.ndarray, np.ndarray]],
    cfg: AdapterConfig,
    seed: int,
) -> AdapterState:
    """Teachers copied from students, centroids fitted, banks sampled, queues filled."""
    n_classes = pair_2d.student.n_classes
    rng = np.random.default_rng([seed, 0xC0AC])
    memory = {}
    for m in MODALITIES:
        feats, labels = source_features[m]
        missing = sorted(set(range(n_classes)) - set(np.unique(labels).tolist()))
        if missing:
            raise ConfigError(f"source features for {m} miss classes {missing}")
        memory[m] = init_memory(feats, labels, n_classes, cfg.n_q, rng)
    pairs = {
        "2d": ModelPair(pair_2d.student, pair_2d.student.copy(), "2d"),
        "3d": ModelPair(pair_3d.student, pair_3d.student.copy(), "3d"),
    }
    return AdapterState(pairs, memory, np.random.default_rng([seed, 0x4E57]))


def student_update(
    pair: ModelPair,
    x: np.ndarray,
    pseudo_labels: np.ndarray,
    cfg: AdapterConfig,
    mask: np.ndarray | None = None,
    grad_z: np.ndarray | None = None,
    cache=None,
) -> tuple[ModelPair, float]:
    """One SGD step on hard-label cross-entropy (optionally masked), then EMA."""
    if cache is None:
        cache = forward(pair.student, x)
    if mask is None:
        ce, g = cross_entropy(cache.probs, pseudo_labels)
    else:
        g = np.zeros_like(cache.probs)
        ce = 0.0
        if mask.any():
            ce, g_kept = cross_entropy(cache.probs[mask], pseudo_labels[mask])
            g[mask] = g_kept
    grads = backward(pair.student, cache, g, grad_z)
    return _apply(pair, grads, cfg), ce


def _apply(pair: ModelPair, grads: Gradients, cfg: AdapterConfig) -> ModelPair:
    student = sgd_step(pair.student, grads, cfg.lr)
    teacher = ema_update(pair.teacher, student, cfg.lambda_s)
    return ModelPair(student, teacher, pair.modality)


def median_filter(probs: np.ndarray) -> np.ndarray:
    """Keep points whose confidence is at least the median confidence of their predicted class."""
    pred = probs.argmax(axis=1)
    conf = probs[np.arange(probs.shape[0]), pred]
    keep = np.zeros(probs.shape[0], dtype=bool)
    for k in np.unique(pred):
        rows = pred == k
        keep[rows] = conf[rows] >= np.median(conf[rows])
    return keep


def _augmented(batch: PointBatch, m: str, cfg: AdapterConfig) -> list[np.ndarray]:
    params = cfg.aug_2d if m == "2d" else cfg.aug_3d
    return [b.modality(m) for b in augment(batch, m, params)]


def step(state: AdapterState, batch: PointBatch, cfg: AdapterConfig) -> tuple[np.ndarray, AdapterState]:
    """Predict ``batch`` from the incoming state, then adapt on it.

    Labels on ``batch`` are never read. The state is updated in place and
    returned; the per-step diagnostics land in ``state.last_record``.
    """
    v = cfg.variant
    record: dict = {"t": state.t, "segment": batch.segment_id}
    xs = {m: batch.modality(m) for m in MODALITIES}

    if v not in QUEUE_VARIANTS:
        raw = {m: forward(state.pairs[m].teacher, xs[m]).probs for m in MODALITIES}
        eval_pred = 0.5 * (raw["2d"] + raw["3d"])
        if v == MethodVariant.PSLABEL:
            for m in MODALITIES:
                labels = raw[m].argmax(axis=1)
                keep = median_filter(raw[m])
                state.pairs[m], ce = student_update(state.pairs[m], xs[m], labels, cfg, mask=keep)
                _check_finite(ce, state.t, m)
                record[f"ce_{m}"] = ce
                record[f"kept_{m}"] = int(keep.sum())
        elif v == MethodVariant.ENTROPY_MIN:
            for m in MODALITIES:
                pair = state.pairs[m]
                cache = forward(pair.student, xs[m])
                ent, g = mean_entropy(cache.probs)
                _check_finite(ent, state.t, m)
                grads = backward(pair.student, cache, g)
                n_enc = len(grads.grads) - 2
                frozen = [np.zeros_like(a) for a in grads.grads[:n_enc]] + grads.grads[n_enc:]
                state.pairs[m] = _apply(pair, Gradients(frozen), cfg)
                record[f"entropy_{m}"] = ent
        state.t += 1
        state.last_record = record
        return eval_pred, state

    # teacher inference and pseudo-labels
    outs = {m: teacher_predict(state.pairs[m].teacher, xs[m], _augmented(batch, m, cfg)) for m in MODALITIES}
    mode = INTRA_MODE.get(v, "adaptive")
    intra = {m: intra_modal(outs[m], state.memory[m].centroids.live, mode) for m in MODALITIES}
    xm = xmpf_fuse(intra["2d"], intra["3d"], equal_weights=(v == MethodVariant.NO_XMPF))
    if cfg.eval_output == "cross_modal":
        eval_pred = xm.p_xm
    else:
        eval_pred = 0.5 * (outs["2d"].p + outs["3d"].p)
    y_hat = xm.y_hat
    state.last_pseudo_labels = y_hat

    # queues, centroids, losses; one restoring draw per step shared by every queue
    gamma = float(state.rng.random())
    restored = False
    policy = cfg.policy
    for m in MODALITIES:
        pair, mem = state.pairs[m], state.memory[m]
        cache = forward(pair.student, xs[m])
        conf = select_confident(cache.probs, cache.z, cfg.tau_cf, cfg.n_enq)
        for k, prev in enumerate(mem.queues):
            updated = prev if v == MethodVariant.NO_UPDATE else enqueue(prev, conf.features[k])
            if v == MethodVariant.NO_RESTORE:
                new = updated
            else:
                new, restored = maybe_restore(prev, updated, mem.banks[k], policy, state.rng, gamma)
            mem.queues[k] = new
            if new is not prev and v != MethodVariant.NO_UPDATE:
                mem.centroids.live[k] = centroid_mean(new)
        grad_z = None
        cts = 0.0
        if cfg.lambda_cts > 0:
            cts, g_anchor = contrastive_loss_all(
                conf.features, mem.queue_arrays(), cfg.cts_form, cfg.cts_temperature
            )
            scale = cfg.lambda_cts
            n_anchor = sum(conf.counts())
            if cfg.cts_reduction == "mean" and n_anchor:
                scale /= n_anchor
                cts /= n_anchor
            grad_z = np.zeros_like(cache.z)
            for k in range(len(mem.queues)):
                if conf.indices[k].size:
                    grad_z[conf.indices[k]] = scale * g_anchor[k]
        state.pairs[m], ce = student_update(pair, xs[m], y_hat, cfg, grad_z=grad_z, cache=cache)
        _check_finite(ce + cts, state.t, m)
        record[f"ce_{m}"] = ce
        record[f"cts_{m}"] = cts
        record[f"agree_{m}"] = intra[m].agreement
        record[f"w_{m}"] = float(intra[m].w.mean())
        record[f"w_aug_{m}"] = float(intra[m].w_aug.mean())
        record[f"w_hat_{m}"] = float(intra[m].w_hat.mean())
        record[f"enqueued_{m}"] = conf.counts()
        record[f"source_frac_{m}"] = float(np.mean([q.source_fraction for q in mem.queues]))
    record["restored"] = bool(restored) and v != MethodVariant.NO_RESTORE
    state.t += 1
    state.last_record = record
    return eval_pred, state


def _check_finite(value: float, t: int, m: str) -> None:
    if not np.isfinite(value):
        raise DivergenceError(f"non-finite {m} loss at step {t}")


@dataclass
class RunResult:
    segments: list[SegmentMetrics]
    overall: SegmentMetrics | None
    trace: list[dict]
    wall_clock: float
    predictions: list[np.ndarray] | None = None

    def as_dict(self) -> dict:
        return {
            "segments": [s.as_dict() for s in self.segments],
            "overall": self.overall.as_dict() if self.overall else None,
            "wall_clock": self.wall_clock,
        }


def run_sequence(
    state: AdapterState,
    stream: Iterable[PointBatch],
    cfg: AdapterConfig,
    segment_names: list[str],
    keep_predictions: bool = False,
    on_step: Callable[[AdapterState, dict], None] | None = None,
) -> RunResult:
    """Adapt over the stream once, scoring each prediction as it is made.

    ``on_step(state, record)`` runs after every step and may add fields to
    the trace record.
    """
    n_classes = state.pairs["2d"].student.n_classes
    cms = [np.zeros((n_classes, n_classes), dtype=np.int64) for _ in segment_names]
    trace, preds = [], []
    seen = set()
    start = time.perf_counter()
    for batch in stream:
        if batch.sample_index in seen:
            raise ConfigError(f"sample {batch.sample_index} seen twice; the protocol is one pass")
        seen.add(batch.sample_index)
        eval_pred, state = step(state, batch, cfg)
        labels_hat = eval_pred.argmax(axis=1)
        cms[batch.segment_id] += confusion_matrix(labels_hat, batch.labels, n_classes)
        rec = dict(state.last_record)
        rec["correct"] = int((labels_hat == batch.labels).sum())
        rec["n_points"] = int(batch.n_points)
        if state.last_pseudo_labels is not None:
            rec["pseudo_correct"] = int((state.last_pseudo_labels == batch.labels).sum())
        if on_step is not None:
            on_step(state, rec)
        trace.append(rec)
        if keep_predictions:
            preds.append(eval_pred)
    wall = time.perf_counter() - start
    if not trace:
        return RunResult([], None, [], wall, preds if keep_predictions else None)
    segments = [SegmentMetrics.from_confusion(n, cm) for n, cm in zip(segment_names, cms) if cm.sum()]
    overall = SegmentMetrics.from_confusion("overall", sum(cms))
    return RunResult(segments, overall, trace, wall, preds if keep_predictions else None)


def with_variant(cfg: AdapterConfig, variant) -> AdapterConfig:
    return replace(cfg, variant=MethodVariant(variant))
