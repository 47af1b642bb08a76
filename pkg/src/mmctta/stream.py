"""Synthetic two-modality point world, source pretraining and the target stream.

Every point carries a class label, an appearance vector (the "2D" modality,
``dim_2d`` wide) and a coordinate vector (the "3D" modality, ``dim_3d`` wide,
first two coordinates in the ground plane). Clean features are the class
prototype plus isotropic Gaussian noise. The target stream is cut into
segments, each applying its own corruption: an additive bias and extra noise
on appearance, and a rotation about the vertical axis, extra noise and point
dropout on coordinates.
"""

from __future__ import annotations

import math
from collections.abc import Iterator
from dataclasses import dataclass, field

import numpy as np

from .errors import ConfigError, DivergenceError
from .nn import Network, backward, cross_entropy, forward, init_network, sgd_step

MODALITIES = ("2d", "3d")
DEFAULT_SCALES_2D = (0.5, 0.625, 0.75, 0.875)
DEFAULT_ANGLES_3D = (60.0, 120.0, 180.0, 240.0, 300.0)


@dataclass(frozen=True)
class WorldSpec:
    proto_2d: np.ndarray  # (n_classes, dim_2d)
    proto_3d: np.ndarray  # (n_classes, dim_3d)
    noise: float = 0.4
    points_per_sample: int = 256
    seed: int = 0

    @property
    def n_classes(self) -> int:
        return self.proto_2d.shape[0]

    @property
    def dim_2d(self) -> int:
        return self.proto_2d.shape[1]

    @property
    def dim_3d(self) -> int:
        return self.proto_3d.shape[1]

    def validate(self) -> None:
        if self.n_classes < 2:
            raise ConfigError(f"need at least 2 classes, got {self.n_classes}")
        if self.proto_3d.shape[0] != self.n_classes:
            raise ConfigError("2D and 3D prototype tables disagree on the class count")
        if self.dim_3d < 2:
            raise ConfigError("3D modality needs at least two ground-plane coordinates")
        if self.noise < 0:
            raise ConfigError(f"noise scale must be non-negative, got {self.noise}")
        if self.points_per_sample < self.n_classes:
            raise ConfigError(
                f"points_per_sample ({self.points_per_sample}) must be at least n_classes ({self.n_classes})"
            )
        for name, proto in (("2d", self.proto_2d), ("3d", self.proto_3d)):
            d = min_pairwise_distance(proto)
            if d <= 2.0 * self.noise:
                raise ConfigError(
                    f"{name} prototypes too close: min pairwise distance {d:.4g} <= 2 x noise ({2 * self.noise:.4g})"
                )


@dataclass(frozen=True)
class SegmentSpec:
    name: str
    length: int
    bias_2d: np.ndarray | None = None
    noise_gain_2d: float = 0.0
    rotation_3d: float = 0.0  # radians
    noise_gain_3d: float = 0.0
    dropout_3d: float = 0.0

    def validate(self, dim_2d: int) -> None:
        if self.length < 1:
            raise ConfigError(f"segment {self.name!r}: length must be >= 1")
        if self.noise_gain_2d < 0 or self.noise_gain_3d < 0:
            raise ConfigError(f"segment {self.name!r}: noise gains must be >= 0")
        if not 0.0 <= self.dropout_3d < 1.0:
            raise ConfigError(f"segment {self.name!r}: dropout must lie in [0, 1)")
        if self.bias_2d is not None and np.shape(self.bias_2d) != (dim_2d,):
            raise ConfigError(f"segment {self.name!r}: bias_2d must have {dim_2d} entries")


@dataclass
class PointBatch:
    x2d: np.ndarray
    x3d: np.ndarray
    labels: np.ndarray
    segment_id: int = -1
    sample_index: int = -1

    def __post_init__(self):
        n = self.labels.shape[0]
        if self.x2d.shape[0] != n or self.x3d.shape[0] != n:
            raise ValueError("x2d, x3d and labels must have the same number of rows")

    @property
    def n_points(self) -> int:
        return self.labels.shape[0]

    def modality(self, m: str) -> np.ndarray:
        return self.x2d if m == "2d" else self.x3d


@dataclass
class SourceDataset:
    train: list[PointBatch]
    holdout: list[PointBatch] = field(default_factory=list)

    @staticmethod
    def stack(batches: list[PointBatch]) -> PointBatch:
        return PointBatch(
            np.concatenate([b.x2d for b in batches]),
            np.concatenate([b.x3d for b in batches]),
            np.concatenate([b.labels for b in batches]),
        )


@dataclass
class ModelPair:
    student: Network
    teacher: Network
    modality: str


def min_pairwise_distance(points: np.ndarray) -> float:
    diff = points[:, None, :] - points[None, :, :]
    d = np.sqrt((diff**2).sum(-1))
    d[np.diag_indices(points.shape[0])] = np.inf
    return float(d.min())


def _draw_prototypes(rng, n_classes, scale, min_sep, what, tries=1000):
    scale = np.asarray(scale, dtype=float)
    for _ in range(tries):
        proto = rng.standard_normal((n_classes, scale.shape[0])) * scale
        if min_pairwise_distance(proto) >= min_sep:
            return proto
    raise ConfigError(f"could not place {n_classes} {what} prototypes {min_sep} apart; loosen the separation")


def make_world(
    seed: int,
    n_classes: int = 5,
    dim_2d: int = 8,
    dim_3d: int = 3,
    noise: float = 0.4,
    points_per_sample: int = 256,
    scale_2d: float = 1.0,
    offset_2d: float = 2.0,
    scale_xy: float = 0.4,
    scale_z: float = 2.0,
    min_sep_2d: float = 1.5,
    min_sep_3d: float = 1.5,
) -> WorldSpec:
    """Draw class prototypes for both modalities.

    Appearance prototypes are centred at ``offset_2d`` on every axis so that
    rescaling appearance (the 2D test-time augmentation) shifts them
    systematically. Coordinate prototypes spread by ``scale_xy`` in the
    ground plane and ``scale_z`` vertically.
    """
    rng = np.random.default_rng([seed, 0x5EED])
    proto_2d = offset_2d + _draw_prototypes(rng, n_classes, np.full(dim_2d, scale_2d), min_sep_2d, "2D")
    scales_3d = np.array([scale_xy, scale_xy] + [scale_z] * (dim_3d - 2))
    proto_3d = _draw_prototypes(rng, n_classes, scales_3d, min_sep_3d, "3D")
    world = WorldSpec(proto_2d, proto_3d, noise, points_per_sample, seed)
    world.validate()
    return world


def rotate_z(x3d: np.ndarray, angle: float) -> np.ndarray:
    c, s = math.cos(angle), math.sin(angle)
    out = x3d.copy()
    out[:, 0] = c * x3d[:, 0] - s * x3d[:, 1]
    out[:, 1] = s * x3d[:, 0] + c * x3d[:, 1]
    return out


def _draw_clean(world: WorldSpec, n: int, rng: np.random.Generator):
    labels = rng.integers(0, world.n_classes, size=n)
    x2d = world.proto_2d[labels] + world.noise * rng.standard_normal((n, world.dim_2d))
    x3d = world.proto_3d[labels] + world.noise * rng.standard_normal((n, world.dim_3d))
    return labels, x2d, x3d


def make_source_dataset(world: WorldSpec, n_samples: int, seed: int, holdout_fraction: float = 0.2) -> SourceDataset:
    if n_samples < 10:
        raise ConfigError(f"source dataset needs at least 10 samples, got {n_samples}")
    world.validate()
    rng = np.random.default_rng([seed, 0x50C])
    batches = []
    for i in range(n_samples):
        labels, x2d, x3d = _draw_clean(world, world.points_per_sample, rng)
        batches.append(PointBatch(x2d, x3d, labels, -1, i))
    n_hold = max(1, int(round(holdout_fraction * n_samples)))
    return SourceDataset(batches[n_hold:], batches[:n_hold])


def corrupt(
    world: WorldSpec, seg: SegmentSpec, labels, x2d, x3d, rng: np.random.Generator
) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Apply one segment's corruption. Always consumes the same random draws."""
    n = labels.shape[0]
    extra_2d = rng.standard_normal((n, world.dim_2d))
    extra_3d = rng.standard_normal((n, world.dim_3d))
    keep_draw = rng.random(n)
    x2d = x2d + seg.noise_gain_2d * world.noise * extra_2d
    if seg.bias_2d is not None:
        x2d = x2d + seg.bias_2d
    x3d = rotate_z(x3d, seg.rotation_3d) + seg.noise_gain_3d * world.noise * extra_3d
    keep = keep_draw >= seg.dropout_3d
    if not keep.any():
        keep[0] = True
    return labels[keep], x2d[keep], x3d[keep]


def make_stream(world: WorldSpec, segments: list[SegmentSpec], seed: int) -> Iterator[PointBatch]:
    """Yield the target stream segment by segment; deterministic in ``seed``."""
    if not segments:
        raise ConfigError("stream needs at least one segment")
    world.validate()
    for seg in segments:
        seg.validate(world.dim_2d)
    rng = np.random.default_rng([seed, 0x57E])
    index = 0
    for sid, seg in enumerate(segments):
        for _ in range(seg.length):
            labels, x2d, x3d = _draw_clean(world, world.points_per_sample, rng)
            labels, x2d, x3d = corrupt(world, seg, labels, x2d, x3d, rng)
            yield PointBatch(x2d, x3d, labels, sid, index)
            index += 1


def augment(batch: PointBatch, modality: str, params) -> list[PointBatch]:
    """One copy per factor: appearance scale factors for 2D, z-rotations in degrees for 3D."""
    out = []
    for f in params:
        if modality == "2d":
            out.append(PointBatch(batch.x2d * f, batch.x3d, batch.labels, batch.segment_id, batch.sample_index))
        elif modality == "3d":
            x3d = rotate_z(batch.x3d, math.radians(f))
            out.append(PointBatch(batch.x2d, x3d, batch.labels, batch.segment_id, batch.sample_index))
        else:
            raise ValueError(f"unknown modality {modality!r}")
    return out


def even_scales_2d(n: int) -> list[float]:
    """``n`` evenly spaced scale factors covering [0.5, 1)."""
    return [0.5 + 0.5 * i / n for i in range(n)]


def even_angles_3d(n: int) -> list[float]:
    """``n`` evenly spaced angles in degrees strictly inside (0, 360)."""
    return [360.0 * i / (n + 1) for i in range(1, n + 1)]


def shift_direction(world: WorldSpec) -> np.ndarray:
    """Unit appearance-shift direction drawn from the world seed."""
    rng = np.random.default_rng([world.seed, 0xB1A5])
    v = rng.standard_normal(world.dim_2d)
    return v / np.linalg.norm(v)


def default_schedule(world: WorldSpec, length: int = 200) -> list[SegmentSpec]:
    """Six segments of increasing severity, alternating the corrupted modality.

    The last segment corrupts both modalities.
    """
    u = shift_direction(world)
    return [
        SegmentSpec("2d-mild", length, bias_2d=1.5 * u, noise_gain_2d=0.5),
        SegmentSpec("3d-mild", length, rotation_3d=math.radians(5), noise_gain_3d=2.5),
        SegmentSpec("2d-moderate", length, bias_2d=2.3 * u, noise_gain_2d=0.75),
        SegmentSpec("3d-moderate", length, rotation_3d=math.radians(10), noise_gain_3d=3.8, dropout_3d=0.3),
        SegmentSpec("2d-strong", length, bias_2d=3.0 * u, noise_gain_2d=1.0),
        SegmentSpec(
            "both-strong", length, bias_2d=3.0 * u, noise_gain_2d=1.0,
            rotation_3d=math.radians(15), noise_gain_3d=4.5, dropout_3d=0.5,
        ),
    ]


def forgetting_schedule(world: WorldSpec, length: int = 200) -> list[SegmentSpec]:
    """The default schedule followed by a return to clean data."""
    return default_schedule(world, length) + [SegmentSpec("clean-return", length)]


def accuracy(net: Network, x: np.ndarray, y: np.ndarray) -> float:
    return float((forward(net, x).probs.argmax(axis=1) == y).mean())


def init_pairs(
    world: WorldSpec, seed: int, hidden: tuple[int, ...] = (32, 32), feature_dim: int = 16
) -> tuple[ModelPair, ModelPair]:
    rng = np.random.default_rng([seed, 0x1417])
    pairs = []
    for m, dim in (("2d", world.dim_2d), ("3d", world.dim_3d)):
        net = init_network(dim, world.n_classes, rng, hidden, feature_dim)
        pairs.append(ModelPair(net, net.copy(), m))
    return pairs[0], pairs[1]


def pretrain(
    pair_2d: ModelPair,
    pair_3d: ModelPair,
    data: SourceDataset,
    epochs: int = 30,
    lr: float = 0.05,
    seed: int = 0,
    batch_size: int = 256,
) -> tuple[ModelPair, ModelPair, dict[str, tuple[np.ndarray, np.ndarray]]]:
    """Train each student with cross-entropy and minibatch SGD.

    Teachers are reset to exact copies of the trained students. Also
    returns, per modality, the normalized encoder features of every
    training point with their labels, for building source centroids.
    """
    rng = np.random.default_rng([seed, 0x7A1])
    pool = SourceDataset.stack(data.train)
    nets = {"2d": pair_2d.student, "3d": pair_3d.student}
    n = pool.n_points
    for epoch in range(epochs):
        order = rng.permutation(n)
        for m in MODALITIES:
            net = nets[m]
            x = pool.modality(m)
            for start in range(0, n, batch_size):
                idx = order[start:start + batch_size]
                cache = forward(net, x[idx])
                loss, g = cross_entropy(cache.probs, pool.labels[idx])
                if not np.isfinite(loss):
                    raise DivergenceError(f"{m} pretraining diverged at epoch {epoch}")
                net = sgd_step(net, backward(net, cache, g), lr)
            nets[m] = net
    feats = {m: (forward(nets[m], pool.modality(m)).z, pool.labels) for m in MODALITIES}
    out = tuple(ModelPair(nets[m], nets[m].copy(), m) for m in MODALITIES)
    return out[0], out[1], feats
