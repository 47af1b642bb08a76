"""Centroid-weighted prediction fusion within and across modalities.

Within a modality the teacher's raw prediction and its augmentation-average
prediction are mixed point by point, each weighted by how strongly its
feature agrees with the live centroid of the class it predicts. Across
modalities the two intra-modal predictions are mixed again, with a weight
that doubles up when raw and augmented predictions agree on the class.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import ContractError
from .nn import Network, forward, softmax

ZERO_NORM = 1e-12


@dataclass
class TeacherOutput:
    p: np.ndarray  # raw prediction (N, C)
    p_aug: np.ndarray  # augmentation-average prediction (N, C)
    z: np.ndarray  # raw unit feature (N, F)
    z_aug: np.ndarray  # normalized augmentation-average feature (N, F)


@dataclass
class IntraModalResult:
    p: np.ndarray
    p_aug: np.ndarray
    z: np.ndarray
    z_aug: np.ndarray
    k: np.ndarray
    k_aug: np.ndarray
    w: np.ndarray
    w_aug: np.ndarray
    p_hat: np.ndarray
    w_hat: np.ndarray

    @property
    def agreement(self) -> float:
        return float((self.k == self.k_aug).mean())


@dataclass
class CrossModalLabel:
    p_xm: np.ndarray
    y_hat: np.ndarray


def teacher_predict(teacher: Network, x: np.ndarray, x_augs: list[np.ndarray]) -> TeacherOutput:
    """Raw and augmentation-averaged predictions/features of one modality.

    Augmented copies must keep the point order of ``x``. With no copies the
    augmented outputs equal the raw ones.
    """
    n = x.shape[0]
    for i, xa in enumerate(x_augs):
        if xa.shape[0] != n:
            raise ContractError(f"augmented copy {i} has {xa.shape[0]} points, expected {n}")
    cache = forward(teacher, np.concatenate([x, *x_augs]) if x_augs else x)
    p, z = cache.probs[:n], cache.z[:n]
    if not x_augs:
        return TeacherOutput(p, p.copy(), z, z.copy())
    n_aug = len(x_augs)
    p_aug = cache.probs[n:].reshape(n_aug, n, -1).mean(axis=0)
    z_mean = cache.z[n:].reshape(n_aug, n, -1).mean(axis=0)
    norms = np.linalg.norm(z_mean, axis=1, keepdims=True)
    degenerate = norms[:, 0] < ZERO_NORM
    z_aug = np.where(degenerate[:, None], z, z_mean / np.maximum(norms, ZERO_NORM))
    return TeacherOutput(p, p_aug, z, z_aug)


def argmax_low(p: np.ndarray) -> np.ndarray:
    # np.argmax already returns the first maximal index
    return p.argmax(axis=1)


def impa_weights(
    z: np.ndarray, z_aug: np.ndarray, centroids: np.ndarray, k: np.ndarray, k_aug: np.ndarray
) -> tuple[np.ndarray, np.ndarray]:
    rows = np.arange(z.shape[0])
    w = softmax(z @ centroids.T)[rows, k]
    w_aug = softmax(z_aug @ centroids.T)[rows, k_aug]
    return w, w_aug


def impa_fuse(p: np.ndarray, p_aug: np.ndarray, w: np.ndarray, w_aug: np.ndarray) -> np.ndarray:
    return (w[:, None] * p + w_aug[:, None] * p_aug) / (w + w_aug)[:, None]


def xmpf_weight(w: np.ndarray, w_aug: np.ndarray, k: np.ndarray, k_aug: np.ndarray) -> np.ndarray:
    return np.where(k == k_aug, w + w_aug, np.maximum(w, w_aug))


def intra_modal(out: TeacherOutput, centroids: np.ndarray, mode: str = "adaptive") -> IntraModalResult:
    """Fuse raw and augmented predictions of one modality.

    ``mode`` selects the mixing rule: ``adaptive`` (centroid weights),
    ``raw`` (raw prediction only), ``aug`` (augmented only) or ``average``
    (equal weights). The inter-modal weight always uses the centroid
    weights.
    """
    k, k_aug = argmax_low(out.p), argmax_low(out.p_aug)
    w, w_aug = impa_weights(out.z, out.z_aug, centroids, k, k_aug)
    if mode == "adaptive":
        p_hat = impa_fuse(out.p, out.p_aug, w, w_aug)
    elif mode == "raw":
        p_hat = out.p
    elif mode == "aug":
        p_hat = out.p_aug
    elif mode == "average":
        p_hat = 0.5 * (out.p + out.p_aug)
    else:
        raise ContractError(f"unknown intra-modal mode {mode!r}")
    return IntraModalResult(
        out.p, out.p_aug, out.z, out.z_aug, k, k_aug, w, w_aug, p_hat, xmpf_weight(w, w_aug, k, k_aug)
    )


def xmpf_fuse(r2d: IntraModalResult, r3d: IntraModalResult, equal_weights: bool = False) -> CrossModalLabel:
    if r2d.p_hat.shape != r3d.p_hat.shape:
        raise ContractError("modalities disagree on point count or class count")
    if equal_weights:
        p_xm = 0.5 * (r2d.p_hat + r3d.p_hat)
    else:
        a, b = r2d.w_hat[:, None], r3d.w_hat[:, None]
        p_xm = (a * r2d.p_hat + b * r3d.p_hat) / (a + b)
    return CrossModalLabel(p_xm, argmax_low(p_xm))
