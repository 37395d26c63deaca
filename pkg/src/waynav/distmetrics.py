"""Diagonal-Gaussian prototypes and distribution-to-distribution dissimilarities.

Embeddings are diagonal Gaussians (mean vector + per-dimension variance).
Prototypes are built by averaging member means and member variances.  Four
dissimilarities are supported, each either as a single pooled scalar
(multivariate form) or as the vector of per-dimension terms whose sum equals
that scalar (aggregate-univariate form).
"""

from __future__ import annotations

from dataclasses import dataclass
from enum import Enum
from typing import Iterable, Sequence

import numpy as np


class Metric(Enum):
    EUCLIDEAN = "euclidean"
    SYM_KL = "sym_kl"
    WASSERSTEIN2 = "wasserstein2"
    SYM_MAHALANOBIS = "sym_mahalanobis"


class Form(Enum):
    MULTIVARIATE = "multivariate"
    AGGREGATE_UNIVARIATE = "aggregate_univariate"


@dataclass(frozen=True)
class MetricKind:
    """A dissimilarity choice: which metric, and scalar vs per-dimension input."""

    metric: Metric
    form: Form

    @staticmethod
    def parse(metric: str, form: str) -> "MetricKind":
        return MetricKind(Metric(metric), Form(form))

    def classifier_input_dim(self, embed_dim: int) -> int:
        # two cameras are concatenated downstream
        if self.form is Form.MULTIVARIATE:
            return 2
        return 2 * embed_dim

    def label(self) -> str:
        return f"{self.metric.value}/{self.form.value}"


ALL_METRIC_KINDS = tuple(MetricKind(m, f) for m in Metric for f in Form)


@dataclass
class GaussianDiag:
    """Diagonal-covariance Gaussian: mean vector and per-dimension variances."""

    mean: np.ndarray
    var: np.ndarray

    def __post_init__(self):
        self.mean = np.asarray(self.mean, dtype=float)
        self.var = np.asarray(self.var, dtype=float)
        if self.mean.shape != self.var.shape or self.mean.ndim != 1:
            raise ValueError(f"mean/var must be 1-D and equal shape, got {self.mean.shape} vs {self.var.shape}")
        if not np.all(np.isfinite(self.mean)) or not np.all(np.isfinite(self.var)):
            raise ValueError("non-finite Gaussian parameters")
        if np.any(self.var <= 0.0):
            raise ValueError("variances must be strictly positive")

    @property
    def dim(self) -> int:
        return self.mean.shape[0]


def combine(members: Sequence[GaussianDiag] | Iterable[GaussianDiag]) -> GaussianDiag:
    """Combine member distributions into one prototype (equal-weight averages)."""
    members = list(members)
    if not members:
        raise ValueError("cannot combine an empty member list")
    dim = members[0].dim
    if any(m.dim != dim for m in members):
        raise ValueError("member dimension mismatch")
    mean = np.mean([m.mean for m in members], axis=0)
    var = np.mean([m.var for m in members], axis=0)
    return GaussianDiag(mean, var)


def _check_pair(q: GaussianDiag, s: GaussianDiag) -> None:
    if q.dim != s.dim:
        raise ValueError(f"dimension mismatch: {q.dim} vs {s.dim}")


def pair_terms(metric: Metric, mq, vq, ms, vs) -> np.ndarray:
    """Per-dimension dissimilarity terms; broadcasts over leading axes.

    Summing the last axis gives the multivariate scalar for every metric.
    """
    mq, vq, ms, vs = (np.asarray(a) for a in (mq, vq, ms, vs))
    delta = mq - ms
    if metric is Metric.EUCLIDEAN:
        return delta * delta
    if metric is Metric.SYM_MAHALANOBIS:
        pooled = 0.5 * (vq + vs)
        return delta * delta / pooled
    if metric is Metric.SYM_KL:
        return 0.5 * (vq / vs + vs / vq - 2.0) + 0.5 * delta * delta * (1.0 / vq + 1.0 / vs)
    if metric is Metric.WASSERSTEIN2:
        dsig = np.sqrt(vq) - np.sqrt(vs)
        return delta * delta + dsig * dsig
    raise ValueError(f"unknown metric {metric}")


def pair_terms_backward(metric: Metric, mq, vq, ms, vs, g):
    """Gradients of pair_terms wrt (mq, vq, ms, vs) given upstream per-term grads g."""
    mq, vq, ms, vs, g = (np.asarray(a) for a in (mq, vq, ms, vs, g))
    delta = mq - ms
    if metric is Metric.EUCLIDEAN:
        gm = 2.0 * delta * g
        z = np.zeros(np.broadcast_shapes(vq.shape, vs.shape, g.shape))
        return gm, z, -gm, z.copy()
    if metric is Metric.SYM_MAHALANOBIS:
        pooled = 0.5 * (vq + vs)
        gm = 2.0 * delta / pooled * g
        gp = -(delta * delta) / (pooled * pooled) * g
        gv = 0.5 * gp
        return gm, gv, -gm, gv.copy()
    if metric is Metric.SYM_KL:
        gm = delta * (1.0 / vq + 1.0 / vs) * g
        gvq = (0.5 * (1.0 / vs - vs / (vq * vq)) - 0.5 * delta * delta / (vq * vq)) * g
        gvs = (0.5 * (1.0 / vq - vq / (vs * vs)) - 0.5 * delta * delta / (vs * vs)) * g
        return gm, gvq, -gm, gvs
    if metric is Metric.WASSERSTEIN2:
        sq, ss = np.sqrt(vq), np.sqrt(vs)
        dsig = sq - ss
        gm = 2.0 * delta * g
        gvq = dsig / sq * g
        gvs = -dsig / ss * g
        return gm, gvq, -gm, gvs
    raise ValueError(f"unknown metric {metric}")


def euclidean_sq(q: GaussianDiag, s: GaussianDiag) -> float:
    """Squared Euclidean distance between the means; variances are ignored."""
    _check_pair(q, s)
    return float(pair_terms(Metric.EUCLIDEAN, q.mean, q.var, s.mean, s.var).sum())


def sym_mahalanobis(q: GaussianDiag, s: GaussianDiag) -> float:
    """Squared Mahalanobis distance under the pooled per-dimension variance."""
    _check_pair(q, s)
    return float(pair_terms(Metric.SYM_MAHALANOBIS, q.mean, q.var, s.mean, s.var).sum())


def kl_divergence(q: GaussianDiag, s: GaussianDiag) -> float:
    """Directed KL(q || s) in closed form for diagonal Gaussians."""
    _check_pair(q, s)
    delta = q.mean - s.mean
    return float(0.5 * np.sum(q.var / s.var + delta * delta / s.var - 1.0 + np.log(s.var / q.var)))


def sym_kl(q: GaussianDiag, s: GaussianDiag) -> float:
    """Symmetrized KL: KL(q||s) + KL(s||q)."""
    _check_pair(q, s)
    return float(pair_terms(Metric.SYM_KL, q.mean, q.var, s.mean, s.var).sum())


def wasserstein2_sq(q: GaussianDiag, s: GaussianDiag) -> float:
    """Squared 2-Wasserstein distance (diagonal covariances commute)."""
    _check_pair(q, s)
    return float(pair_terms(Metric.WASSERSTEIN2, q.mean, q.var, s.mean, s.var).sum())


def dissim(q: GaussianDiag, s: GaussianDiag, kind: MetricKind) -> np.ndarray:
    """Dissimilarity vector: length 1 (multivariate) or length D (aggregate univariate)."""
    _check_pair(q, s)
    terms = pair_terms(kind.metric, q.mean, q.var, s.mean, s.var)
    if kind.form is Form.MULTIVARIATE:
        return np.array([terms.sum()])
    return terms


def classifier_input(
    left: tuple[GaussianDiag, GaussianDiag],
    right: tuple[GaussianDiag, GaussianDiag],
    kind: MetricKind,
) -> np.ndarray:
    """Concatenated per-camera dissimilarity vectors, left camera first."""
    dl = dissim(left[0], left[1], kind)
    dr = dissim(right[0], right[1], kind)
    if dl.shape != dr.shape:
        raise ValueError("camera dissimilarity dimension mismatch")
    return np.concatenate([dl, dr])
