"""Detector network: frozen random projection, adapter, Gaussian heads, pair classifier.

Each camera raster is flattened, pushed through a fixed random affine map with a
tanh nonlinearity, then through a trainable linear adapter.  Two heads read the
adapted features: a linear mean head and a small MLP variance head (softplus
plus a floor, so variances stay strictly positive).  A separate MLP scores
query/support dissimilarity vectors as match probabilities.

Everything is plain numpy with hand-written backprop.  Parameters live in
float64; checkpoints are stored as float32.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import TYPE_CHECKING

import numpy as np
from scipy.special import expit

from . import ckptio
from .distmetrics import Form, GaussianDiag, MetricKind, pair_terms, pair_terms_backward

if TYPE_CHECKING:
    from .datastore import FrameRecord

FEATURE_DIM = 128
EMBED_DIM = 32
COV_HIDDEN = 64
CLS_HIDDEN = (64, 32, 16)

# Parameter names that gradient descent may touch, by phase.  The fixed
# projection is never trained.
HEAD_PARAM_NAMES = (
    "mean_w", "mean_b", "cov1_w", "cov1_b", "cov2_w", "cov2_b",
    "cls0_w", "cls0_b", "cls1_w", "cls1_b", "cls2_w", "cls2_b", "cls3_w", "cls3_b",
)
ADAPTER_PARAM_NAMES = ("adapter_w", "adapter_b")


class DetectorNumericsError(Exception):
    """Raised when a forward/backward pass produces non-finite values."""


@dataclass
class FrameEmbedding:
    """Diagonal Gaussians for the two cameras of one frame."""

    left: GaussianDiag
    right: GaussianDiag


@dataclass
class DetectorParams:
    kind: MetricKind
    raster_shape: tuple[int, int]
    feature_dim: int
    embed_dim: int
    var_floor: float
    backbone_seed: int
    init_seed: int
    weights: dict[str, np.ndarray] = field(repr=False)

    @property
    def classifier_input_dim(self) -> int:
        return self.kind.classifier_input_dim(self.embed_dim)

    def copy(self) -> "DetectorParams":
        return DetectorParams(
            kind=self.kind,
            raster_shape=self.raster_shape,
            feature_dim=self.feature_dim,
            embed_dim=self.embed_dim,
            var_floor=self.var_floor,
            backbone_seed=self.backbone_seed,
            init_seed=self.init_seed,
            weights={k: v.copy() for k, v in self.weights.items()},
        )


def init_detector(
    kind: MetricKind,
    backbone_seed: int,
    init_seed: int,
    raster_shape: tuple[int, int] = (32, 32),
    feature_dim: int = FEATURE_DIM,
    embed_dim: int = EMBED_DIM,
    var_floor: float = 1e-6,
) -> DetectorParams:
    """Build a fresh detector.

    The fixed projection depends only on backbone_seed, the trainable heads
    only on init_seed, so two detectors sharing a backbone_seed agree on the
    frozen features regardless of head initialisation.
    """
    pixels = raster_shape[0] * raster_shape[1]
    rng_fixed = np.random.Generator(np.random.Philox(backbone_seed))
    weights: dict[str, np.ndarray] = {
        "fixed_w": rng_fixed.normal(0.0, 1.0 / np.sqrt(pixels), size=(feature_dim, pixels)),
        "fixed_b": rng_fixed.normal(0.0, 0.5, size=feature_dim),
    }

    rng = np.random.Generator(np.random.Philox(init_seed))

    def glorot(n_out: int, n_in: int) -> np.ndarray:
        return rng.normal(0.0, np.sqrt(2.0 / (n_in + n_out)), size=(n_out, n_in))

    weights["adapter_w"] = np.eye(feature_dim)
    weights["adapter_b"] = np.zeros(feature_dim)
    weights["mean_w"] = glorot(embed_dim, feature_dim)
    weights["mean_b"] = np.zeros(embed_dim)
    weights["cov1_w"] = glorot(COV_HIDDEN, feature_dim)
    weights["cov1_b"] = np.zeros(COV_HIDDEN)
    weights["cov2_w"] = glorot(embed_dim, COV_HIDDEN)
    weights["cov2_b"] = np.zeros(embed_dim)

    dims = (kind.classifier_input_dim(embed_dim), *CLS_HIDDEN, 1)
    for i in range(4):
        weights[f"cls{i}_w"] = glorot(dims[i + 1], dims[i])
        weights[f"cls{i}_b"] = np.zeros(dims[i + 1])

    return DetectorParams(
        kind=kind,
        raster_shape=raster_shape,
        feature_dim=feature_dim,
        embed_dim=embed_dim,
        var_floor=var_floor,
        backbone_seed=backbone_seed,
        init_seed=init_seed,
        weights=weights,
    )


def trainable_names(params: DetectorParams, train_adapter: bool) -> tuple[str, ...]:
    return HEAD_PARAM_NAMES + ADAPTER_PARAM_NAMES if train_adapter else HEAD_PARAM_NAMES


def _softplus(z: np.ndarray) -> np.ndarray:
    return np.logaddexp(0.0, z)


def _check_rasters(rasters: np.ndarray, raster_shape: tuple[int, int]) -> np.ndarray:
    rasters = np.asarray(rasters, dtype=np.float64)
    if rasters.shape[-2:] != raster_shape:
        raise ValueError(f"raster shape {rasters.shape[-2:]} != expected {raster_shape}")
    if not np.all(np.isfinite(rasters)):
        raise DetectorNumericsError("non-finite values in input rasters")
    return rasters


def frozen_features(params: DetectorParams, rasters: np.ndarray) -> np.ndarray:
    """tanh(W x + b) over flattened rasters; shape (..., H, W) -> (..., F).

    This is the frozen part of the backbone: it never changes during training,
    so it can be computed once per lap and cached.
    """
    rasters = _check_rasters(rasters, params.raster_shape)
    flat = rasters.reshape(*rasters.shape[:-2], -1)
    return np.tanh(flat @ params.weights["fixed_w"].T + params.weights["fixed_b"])


def adapt_features(params: DetectorParams, feats0: np.ndarray) -> np.ndarray:
    return feats0 @ params.weights["adapter_w"].T + params.weights["adapter_b"]


def backbone_features(params: DetectorParams, raster: np.ndarray) -> np.ndarray:
    """Full backbone for one raster (or a batch): frozen projection then adapter."""
    return adapt_features(params, frozen_features(params, raster))


def gaussian_heads(params: DetectorParams, feats: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Mean and variance embeddings from adapted features, shape (..., D) each."""
    w = params.weights
    mu = feats @ w["mean_w"].T + w["mean_b"]
    h = np.maximum(feats @ w["cov1_w"].T + w["cov1_b"], 0.0)
    var = _softplus(h @ w["cov2_w"].T + w["cov2_b"]) + params.var_floor
    return mu, var


def embed_frame(params: DetectorParams, frame: "FrameRecord") -> FrameEmbedding:
    """Embed both cameras of a frame as diagonal Gaussians."""
    rasters = np.stack([frame.raster_left, frame.raster_right])
    mu, var = gaussian_heads(params, backbone_features(params, rasters))
    return FrameEmbedding(
        left=GaussianDiag(mu[0], var[0]),
        right=GaussianDiag(mu[1], var[1]),
    )


def classify(params: DetectorParams, x: np.ndarray) -> np.ndarray:
    """Match probability for dissimilarity vectors, shape (..., c_in) -> (...)."""
    x = np.asarray(x, dtype=np.float64)
    c_in = params.classifier_input_dim
    if x.shape[-1] != c_in:
        raise ValueError(
            f"classifier input has {x.shape[-1]} features, expected {c_in} for {params.kind.label()}"
        )
    w = params.weights
    a = x
    for i in range(3):
        a = np.maximum(a @ w[f"cls{i}_w"].T + w[f"cls{i}_b"], 0.0)
    logit = a @ w["cls3_w"].T + w["cls3_b"]
    return expit(logit[..., 0])


def bce_mean(probs: np.ndarray, labels: np.ndarray, eps: float = 1e-7) -> float:
    """Mean binary cross-entropy with probability clamping."""
    p = np.clip(np.asarray(probs, dtype=np.float64), eps, 1.0 - eps)
    y = np.asarray(labels, dtype=np.float64)
    if p.shape != y.shape:
        raise ValueError(f"probs shape {p.shape} != labels shape {y.shape}")
    return float(np.mean(-(y * np.log(p) + (1.0 - y) * np.log1p(-p))))


def episode_probabilities(
    params: DetectorParams, feats0: np.ndarray
) -> np.ndarray:
    """Forward pass over batched episodes.

    feats0 has shape (E, B, s, 2, F): E episodes, B blocks with block 0 the
    support and blocks 1..B-1 the queries, s frames per block, 2 cameras.
    Returns match probabilities of shape (E, B-1).
    """
    out = _episode_forward(params, feats0)
    return out["probs"]


def _episode_forward(params: DetectorParams, feats0: np.ndarray) -> dict:
    if feats0.ndim != 5:
        raise ValueError(f"expected feats0 of rank 5 (E,B,s,2,F), got shape {feats0.shape}")
    e, b, s, cams, fdim = feats0.shape
    if cams != 2 or fdim != params.feature_dim or b < 2:
        raise ValueError(f"bad feats0 shape {feats0.shape} for feature_dim {params.feature_dim}")
    if not np.all(np.isfinite(feats0)):
        raise DetectorNumericsError("non-finite values at layer 'feats0'")
    w = params.weights

    f = feats0 @ w["adapter_w"].T + w["adapter_b"]
    mu = f @ w["mean_w"].T + w["mean_b"]
    pre1 = f @ w["cov1_w"].T + w["cov1_b"]
    h1 = np.maximum(pre1, 0.0)
    z = h1 @ w["cov2_w"].T + w["cov2_b"]
    var = _softplus(z) + params.var_floor

    mean_mu = mu.mean(axis=2)  # (E, B, 2, D)
    mean_var = var.mean(axis=2)
    ms, vs = mean_mu[:, :1], mean_var[:, :1]  # support, (E, 1, 2, D)
    mq, vq = mean_mu[:, 1:], mean_var[:, 1:]  # queries, (E, Q, 2, D)

    terms = pair_terms(params.kind.metric, mq, vq, ms, vs)  # (E, Q, 2, D)
    if params.kind.form is Form.MULTIVARIATE:
        x = terms.sum(axis=-1)  # (E, Q, 2)
    else:
        # Camera axis precedes the embedding axis, so this reshape is exactly
        # the left-then-right concatenation of per-dimension terms.
        x = terms.reshape(e, b - 1, 2 * params.embed_dim)

    acts = [x]
    for i in range(3):
        acts.append(np.maximum(acts[-1] @ w[f"cls{i}_w"].T + w[f"cls{i}_b"], 0.0))
    logit = acts[-1] @ w["cls3_w"].T + w["cls3_b"]  # (E, Q, 1)
    probs = expit(logit[..., 0])

    return {
        "feats0": feats0, "f": f, "mu": mu, "h1": h1, "z": z, "var": var,
        "mq": mq, "vq": vq, "ms": ms, "vs": vs, "x": x, "acts": acts,
        "logit": logit, "probs": probs, "shape": (e, b, s),
    }


def episode_loss_and_grad(
    params: DetectorParams,
    feats0: np.ndarray,
    labels: np.ndarray,
    train_adapter: bool,
) -> tuple[float, dict[str, np.ndarray], np.ndarray]:
    """Loss, parameter gradients, and probabilities for a batch of episodes.

    labels has shape (E, B-1) with one binary label per query block.  The loss
    is the mean binary cross-entropy over all E*(B-1) queries.  Gradients are
    returned for the head parameters, plus the adapter when train_adapter is
    set; the fixed projection never receives gradients.
    """
    cache = _episode_forward(params, feats0)
    e, b, s = cache["shape"]
    labels = np.asarray(labels, dtype=np.float64)
    if labels.shape != (e, b - 1):
        raise ValueError(f"labels shape {labels.shape} != {(e, b - 1)}")

    loss = bce_mean(cache["probs"], labels)
    if not np.isfinite(loss):
        _diagnose(cache, loss)

    w = params.weights
    grads: dict[str, np.ndarray] = {}

    # Classifier.  d(bce)/d(logit) = (p - y) / N for sigmoid + mean BCE.
    dlogit = ((cache["probs"] - labels) / labels.size)[..., None]  # (E, Q, 1)
    acts = cache["acts"]
    d = dlogit
    for i in range(3, -1, -1):
        a_in = acts[i]
        grads[f"cls{i}_w"] = np.einsum("eqo,eqi->oi", d, a_in)
        grads[f"cls{i}_b"] = d.sum(axis=(0, 1))
        d = d @ w[f"cls{i}_w"]
        if i > 0:
            d = d * (acts[i] > 0.0)
    dx = d  # (E, Q, c_in)

    if params.kind.form is Form.MULTIVARIATE:
        g_terms = np.broadcast_to(dx[..., None], cache["mq"].shape[:2] + (2, params.embed_dim))
    else:
        g_terms = dx.reshape(e, b - 1, 2, params.embed_dim)
    gmq, gvq, gms_b, gvs_b = pair_terms_backward(
        params.kind.metric, cache["mq"], cache["vq"], cache["ms"], cache["vs"], g_terms
    )
    gms = gms_b.sum(axis=1, keepdims=True)  # support was broadcast over queries
    gvs = gvs_b.sum(axis=1, keepdims=True)

    # Back through the per-block mean over s frames.
    g_mean_mu = np.concatenate([gms, gmq], axis=1)  # (E, B, 2, D)
    g_mean_var = np.concatenate([gvs, gvq], axis=1)
    gmu = np.broadcast_to(g_mean_mu[:, :, None] / s, cache["mu"].shape)
    gvar = np.broadcast_to(g_mean_var[:, :, None] / s, cache["var"].shape)

    # Variance head: softplus' = sigmoid.
    gz = gvar * expit(cache["z"])
    flat = lambda a: a.reshape(-1, a.shape[-1])
    grads["cov2_w"] = flat(gz).T @ flat(cache["h1"])
    grads["cov2_b"] = flat(gz).sum(axis=0)
    gh1 = (gz @ w["cov2_w"]) * (cache["h1"] > 0.0)
    grads["cov1_w"] = flat(gh1).T @ flat(cache["f"])
    grads["cov1_b"] = flat(gh1).sum(axis=0)

    grads["mean_w"] = flat(gmu).T @ flat(cache["f"])
    grads["mean_b"] = flat(gmu).sum(axis=0)

    if train_adapter:
        gf = gmu @ w["mean_w"] + gh1 @ w["cov1_w"]
        grads["adapter_w"] = flat(gf).T @ flat(cache["feats0"])
        grads["adapter_b"] = flat(gf).sum(axis=0)

    return loss, grads, cache["probs"]


def _diagnose(cache: dict, loss: float):
    """Name the first layer with non-finite values; only runs on failure."""
    for name in ("feats0", "f", "mu", "h1", "z", "var", "x", "logit", "probs"):
        if not np.all(np.isfinite(cache[name])):
            raise DetectorNumericsError(f"non-finite values at layer {name!r}")
    raise DetectorNumericsError(f"non-finite loss {loss!r} with finite intermediates")


class FrozenFeatureCache:
    """Caches frozen (pre-adapter) features per lap.

    Valid only while every detector sharing the cache uses the same
    backbone_seed and raster shape; the adapter and heads may differ.
    """

    def __init__(self, params: DetectorParams):
        self.params = params
        self._store: dict[tuple[str, str], np.ndarray] = {}

    def lap_features(self, course_id: str, lap) -> np.ndarray:
        key = (course_id, lap.lap_id)
        if key not in self._store:
            self._store[key] = frozen_features(self.params, lap.rasters())
        return self._store[key]


def save_detector(params: DetectorParams, path) -> None:
    meta = {
        "kind": "detector",
        "metric": params.kind.metric.value,
        "form": params.kind.form.value,
        "raster_h": str(params.raster_shape[0]),
        "raster_w": str(params.raster_shape[1]),
        "feature_dim": str(params.feature_dim),
        "embed_dim": str(params.embed_dim),
        "var_floor": repr(params.var_floor),
        "backbone_seed": str(params.backbone_seed),
        "init_seed": str(params.init_seed),
    }
    ckptio.save_arrays(path, meta, params.weights)


def load_detector(path) -> DetectorParams:
    meta, arrays = ckptio.load_arrays(path)
    if meta.get("kind") != "detector":
        raise ckptio.CheckpointError(f"{path}: not a detector checkpoint")
    return DetectorParams(
        kind=MetricKind.parse(meta["metric"], meta["form"]),
        raster_shape=(int(meta["raster_h"]), int(meta["raster_w"])),
        feature_dim=int(meta["feature_dim"]),
        embed_dim=int(meta["embed_dim"]),
        var_floor=float(meta["var_floor"]),
        backbone_seed=int(meta["backbone_seed"]),
        init_seed=int(meta["init_seed"]),
        weights={k: v.astype(np.float64) for k, v in arrays.items()},
    )
