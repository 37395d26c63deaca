"""Episodic training of the detector in two phases.

Phase 1 trains the heads and classifier on top of the frozen projection with
large batches; phase 2 unfreezes the adapter and fine-tunes everything but
the projection with small batches and a lower learning rate.  Each iteration
draws its episode batch from an rng keyed by (seed, iteration), so a training
run is reproducible and independent of validation cadence.  The weights kept
at the end of a phase are those of the best validation checkpoint.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable

import numpy as np

from .datastore import Dataset, Episode, apply_training_transforms
from .embednet import (
    DetectorParams,
    FrozenFeatureCache,
    bce_mean,
    episode_loss_and_grad,
    episode_probabilities,
    frozen_features,
    init_detector,
    trainable_names,
)
from .distmetrics import MetricKind
from .navigator import (
    lap_probability_trace,
    memory_from_labels,
    segment_accuracy,
    segment_scores,
)

THRESHOLD_GRID = tuple(np.round(np.linspace(0.30, 0.90, 13), 2))


@dataclass(frozen=True)
class TrainHyper:
    iterations: int
    batch_episodes: int
    lr: float
    halve_at: tuple[int, ...] = ()
    halve_every: int = 0
    validate_every: int = 50
    train_adapter: bool = False
    seed: int = 0


def phase1_hyper(seed: int, **overrides) -> TrainHyper:
    base = dict(
        iterations=240, batch_episodes=36, lr=1e-4, halve_at=(160,), validate_every=32,
        train_adapter=False, seed=seed,
    )
    base.update(overrides)
    return TrainHyper(**base)


def phase2_hyper(seed: int, **overrides) -> TrainHyper:
    base = dict(
        iterations=4000, batch_episodes=3, lr=1e-5, halve_every=1000, validate_every=200,
        train_adapter=True, seed=seed,
    )
    base.update(overrides)
    return TrainHyper(**base)


def lr_at(hyper: TrainHyper, iteration: int) -> float:
    halvings = sum(iteration >= a for a in hyper.halve_at)
    if hyper.halve_every:
        halvings += iteration // hyper.halve_every
    return hyper.lr * 0.5**halvings


# ---------------------------------------------------------------------------
# Adam


@dataclass
class AdamState:
    m: dict[str, np.ndarray]
    v: dict[str, np.ndarray]
    t: int = 0
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8


def adam_init(weights: dict[str, np.ndarray], names) -> AdamState:
    return AdamState(
        m={n: np.zeros_like(weights[n]) for n in names},
        v={n: np.zeros_like(weights[n]) for n in names},
    )


def adam_step(weights: dict[str, np.ndarray], grads: dict[str, np.ndarray], state: AdamState, lr: float) -> None:
    state.t += 1
    bc1 = 1.0 - state.beta1**state.t
    bc2 = 1.0 - state.beta2**state.t
    for name, g in grads.items():
        m, v = state.m[name], state.v[name]
        m *= state.beta1
        m += (1.0 - state.beta1) * g
        v *= state.beta2
        v += (1.0 - state.beta2) * (g * g)
        weights[name] -= lr * (m / bc1) / (np.sqrt(v / bc2) + state.eps)


# ---------------------------------------------------------------------------
# Forward helpers


def bce_loss(probs: np.ndarray, labels: np.ndarray) -> float:
    return bce_mean(probs, labels)


def episode_forward(params: DetectorParams, episode: Episode) -> tuple[np.ndarray, np.ndarray]:
    """Clean (untransformed) forward pass: probabilities and labels for one episode."""
    blocks, labels = episode.raster_blocks()
    feats0 = frozen_features(params, blocks)[None]
    return episode_probabilities(params, feats0)[0], labels


def _prepare_batch(
    params: DetectorParams, dataset: Dataset, rng: np.random.Generator, hyper: TrainHyper
) -> tuple[np.ndarray, np.ndarray]:
    """Sample episodes, augment every frame, and project to frozen features."""
    episodes = [dataset.sample_episode(rng, role="train") for _ in range(hyper.batch_episodes)]
    all_blocks, all_labels = [], []
    for ep in episodes:
        blocks, labels = ep.raster_blocks()
        b, s = blocks.shape[:2]
        for bi in range(b):
            for ti in range(s):
                blocks[bi, ti, 0], blocks[bi, ti, 1] = apply_training_transforms(
                    blocks[bi, ti, 0], blocks[bi, ti, 1], rng
                )
        all_blocks.append(blocks)
        all_labels.append(labels)
    feats0 = frozen_features(params, np.stack(all_blocks))
    return feats0, np.stack(all_labels)


# ---------------------------------------------------------------------------
# Validation


@dataclass
class ValidationResult:
    accuracy_by_threshold: dict[float, float]
    best_threshold: float
    best_accuracy: float


def validate(
    params: DetectorParams,
    dataset: Dataset,
    role: str = "val",
    thresholds: tuple[float, ...] = THRESHOLD_GRID,
    cache: FrozenFeatureCache | None = None,
) -> ValidationResult:
    """Segment accuracy on a role's courses, swept over a threshold grid.

    The first lap of each course teaches the memory bank; the remaining laps
    are scored with ground-truth routing, so the probability traces are
    threshold-independent and the sweep is nearly free.
    """
    cache = cache or FrozenFeatureCache(params)
    totals = {t: [] for t in thresholds}
    for course_id in dataset.courses(role):
        laps = dataset.laps(course_id)
        if len(laps) < 2:
            continue
        bank = memory_from_labels(params, laps[0])
        for lap in laps[1:]:
            feats0 = cache.lap_features(course_id, lap)
            ends, probs = lap_probability_trace(params, bank, feats0, lap.label_wp)
            for t in thresholds:
                scores = segment_scores(lap.label_pos, lap.label_wp, ends, probs, t)
                totals[t].append(segment_accuracy(scores))
    if not totals[thresholds[0]]:
        raise ValueError(f"no scorable course/lap pairs with role {role!r}")
    acc = {t: float(np.mean(v)) for t, v in totals.items()}
    best_t = max(acc, key=lambda t: (acc[t], -abs(t - 0.5)))
    return ValidationResult(acc, best_t, acc[best_t])


# ---------------------------------------------------------------------------
# Training loop


@dataclass
class TrainPhaseResult:
    history: list[dict]
    best_accuracy: float
    best_iteration: int
    final_validation: ValidationResult | None = None


def train_phase(
    params: DetectorParams,
    dataset: Dataset,
    hyper: TrainHyper,
    cache: FrozenFeatureCache | None = None,
    log: Callable[[str], None] | None = None,
) -> TrainPhaseResult:
    """Run one training phase in place; params end at the best checkpoint."""
    cache = cache or FrozenFeatureCache(params)
    names = trainable_names(params, hyper.train_adapter)
    adam = adam_init(params.weights, names)
    best_acc, best_it = -1.0, 0
    best_weights = {k: v.copy() for k, v in params.weights.items()}
    final_val: ValidationResult | None = None
    history: list[dict] = []
    for it in range(hyper.iterations):
        rng = np.random.Generator(np.random.Philox(np.random.SeedSequence((hyper.seed, it))))
        feats0, labels = _prepare_batch(params, dataset, rng, hyper)
        loss, grads, _ = episode_loss_and_grad(params, feats0, labels, hyper.train_adapter)
        lr = lr_at(hyper, it)
        adam_step(params.weights, grads, adam, lr)

        val_acc = float("nan")
        if (it + 1) % hyper.validate_every == 0 or it + 1 == hyper.iterations:
            final_val = validate(params, dataset, cache=cache)
            val_acc = final_val.best_accuracy
            if val_acc > best_acc:
                best_acc, best_it = val_acc, it + 1
                best_weights = {k: v.copy() for k, v in params.weights.items()}
        history.append(
            {"iteration": it + 1, "loss": loss, "lr": lr, "val_accuracy": val_acc}
        )
        if log and ((it + 1) % hyper.validate_every == 0 or it == 0):
            log(
                f"iter={it + 1}/{hyper.iterations} loss={loss:.4f} lr={lr:.2e} "
                f"val={val_acc if val_acc == val_acc else float('nan'):.3f}"
            )
    params.weights = best_weights
    return TrainPhaseResult(history, best_acc, best_it, final_val)


def train_detector(
    dataset: Dataset,
    kind: MetricKind,
    backbone_seed: int,
    init_seed: int,
    phase1: TrainHyper,
    phase2: TrainHyper | None = None,
    log: Callable[[str], None] | None = None,
) -> tuple[DetectorParams, dict[str, TrainPhaseResult]]:
    """Fresh detector through phase 1 and (optionally) phase 2."""
    params = init_detector(kind, backbone_seed, init_seed)
    cache = FrozenFeatureCache(params)
    results = {"phase1": train_phase(params, dataset, phase1, cache, log)}
    if phase2 is not None:
        results["phase2"] = train_phase(params, dataset, phase2, cache, log)
    return params, results


def save_history(path, phases: dict[str, TrainPhaseResult]) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["phase", "iteration", "loss", "lr", "val_accuracy"])
        for phase, result in phases.items():
            for row in result.history:
                val = row["val_accuracy"]
                writer.writerow(
                    [phase, row["iteration"], f"{row['loss']:.8f}", f"{row['lr']:.3e}",
                     "" if val != val else f"{val:.6f}"]
                )
