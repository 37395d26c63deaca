"""Command-conditioned steering: images plus a latched action give a wheel angle.

The controller imitates the route-following expert.  Both camera rasters are
flattened, pushed through a frozen random projection, and refined by a small
trainable stack; the latched command (left, straight, right) joins as a
one-hot vector after the first hidden layer, so the same view can produce
different steering under different commands.  Commands in the training data
switch on a few frames before each turn, mirroring when the waypoint detector
latches them at run time, and switch back to straight when the turn ends.

Every sample has a mirror twin: rasters flipped and swapped between cameras,
steering reflected about centre, left and right commands exchanged.  The
camera rig is symmetric, so the twin is the sample a mirrored world would
have produced, and training on both keeps the controller from drifting
towards one turning direction.  Photometric variants (brightness and
contrast jitter, mild blur) can be stacked on top; geometric transforms are
deliberately absent, because rotating or shifting a view would silently
invalidate its steering label.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Sequence

import numpy as np
from scipy import ndimage

from . import ckptio
from .datastore import BRIGHTNESS_RANGE, CONTRAST_RANGE, Lap
from .worldsim import (
    ACTION_ORDER,
    POSITIVE_LEN,
    Action,
    CourseSpec,
    SegmentationError,
    World,
    record_branch,
    steering_runs,
)

CTRL_FEATURE_DIM = 256
CTRL_H1 = 64
CTRL_H2 = 32
N_COMMANDS = len(ACTION_ORDER)

CTRL_PARAM_NAMES = ("proj_w", "proj_b", "cmd_w", "cmd_b", "out_w", "out_b")


class ControllerError(Exception):
    pass


@dataclass
class ControllerParams:
    raster_shape: tuple[int, int]
    feature_dim: int
    backbone_seed: int
    init_seed: int
    weights: dict[str, np.ndarray] = field(repr=False)

    def copy(self) -> "ControllerParams":
        return ControllerParams(
            raster_shape=self.raster_shape,
            feature_dim=self.feature_dim,
            backbone_seed=self.backbone_seed,
            init_seed=self.init_seed,
            weights={k: v.copy() for k, v in self.weights.items()},
        )


def init_controller(
    backbone_seed: int,
    init_seed: int,
    raster_shape: tuple[int, int] = (32, 32),
    feature_dim: int = CTRL_FEATURE_DIM,
) -> ControllerParams:
    pixels2 = 2 * raster_shape[0] * raster_shape[1]
    rng_fixed = np.random.Generator(np.random.Philox(backbone_seed))
    weights: dict[str, np.ndarray] = {
        "fixed_w": rng_fixed.normal(0.0, 1.0 / np.sqrt(pixels2), size=(feature_dim, pixels2)),
        "fixed_b": rng_fixed.normal(0.0, 0.5, size=feature_dim),
    }
    rng = np.random.Generator(np.random.Philox(init_seed))

    def glorot(n_out: int, n_in: int) -> np.ndarray:
        return rng.normal(0.0, np.sqrt(2.0 / (n_in + n_out)), size=(n_out, n_in))

    weights["proj_w"] = glorot(CTRL_H1, feature_dim)
    weights["proj_b"] = np.zeros(CTRL_H1)
    weights["cmd_w"] = glorot(CTRL_H2, CTRL_H1 + N_COMMANDS)
    weights["cmd_b"] = np.zeros(CTRL_H2)
    weights["out_w"] = glorot(1, CTRL_H2)
    weights["out_b"] = np.zeros(1)
    return ControllerParams(
        raster_shape=raster_shape,
        feature_dim=feature_dim,
        backbone_seed=backbone_seed,
        init_seed=init_seed,
        weights=weights,
    )


def command_index(action: Action) -> int:
    return ACTION_ORDER.index(action)


def command_onehot(indices: np.ndarray) -> np.ndarray:
    """(...,) integer command indices -> (..., 3) one-hot."""
    return np.eye(N_COMMANDS)[np.asarray(indices)]


def controller_features(params: ControllerParams, rasters: np.ndarray) -> np.ndarray:
    """Frozen projection of frame rasters, shape (..., 2, H, W) -> (..., F)."""
    rasters = np.asarray(rasters, dtype=np.float64)
    h, w = params.raster_shape
    if rasters.shape[-3:] != (2, h, w):
        raise ValueError(
            f"expected camera pairs of shape (2, {h}, {w}), got {rasters.shape[-3:]}"
        )
    flat = rasters.reshape(*rasters.shape[:-3], -1)
    return np.tanh(flat @ params.weights["fixed_w"].T + params.weights["fixed_b"])


def controller_forward(
    params: ControllerParams, feats: np.ndarray, commands: np.ndarray
) -> np.ndarray:
    """Steering in (0, 1) from frozen features (..., F) and one-hot commands (..., 3)."""
    w = params.weights
    h1 = np.maximum(feats @ w["proj_w"].T + w["proj_b"], 0.0)
    joined = np.concatenate([h1, commands], axis=-1)
    h2 = np.maximum(joined @ w["cmd_w"].T + w["cmd_b"], 0.0)
    z = (h2 @ w["out_w"].T + w["out_b"])[..., 0]
    return 1.0 / (1.0 + np.exp(-z))


def controller_loss_and_grad(
    params: ControllerParams, feats: np.ndarray, commands: np.ndarray, targets: np.ndarray
) -> tuple[float, dict[str, np.ndarray]]:
    """Mean squared steering error and gradients for the trainable weights."""
    w = params.weights
    n = feats.shape[0]
    a1 = feats @ w["proj_w"].T + w["proj_b"]
    h1 = np.maximum(a1, 0.0)
    joined = np.concatenate([h1, commands], axis=-1)
    a2 = joined @ w["cmd_w"].T + w["cmd_b"]
    h2 = np.maximum(a2, 0.0)
    z = (h2 @ w["out_w"].T + w["out_b"])[:, 0]
    out = 1.0 / (1.0 + np.exp(-z))
    err = out - targets
    loss = float(np.mean(err * err))

    dz = (2.0 / n) * err * out * (1.0 - out)
    grads = {
        "out_w": (dz @ h2)[None, :],
        "out_b": np.array([dz.sum()]),
    }
    dh2 = dz[:, None] * w["out_w"][0]
    da2 = dh2 * (a2 > 0)
    grads["cmd_w"] = da2.T @ joined
    grads["cmd_b"] = da2.sum(axis=0)
    djoined = da2 @ w["cmd_w"]
    da1 = djoined[:, : CTRL_H1] * (a1 > 0)
    grads["proj_w"] = da1.T @ feats
    grads["proj_b"] = da1.sum(axis=0)
    return loss, grads


def predict_steering(
    params: ControllerParams, raster_left: np.ndarray, raster_right: np.ndarray, action: Action
) -> float:
    feats = controller_features(params, np.stack([raster_left, raster_right]))
    cmd = command_onehot(command_index(action))
    return float(controller_forward(params, feats, cmd))


# ---------------------------------------------------------------------------
# Training data


def command_targets(lap: Lap, actions: Sequence[Action], pre: int = POSITIVE_LEN) -> np.ndarray:
    """Per-frame command indices for an expert lap.

    The k-th sustained steering deviation is the turn at waypoint k, whose
    action is actions[k]; the command is active from pre frames before the
    turn until the turn ends, straight everywhere else.  Matching the lead to
    the approach-segment length mirrors when the detector latches commands.
    """
    runs = steering_runs(lap.steering())
    if len(runs) != len(actions):
        raise SegmentationError(
            f"{lap.course_id}/{lap.lap_id}: found {len(runs)} turns, expected {len(actions)}"
        )
    cmd = np.full(lap.n_frames, command_index(Action.STRAIGHT), dtype=np.int64)
    for k, (start, end) in enumerate(runs):
        cmd[max(start - pre, 0) : end] = command_index(actions[k])
    return cmd


def mirror_command(indices: np.ndarray) -> np.ndarray:
    """Exchange the left and right commands."""
    order = np.arange(N_COMMANDS)
    left, right = command_index(Action.LEFT), command_index(Action.RIGHT)
    order[left], order[right] = right, left
    return order[np.asarray(indices)]


def mirror_samples(
    rasters: np.ndarray, commands: np.ndarray, steering: np.ndarray
) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Mirror twins: flip each raster, swap the cameras, reflect steering and
    commands.  Applying it twice gives the originals back."""
    flipped = rasters[..., ::-1][..., ::-1, :, :]
    return np.ascontiguousarray(flipped), mirror_command(commands), 1.0 - np.asarray(steering)


BLUR_SIGMA_MAX = 0.7


def augment_rasters(rasters: np.ndarray, rng: np.random.Generator) -> np.ndarray:
    """Photometric variant of a lap's raster stack, shape (T, 2, H, W).

    One blur width is drawn for the whole stack; brightness and contrast are
    drawn per frame.  Steering labels stay valid because nothing moves.
    """
    out = np.asarray(rasters, dtype=np.float64)
    sigma = float(rng.uniform(0.0, BLUR_SIGMA_MAX))
    if sigma > 0.05:
        out = ndimage.gaussian_filter(out, sigma=(0.0, 0.0, sigma, sigma), mode="nearest")
    per_frame = (out.shape[0], 1, 1, 1)
    out = out * rng.uniform(*BRIGHTNESS_RANGE, size=per_frame)
    out = (out - 0.5) * rng.uniform(*CONTRAST_RANGE, size=per_frame) + 0.5
    return np.clip(out, 0.0, 1.0)


def branch_command_targets(lap: Lap, branch: Action, pre: int = POSITIVE_LEN) -> np.ndarray:
    """Command labels for a single-junction branch drive.

    Stub paths end before the expert can straighten out, so the steering can
    flicker around the run threshold late in the turn; everything from the
    first sustained deviation to the last is treated as one turn window.
    """
    runs = steering_runs(lap.steering())
    cmd = np.full(lap.n_frames, command_index(Action.STRAIGHT), dtype=np.int64)
    if branch is Action.STRAIGHT:
        if runs:
            raise SegmentationError(
                f"{lap.course_id}/{lap.lap_id}: straight branch drive contains a turn"
            )
        return cmd
    if not runs:
        raise SegmentationError(f"{lap.course_id}/{lap.lap_id}: branch drive has no turn")
    start, end = runs[0][0], runs[-1][1]
    cmd[max(start - pre, 0) : end] = command_index(branch)
    return cmd


def junction_laps(
    world: World, course: CourseSpec, seed: int, reps: int = 3
) -> list[tuple[Lap, np.ndarray]]:
    """Labelled expert drives through every junction exit of a course.

    Route laps alone would let the controller steer by view only, because the
    corridor bend always matches the expert's turn.  Junction drives put the
    same approach view under all available commands with different steering,
    which is what makes the command input carry weight.  Each exit is driven
    reps times from independently jittered start poses, so the set fans out
    over the off-centre approaches a closed-loop follower actually produces.
    The route's own exit gets a longer tail so the turn finishes and
    straightens out; stub exits are dead ends and stop early.
    """
    pairs = []
    for k in range(course.n_waypoints):
        for branch in ACTION_ORDER:
            tail = 4 if branch is course.waypoints[k].action else 2
            for r in range(reps):
                lap = record_branch(
                    world, course, k, branch, f"b{k:02d}{branch.value[0]}{r}", seed, tail=tail
                )
                if lap is None:
                    break
                pairs.append((lap, branch_command_targets(lap, branch)))
    return pairs


def control_samples(
    params: ControllerParams,
    labelled_laps: list[tuple[Lap, np.ndarray]],
    mirror: bool = True,
    augment_draws: int = 0,
    rng: np.random.Generator | None = None,
) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Frozen features, command indices, and steering targets for training.

    Takes (lap, per-frame command index) pairs, as produced by command_targets
    for full laps or junction_laps for branch drives.  augment_draws adds that
    many photometric variants of every lap; mirroring then doubles the lot.
    The fixed projection runs here, once, so the training loop never touches
    rasters again.
    """
    if augment_draws and rng is None:
        raise ControllerError("augment_draws needs an rng")
    feats, cmds, steer = [], [], []

    def push(rasters: np.ndarray, cmd: np.ndarray, sigma: np.ndarray) -> None:
        feats.append(controller_features(params, rasters))
        cmds.append(cmd)
        steer.append(sigma)
        if mirror:
            m_rast, m_cmd, m_steer = mirror_samples(rasters, cmd, sigma)
            feats.append(controller_features(params, m_rast))
            cmds.append(m_cmd)
            steer.append(m_steer)

    for lap, cmd in labelled_laps:
        rasters = np.asarray(lap.rasters(), dtype=np.float64)
        cmd = np.asarray(cmd)
        sigma = lap.steering()
        push(rasters, cmd, sigma)
        for _ in range(augment_draws):
            push(augment_rasters(rasters, rng), cmd, sigma)
    return np.concatenate(feats), np.concatenate(cmds), np.concatenate(steer)


# ---------------------------------------------------------------------------
# Training loop


def train_controller(
    params: ControllerParams,
    feats: np.ndarray,
    commands: np.ndarray,
    steering: np.ndarray,
    epochs: int = 100,
    batch_size: int = 256,
    lr: float = 1e-4,
    seed: int = 0,
) -> list[float]:
    """Minibatch Adam on the steering regression; returns per-epoch losses."""
    from .trainer import adam_init, adam_step

    onehot = command_onehot(commands)
    n = feats.shape[0]
    adam = adam_init(params.weights, CTRL_PARAM_NAMES)
    history = []
    for epoch in range(epochs):
        rng = np.random.Generator(np.random.Philox(np.random.SeedSequence((seed, epoch))))
        order = rng.permutation(n)
        losses = []
        for lo in range(0, n, batch_size):
            idx = order[lo : lo + batch_size]
            loss, grads = controller_loss_and_grad(
                params, feats[idx], onehot[idx], steering[idx]
            )
            adam_step(params.weights, grads, adam, lr)
            losses.append(loss)
        history.append(float(np.mean(losses)))
    return history


def controller_mse(
    params: ControllerParams, feats: np.ndarray, commands: np.ndarray, steering: np.ndarray
) -> float:
    out = controller_forward(params, feats, command_onehot(commands))
    return float(np.mean((out - steering) ** 2))


# ---------------------------------------------------------------------------
# Storage


def save_controller(params: ControllerParams, path) -> None:
    meta = {
        "kind": "controller",
        "raster_h": str(params.raster_shape[0]),
        "raster_w": str(params.raster_shape[1]),
        "feature_dim": str(params.feature_dim),
        "backbone_seed": str(params.backbone_seed),
        "init_seed": str(params.init_seed),
    }
    ckptio.save_arrays(path, meta, params.weights)


def load_controller(path) -> ControllerParams:
    meta, arrays = ckptio.load_arrays(path)
    if meta.get("kind") != "controller":
        raise ckptio.CheckpointError(f"{path}: not a controller checkpoint")
    params = init_controller(
        backbone_seed=int(meta["backbone_seed"]),
        init_seed=int(meta["init_seed"]),
        raster_shape=(int(meta["raster_h"]), int(meta["raster_w"])),
        feature_dim=int(meta["feature_dim"]),
    )
    for name, value in arrays.items():
        if name not in params.weights or params.weights[name].shape != value.shape:
            raise ckptio.CheckpointError(f"{path}: unexpected array {name!r}")
        params.weights[name] = value.astype(np.float64)
    return params
