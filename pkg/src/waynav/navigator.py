"""Waypoint detection at run time: memory bank, sliding window, action latching.

A memory bank holds, for every waypoint of a course, the prototype Gaussians
of all length-s windows inside that waypoint's approach segment of a teaching
lap (a 15-frame segment yields 6 slots).  At run time the navigator keeps the
last n_q frame embeddings in a ring, combines them into one query per camera,
and scores the query against the slots of the single upcoming waypoint; the
match probability is the maximum over slots.  A detection strictly above the
threshold latches the waypoint's action and arms a cooldown of n_q frames so
the next decision only fires once the ring has fully turned over.

The same scoring is available in vectorized form over whole laps, which the
trainer's validation and the offline evaluation build on.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import ckptio
from .datastore import Lap, label_runs
from .distmetrics import Form, MetricKind, pair_terms
from .embednet import DetectorParams, classify, frozen_features, gaussian_heads
from .worldsim import Action, CourseSpec

N_QUERY = 10  # ring length: frames combined into one query
DETECTION_BUFFER = 5  # slack windows on each side of a positive segment

ActionLUT = dict[int, Action]


class NavigatorError(Exception):
    pass


@dataclass
class MemoryBank:
    course_id: str
    n_support: int
    slot_means: dict[int, np.ndarray]  # waypoint -> (n_slots, 2, D)
    slot_vars: dict[int, np.ndarray]
    actions: ActionLUT

    @property
    def n_waypoints(self) -> int:
        return len(self.actions)

    def slots(self, waypoint: int) -> tuple[np.ndarray, np.ndarray]:
        return self.slot_means[waypoint], self.slot_vars[waypoint]


def window_means(values: np.ndarray, s: int) -> np.ndarray:
    """Mean over every length-s window along axis 0: (n, ...) -> (n-s+1, ...)."""
    n = values.shape[0]
    if n < s:
        raise NavigatorError(f"need at least {s} frames, got {n}")
    csum = np.cumsum(values, axis=0, dtype=np.float64)
    out = np.empty((n - s + 1,) + values.shape[1:])
    out[0] = csum[s - 1] / s
    out[1:] = (csum[s:] - csum[:-s]) / s
    return out


def lap_window_gaussians(
    params: DetectorParams, feats0: np.ndarray, s: int = N_QUERY
) -> tuple[np.ndarray, np.ndarray]:
    """Sliding-window query Gaussians for a lap of frozen features (n, 2, F).

    Returns means and variances of shape (n-s+1, 2, D); window i covers
    frames [i, i+s), so its end frame is i+s-1.
    """
    feats = feats0 @ params.weights["adapter_w"].T + params.weights["adapter_b"]
    mu, var = gaussian_heads(params, feats)
    return window_means(mu, s), window_means(var, s)


def _slot_windows(
    params: DetectorParams, lap: Lap, waypoint: int, s: int
) -> tuple[np.ndarray, np.ndarray]:
    """Window prototypes of one waypoint's approach segment in a labelled lap."""
    pos = label_runs(lap).pos.get(waypoint, [])
    if len(pos) != 1:
        raise NavigatorError(
            f"{lap.course_id}/{lap.lap_id}: waypoint {waypoint} has {len(pos)} approach segments"
        )
    start, length = pos[0]
    if length < s:
        raise NavigatorError(
            f"{lap.course_id}/{lap.lap_id}: approach segment of waypoint {waypoint} "
            f"is {length} frames, need at least {s}"
        )
    rasters = lap.rasters()[start : start + length]
    feats0 = frozen_features(params, np.asarray(rasters, dtype=np.float64))
    mu, var = gaussian_heads(
        params, feats0 @ params.weights["adapter_w"].T + params.weights["adapter_b"]
    )
    return window_means(mu, s), window_means(var, s)


def build_memory(
    params: DetectorParams, lap: Lap, course: CourseSpec, s: int = N_QUERY
) -> MemoryBank:
    """Slot prototypes from the teaching lap's approach segments."""
    if lap.course_id != course.course_id:
        raise NavigatorError(f"lap {lap.course_id} does not belong to {course.course_id}")
    slot_means: dict[int, np.ndarray] = {}
    slot_vars: dict[int, np.ndarray] = {}
    actions: ActionLUT = {}
    for wp in course.waypoints:
        slot_means[wp.index], slot_vars[wp.index] = _slot_windows(params, lap, wp.index, s)
        actions[wp.index] = wp.action
    return MemoryBank(course.course_id, s, slot_means, slot_vars, actions)


def memory_from_labels(params: DetectorParams, lap: Lap, s: int = N_QUERY) -> MemoryBank:
    """Bank built from a lap's labels alone, for scoring rather than driving:
    every waypoint with an approach segment gets slots, actions are left as
    straight placeholders."""
    slot_means: dict[int, np.ndarray] = {}
    slot_vars: dict[int, np.ndarray] = {}
    actions: ActionLUT = {}
    for wp in sorted(label_runs(lap).pos):
        slot_means[wp], slot_vars[wp] = _slot_windows(params, lap, wp, s)
        actions[wp] = Action.STRAIGHT
    if not actions:
        raise NavigatorError(f"{lap.course_id}/{lap.lap_id}: no approach segments")
    return MemoryBank(lap.course_id, s, slot_means, slot_vars, actions)


def _dissim_inputs(kind: MetricKind, q_mean, q_var, s_mean, s_var) -> np.ndarray:
    """Classifier inputs for queries (..., 2, D) against slots (..., 2, D)."""
    terms = pair_terms(kind.metric, q_mean, q_var, s_mean, s_var)
    if kind.form is Form.MULTIVARIATE:
        return terms.sum(axis=-1)
    return terms.reshape(terms.shape[:-2] + (2 * terms.shape[-1],))


def waypoint_probability(
    params: DetectorParams, bank: MemoryBank, q_mean: np.ndarray, q_var: np.ndarray, waypoint: int
) -> float:
    """Max match probability of one query (2, D) over a waypoint's slots."""
    s_mean, s_var = bank.slots(waypoint)
    x = _dissim_inputs(params.kind, q_mean[None], q_var[None], s_mean, s_var)
    return float(classify(params, x).max())


def trace_probs(
    params: DetectorParams,
    bank: MemoryBank,
    w_mean: np.ndarray,
    w_var: np.ndarray,
    waypoints: np.ndarray,
) -> np.ndarray:
    """Per-window probabilities, window i scored against waypoints[i]."""
    m = w_mean.shape[0]
    probs = np.empty(m)
    for wp in np.unique(waypoints):
        idx = np.nonzero(waypoints == wp)[0]
        s_mean, s_var = bank.slots(int(wp))
        x = _dissim_inputs(
            params.kind,
            w_mean[idx][:, None],
            w_var[idx][:, None],
            s_mean[None],
            s_var[None],
        )
        probs[idx] = classify(params, x).max(axis=1)
    return probs


def lap_probability_trace(
    params: DetectorParams,
    bank: MemoryBank,
    feats0: np.ndarray,
    label_wp: np.ndarray,
    s: int = N_QUERY,
) -> tuple[np.ndarray, np.ndarray]:
    """Ground-truth-routed trace over a lap: each window is scored against the
    waypoint its end frame approaches.  Returns (window end indices, probs)."""
    w_mean, w_var = lap_window_gaussians(params, feats0, s)
    ends = np.arange(s - 1, feats0.shape[0])
    return ends, trace_probs(params, bank, w_mean, w_var, np.asarray(label_wp)[ends])


def segment_scores(
    label_pos: np.ndarray,
    label_wp: np.ndarray,
    ends: np.ndarray,
    probs: np.ndarray,
    threshold: float,
    s: int = N_QUERY,
    buffer_before: int = DETECTION_BUFFER,
    buffer_after: int = DETECTION_BUFFER,
) -> dict[int, tuple[bool, bool]]:
    """Per-waypoint (approach detected, corridor clean) at a threshold.

    A waypoint's approach counts as detected if any window ending inside the
    buffered segment clears the threshold.  Its corridor is clean if no
    window ending in the waypoint's negative frames, outside all buffered
    positive regions, clears the threshold.
    """
    label_pos = np.asarray(label_pos)
    label_wp = np.asarray(label_wp)
    fired = probs > threshold
    scores: dict[int, tuple[bool, bool]] = {}
    buffered = np.zeros(len(label_pos), dtype=bool)
    pos_windows: dict[int, np.ndarray] = {}
    for wp in np.unique(label_wp):
        seg = np.nonzero(label_pos & (label_wp == wp))[0]
        if len(seg) == 0:
            continue
        lo = max(seg[0] + s - 1 - buffer_before, 0)
        hi = min(seg[-1] + buffer_after, len(label_pos) - 1)
        buffered[lo : hi + 1] = True
        pos_windows[int(wp)] = (ends >= lo) & (ends <= hi)
    for wp in np.unique(label_wp):
        wp = int(wp)
        in_pos = pos_windows.get(wp)
        detected = bool(fired[in_pos].any()) if in_pos is not None else False
        neg_mask = (~label_pos[ends]) & (label_wp[ends] == wp) & ~buffered[ends]
        clean = not fired[neg_mask].any()
        scores[wp] = (detected, clean)
    return scores


def segment_accuracy(scores: dict[int, tuple[bool, bool]]) -> float:
    """Fraction of correct segments: one approach and one corridor per waypoint."""
    if not scores:
        raise NavigatorError("no segments to score")
    total = 2 * len(scores)
    good = sum(int(det) + int(clean) for det, clean in scores.values())
    return good / total


# ---------------------------------------------------------------------------
# Streaming navigator


@dataclass
class DetectionEvent:
    frame_index: int
    waypoint: int
    action: Action
    prob: float


@dataclass
class NavState:
    upcoming: int = 0
    latched: Action = Action.STRAIGHT
    cooldown: int = 0
    frames_seen: int = 0
    ring_mean: np.ndarray = field(default=None, repr=False)
    ring_var: np.ndarray = field(default=None, repr=False)
    ring_fill: int = 0


class Navigator:
    """Streaming detector: feed frames, read the latched action."""

    def __init__(
        self,
        params: DetectorParams,
        bank: MemoryBank,
        threshold: float,
        n_q: int = N_QUERY,
    ):
        if bank.n_support != n_q:
            raise NavigatorError(
                f"memory bank was built with s={bank.n_support}, navigator uses n_q={n_q}"
            )
        self.params = params
        self.bank = bank
        self.threshold = float(threshold)
        self.n_q = n_q
        d = params.embed_dim
        self.state = NavState(
            ring_mean=np.zeros((n_q, 2, d)), ring_var=np.zeros((n_q, 2, d))
        )

    @property
    def upcoming(self) -> int:
        return self.state.upcoming

    def current_action(self) -> Action:
        return self.state.latched

    def revert_to_straight(self) -> None:
        self.state.latched = Action.STRAIGHT

    def reset(self, upcoming: int = 0) -> None:
        """Start over with an empty ring, expecting the given waypoint next."""
        d = self.params.embed_dim
        self.state = NavState(
            upcoming=upcoming % self.bank.n_waypoints,
            ring_mean=np.zeros((self.n_q, 2, d)),
            ring_var=np.zeros((self.n_q, 2, d)),
        )

    def push_frame(self, raster_left: np.ndarray, raster_right: np.ndarray) -> DetectionEvent | None:
        st = self.state
        feats0 = frozen_features(self.params, np.stack([raster_left, raster_right]))
        feats = feats0 @ self.params.weights["adapter_w"].T + self.params.weights["adapter_b"]
        mu, var = gaussian_heads(self.params, feats)
        slot = st.frames_seen % self.n_q
        st.ring_mean[slot] = mu
        st.ring_var[slot] = var
        st.frames_seen += 1
        st.ring_fill = min(st.ring_fill + 1, self.n_q)
        if st.cooldown > 0:
            st.cooldown -= 1
            return None
        return self.detect()

    def detect(self) -> DetectionEvent | None:
        """Score the current ring against the upcoming waypoint."""
        st = self.state
        if st.ring_fill < self.n_q:
            return None
        q_mean = st.ring_mean.mean(axis=0)
        q_var = st.ring_var.mean(axis=0)
        p = waypoint_probability(self.params, self.bank, q_mean, q_var, st.upcoming)
        if not p > self.threshold:
            return None
        event = DetectionEvent(
            frame_index=st.frames_seen - 1,
            waypoint=st.upcoming,
            action=self.bank.actions[st.upcoming],
            prob=p,
        )
        st.latched = event.action
        st.upcoming = (st.upcoming + 1) % self.bank.n_waypoints
        st.cooldown = self.n_q
        return event


# ---------------------------------------------------------------------------
# Memory bank storage


def save_memory(bank: MemoryBank, path) -> None:
    meta = {
        "kind": "memory-bank",
        "course": bank.course_id,
        "n_support": str(bank.n_support),
        "waypoints": ",".join(str(w) for w in sorted(bank.actions)),
        "actions": ",".join(bank.actions[w].value for w in sorted(bank.actions)),
    }
    arrays = {}
    for wp in sorted(bank.actions):
        arrays[f"wp{wp}_mean"] = bank.slot_means[wp]
        arrays[f"wp{wp}_var"] = bank.slot_vars[wp]
    ckptio.save_arrays(path, meta, arrays)


def load_memory(path) -> MemoryBank:
    meta, arrays = ckptio.load_arrays(path)
    if meta.get("kind") != "memory-bank":
        raise ckptio.CheckpointError(f"{path}: not a memory bank")
    wids = [int(w) for w in meta["waypoints"].split(",")]
    actions = {w: Action(a) for w, a in zip(wids, meta["actions"].split(","))}
    return MemoryBank(
        course_id=meta["course"],
        n_support=int(meta["n_support"]),
        slot_means={w: arrays[f"wp{w}_mean"].astype(np.float64) for w in wids},
        slot_vars={w: arrays[f"wp{w}_var"].astype(np.float64) for w in wids},
        actions=actions,
    )
