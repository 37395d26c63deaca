"""Offline scoring, robustness sweeps, metric ablations, and the closed loop.

Offline evaluation replays recorded laps against a memory bank taught by a
different lap of the same course and scores approach/corridor segments.  The
closed loop puts the detector and the steering controller on a live vehicle:
the navigator latches the upcoming waypoint's action when it fires, a heading
monitor reverts to straight once the turn is done, and failures respawn the
vehicle just past the failed waypoint with the expectation advanced by hand.
"""

from __future__ import annotations

import csv
import math
import zlib
from dataclasses import dataclass
from pathlib import Path
from typing import Callable, Iterable, Sequence

import numpy as np

from .controller import ControllerParams, predict_steering
from .datastore import CorruptionKind, Dataset, Lap, apply_corruption
from .distmetrics import ALL_METRIC_KINDS
from .embednet import DetectorParams, FrozenFeatureCache, frozen_features, init_detector
from .navigator import (
    DETECTION_BUFFER,
    MemoryBank,
    Navigator,
    build_memory,
    lap_probability_trace,
    memory_from_labels,
    segment_accuracy,
    segment_scores,
)
from .trainer import TrainHyper, train_phase, validate
from .worldsim import (
    Action,
    CourseSpec,
    World,
    _jittered_pose,
    render_observation,
    spawn_pose,
    step_vehicle,
    wrap_angle,
    DT,
    SPEED,
)


class EvalError(Exception):
    pass


# ---------------------------------------------------------------------------
# Offline segment evaluation


@dataclass
class OfflineResult:
    """Per-configuration segment scores; one row per (memory lap, test lap)."""

    rows: list[dict]

    @property
    def mean_accuracy(self) -> float:
        return float(np.mean([r["accuracy"] for r in self.rows]))

    @property
    def total_false_pos(self) -> int:
        return sum(r["false_pos"] for r in self.rows)

    @property
    def total_false_neg(self) -> int:
        return sum(r["false_neg"] for r in self.rows)

    def course_accuracy(self) -> dict[str, float]:
        by_course: dict[str, list[float]] = {}
        for r in self.rows:
            by_course.setdefault(r["course"], []).append(r["accuracy"])
        return {c: float(np.mean(v)) for c, v in sorted(by_course.items())}


def _scored_row(
    params: DetectorParams,
    bank: MemoryBank,
    lap: Lap,
    feats0: np.ndarray,
    threshold: float,
    buffer_before: int,
    buffer_after: int,
) -> dict:
    ends, probs = lap_probability_trace(params, bank, feats0, lap.label_wp)
    scores = segment_scores(
        lap.label_pos,
        lap.label_wp,
        ends,
        probs,
        threshold,
        buffer_before=buffer_before,
        buffer_after=buffer_after,
    )
    return {
        "course": lap.course_id,
        "test_lap": lap.lap_id,
        "accuracy": segment_accuracy(scores),
        "false_pos": sum(1 for _, clean in scores.values() if not clean),
        "false_neg": sum(1 for det, _ in scores.values() if not det),
    }


def eval_offline(
    params: DetectorParams,
    dataset: Dataset,
    role: str = "test",
    threshold: float = 0.5,
    cache: FrozenFeatureCache | None = None,
    buffer_before: int = DETECTION_BUFFER,
    buffer_after: int = DETECTION_BUFFER,
) -> OfflineResult:
    """Score every ordered (memory lap, test lap) pair of every course in a role.

    Each lap takes a turn teaching the bank while every other lap of the same
    course is replayed against it with ground-truth routing.
    """
    cache = cache or FrozenFeatureCache(params)
    rows = []
    for course_id in dataset.courses(role):
        laps = dataset.laps(course_id)
        for mem in laps:
            bank = memory_from_labels(params, mem)
            for test in laps:
                if test is mem:
                    continue
                feats0 = cache.lap_features(course_id, test)
                row = _scored_row(params, bank, test, feats0, threshold, buffer_before, buffer_after)
                row["memory_lap"] = mem.lap_id
                rows.append(row)
    if not rows:
        raise EvalError(f"no course with two or more laps in role {role!r}")
    return OfflineResult(rows)


# ---------------------------------------------------------------------------
# Corruption robustness


def corruption_rng(
    seed: int, course_id: str, lap_id: str, kind: CorruptionKind, severity: int
) -> np.random.Generator:
    key = (
        seed,
        zlib.crc32(course_id.encode()),
        zlib.crc32(lap_id.encode()),
        zlib.crc32(kind.value.encode()),
        severity,
    )
    return np.random.Generator(np.random.Philox(np.random.SeedSequence(key)))


def corrupt_lap_rasters(
    lap: Lap, kind: CorruptionKind, severity: int, rng: np.random.Generator
) -> np.ndarray:
    """Both cameras of every frame through the same corruption, in frame order."""
    rasters = np.asarray(lap.rasters(), dtype=np.float64)
    out = np.empty_like(rasters)
    for i in range(rasters.shape[0]):
        for cam in range(2):
            out[i, cam] = apply_corruption(rasters[i, cam], kind, severity, rng)
    return out


def eval_corruptions(
    params: DetectorParams,
    dataset: Dataset,
    role: str = "test",
    threshold: float = 0.5,
    seed: int = 0,
    kinds: Sequence[CorruptionKind] = tuple(CorruptionKind),
    severities: Sequence[int] = (1, 2, 3),
    cache: FrozenFeatureCache | None = None,
    jobs: int = 1,
    buffer_before: int = DETECTION_BUFFER,
    buffer_after: int = DETECTION_BUFFER,
) -> list[dict]:
    """Clean-memory, corrupted-test segment accuracy per (kind, severity).

    The first lap of each course teaches the bank from clean frames; the
    remaining laps are re-scored once per corruption setting, with the clean
    replay included as severity 0 of kind "clean".  Cells are independent
    and keyed by their own rng, so running them across threads changes
    nothing but the wall clock.
    """
    cache = cache or FrozenFeatureCache(params)
    banks: dict[str, MemoryBank] = {}
    cells: list[tuple[str, Lap, CorruptionKind | None, int]] = []
    for course_id in dataset.courses(role):
        laps = dataset.laps(course_id)
        if len(laps) < 2:
            continue
        banks[course_id] = memory_from_labels(params, laps[0])
        for test in laps[1:]:
            cache.lap_features(course_id, test)
            cells.append((course_id, test, None, 0))
            for kind in kinds:
                for sev in severities:
                    cells.append((course_id, test, kind, sev))
    if not cells:
        raise EvalError(f"no course with two or more laps in role {role!r}")

    def run_cell(cell: tuple[str, Lap, CorruptionKind | None, int]) -> dict:
        course_id, test, kind, sev = cell
        if kind is None:
            feats0 = cache.lap_features(course_id, test)
        else:
            rng = corruption_rng(seed, course_id, test.lap_id, kind, sev)
            feats0 = frozen_features(params, corrupt_lap_rasters(test, kind, sev, rng))
        row = _scored_row(
            params, banks[course_id], test, feats0, threshold, buffer_before, buffer_after
        )
        row.update({"kind": "clean" if kind is None else kind.value, "severity": sev})
        return row

    if jobs > 1:
        from concurrent.futures import ThreadPoolExecutor

        with ThreadPoolExecutor(max_workers=jobs) as pool:
            return list(pool.map(run_cell, cells))
    return [run_cell(cell) for cell in cells]


def corruption_summary(rows: list[dict]) -> dict[tuple[str, int], float]:
    """Mean accuracy per (kind, severity), in severity order per kind."""
    grouped: dict[tuple[str, int], list[float]] = {}
    for r in rows:
        grouped.setdefault((r["kind"], r["severity"]), []).append(r["accuracy"])
    return {k: float(np.mean(v)) for k, v in sorted(grouped.items())}


# ---------------------------------------------------------------------------
# Metric ablation grid


def ablation_grid(
    dataset: Dataset,
    backbone_seed: int,
    init_seed: int,
    phase1: TrainHyper,
    phase2: TrainHyper,
    kinds: Sequence = ALL_METRIC_KINDS,
    role: str = "test",
    log: Callable[[str], None] | None = None,
) -> list[dict]:
    """Train every metric kind through phase 1, score it, continue through
    phase 2, and score again.  The frozen projection depends only on the
    backbone seed, so one feature cache serves every cell of the grid."""
    rows: list[dict] = []
    cache: FrozenFeatureCache | None = None
    for kind in kinds:
        params = init_detector(kind, backbone_seed, init_seed)
        if cache is None:
            cache = FrozenFeatureCache(params)
        train_phase(params, dataset, phase1, cache)
        for regime, hyper in (("phase1", None), ("two_phase", phase2)):
            if hyper is not None:
                train_phase(params, dataset, hyper, cache)
            val = validate(params, dataset, cache=cache)
            test = eval_offline(
                params, dataset, role=role, threshold=val.best_threshold, cache=cache
            )
            rows.append(
                {
                    "metric": kind.metric.value,
                    "form": kind.form.value,
                    "regime": regime,
                    "threshold": val.best_threshold,
                    "val_accuracy": val.best_accuracy,
                    "test_accuracy": test.mean_accuracy,
                }
            )
            if log:
                log(
                    f"{kind.label()} {regime}: val={val.best_accuracy:.3f} "
                    f"test={test.mean_accuracy:.3f} t={val.best_threshold:.2f}"
                )
    return rows


# ---------------------------------------------------------------------------
# Closed-loop driving


DETECT_LEAD_MIN = -0.5  # arc window around a waypoint where a detection is on time
DETECT_LEAD_MAX = 4.0
BRANCH_TRAVEL_LIMIT = 4.5  # junction crossing plus three corridor widths of travel
RESPAWN_OFFSET = 1.0  # respawn this far past a failed waypoint
TURN_COMPLETE = math.radians(80.0)  # heading change that ends a latched turn
FRAME_ALLOWANCE = 2.5  # stall budget, as a multiple of the nominal segment time


@dataclass
class WaypointOutcome:
    course_id: str
    memory_lap: str
    repeat: int
    waypoint: int
    success: bool
    mode: str  # "ok", "spurious", "missed", "wrong_branch", "collision", "stalled"
    frames: int
    detect_lead: float  # arc distance to the corner when the detector fired


def _segment_allowance(route, s: float, wp_arc: float) -> int:
    ahead = (wp_arc - s) % route.length
    return int(FRAME_ALLOWANCE * (ahead + 2.0) / (SPEED * DT)) + 20


def _entry_direction(route, wp_arc: float) -> tuple[int, int]:
    """Grid direction of travel on the corridor leading into a corner."""
    _, ang = route.point_at(wp_arc - 0.6)
    return int(round(math.cos(ang))), int(round(math.sin(ang)))


def _branch_cells(corner: tuple[int, int], d: tuple[int, int]) -> dict[tuple[int, int], Action]:
    """The three cells reachable out of a junction, keyed to the turn taken."""
    cx, cy = corner
    dx, dy = d
    return {
        (cx - dy, cy + dx): Action.LEFT,
        (cx + dx, cy + dy): Action.STRAIGHT,
        (cx + dy, cy - dx): Action.RIGHT,
    }


def run_course(
    world: World,
    course: CourseSpec,
    det_params: DetectorParams,
    bank: MemoryBank,
    ctrl_params: ControllerParams,
    threshold: float,
    rng: np.random.Generator,
    noise_sigma: float = 0.02,
    memory_lap: str = "",
    repeat: int = 0,
) -> list[WaypointOutcome]:
    """One closed-loop pass over every waypoint of a course.

    A waypoint succeeds when the detector fires inside its arc window and the
    vehicle then leaves the junction into the branch corridor its action
    selects, within a short travel budget.  On any failure the vehicle is set
    back on the route just past that waypoint and the navigator's expectation
    is advanced to the next one.
    """
    route = course.route
    n = course.n_waypoints
    nav = Navigator(det_params, bank, threshold)
    pose, s = spawn_pose(course, rng)
    target = 0
    detect_lead = math.nan
    latch_heading: float | None = None
    frames_in_segment = 0
    junction_travel: float | None = None
    allowance = _segment_allowance(route, s, course.wp_arcs[0])
    outcomes: list[WaypointOutcome] = []

    def record(success: bool, mode: str) -> None:
        outcomes.append(
            WaypointOutcome(
                course.course_id, memory_lap, repeat, target,
                success, mode, frames_in_segment, detect_lead,
            )
        )

    def next_segment() -> None:
        nonlocal detect_lead, frames_in_segment, allowance, junction_travel
        detect_lead = math.nan
        frames_in_segment = 0
        junction_travel = None
        if target < n:
            allowance = _segment_allowance(route, s, course.wp_arcs[target])

    while target < n:
        corner = course.waypoints[target].cell
        branches = _branch_cells(corner, _entry_direction(route, course.wp_arcs[target]))
        frames_in_segment += 1
        left, right = render_observation(world, pose, noise_sigma, rng)
        event = nav.push_frame(left, right)
        failure = None
        if event is not None:
            lead = route.arc_delta(s, course.wp_arcs[event.waypoint])
            if event.waypoint != target or not (DETECT_LEAD_MIN <= lead <= DETECT_LEAD_MAX):
                failure = "spurious"
            else:
                detect_lead = lead
                if event.action is not Action.STRAIGHT:
                    latch_heading = pose.heading
        if failure is None:
            if latch_heading is not None and abs(wrap_angle(pose.heading - latch_heading)) >= TURN_COMPLETE:
                nav.revert_to_straight()
                latch_heading = None
            sigma = predict_steering(ctrl_params, left, right, nav.current_action())
            pose, hit = step_vehicle(world, pose, sigma)
            s = route.project(pose.x, pose.y, s)
            cell = (math.floor(pose.x), math.floor(pose.y))
            if junction_travel is not None:
                junction_travel += SPEED * DT
            elif cell == corner:
                junction_travel = 0.0
            if hit:
                failure = "collision"
            elif frames_in_segment > allowance:
                failure = "stalled"
            elif junction_travel is not None and cell in branches:
                # The junction has been crossed; the first branch corridor
                # entered decides the outcome.
                if math.isnan(detect_lead):
                    failure = "missed"
                elif branches[cell] is not course.waypoints[target].action:
                    failure = "wrong_branch"
                else:
                    record(True, "ok")
                    target += 1
                    next_segment()
                    continue
            elif junction_travel is not None and junction_travel > BRANCH_TRAVEL_LIMIT:
                failure = "missed" if math.isnan(detect_lead) else "stalled"
        if failure is not None:
            record(False, failure)
            target += 1
            if target >= n:
                break
            pose, s = _jittered_pose(
                route, (course.wp_arcs[target - 1] + RESPAWN_OFFSET) % route.length, rng
            )
            nav.reset(upcoming=target)
            latch_heading = None
            next_segment()
    return outcomes


@dataclass
class OnlineResult:
    """Waypoint outcomes of all closed-loop passes over one course."""

    outcomes: list[WaypointOutcome]

    @property
    def waypoint_attempts(self) -> int:
        return len(self.outcomes)

    @property
    def waypoint_successes(self) -> int:
        return sum(o.success for o in self.outcomes)

    def course_runs(self) -> dict[tuple[str, int], bool]:
        """Per (memory lap, repeat): True when every waypoint succeeded."""
        runs: dict[tuple[str, int], bool] = {}
        for o in self.outcomes:
            key = (o.memory_lap, o.repeat)
            runs[key] = runs.get(key, True) and o.success
        return runs

    @property
    def course_attempts(self) -> int:
        return len(self.course_runs())

    @property
    def course_successes(self) -> int:
        return sum(self.course_runs().values())


def eval_online(
    world: World,
    course: CourseSpec,
    det_params: DetectorParams,
    ctrl_params: ControllerParams,
    memory_laps: Sequence[Lap],
    threshold: float,
    seed: int,
    repeats: int = 2,
    noise_sigma: float = 0.02,
) -> OnlineResult:
    """Closed-loop passes for every (memory lap, repeat) combination.

    The rng for a combination is keyed by (seed, course, lap index, repeat)
    only, so runs at different thresholds face identical spawn jitter and
    render noise until their trajectories diverge.
    """
    rows: list[WaypointOutcome] = []
    for mi, mem in enumerate(memory_laps):
        bank = build_memory(det_params, mem, course)
        for rep in range(repeats):
            rng = np.random.Generator(
                np.random.Philox(
                    np.random.SeedSequence((seed, zlib.crc32(course.course_id.encode()), mi, rep))
                )
            )
            rows.extend(
                run_course(
                    world, course, det_params, bank, ctrl_params, threshold, rng,
                    noise_sigma, memory_lap=mem.lap_id, repeat=rep,
                )
            )
    return OnlineResult(rows)


def success_rate(outcomes: Iterable[WaypointOutcome]) -> float:
    outcomes = list(outcomes)
    if not outcomes:
        raise EvalError("no waypoint outcomes")
    return sum(o.success for o in outcomes) / len(outcomes)


def failure_counts(outcomes: Iterable[WaypointOutcome]) -> dict[str, int]:
    counts: dict[str, int] = {}
    for o in outcomes:
        if not o.success:
            counts[o.mode] = counts.get(o.mode, 0) + 1
    return dict(sorted(counts.items()))


# ---------------------------------------------------------------------------
# Reports


REPORT_FIELDS = ("table", "row", "col", "value", "seed", "threshold")


def format_value(v) -> str:
    if isinstance(v, (bool, np.bool_)):
        return str(int(v))
    if isinstance(v, (int, np.integer)):
        return str(int(v))
    if isinstance(v, (float, np.floating)):
        return f"{float(v):.6f}"
    return str(v)


def flatten_rows(
    table: str,
    rows: Sequence[dict],
    row_fields: Sequence[str],
    value_fields: Sequence[str],
    seed,
    threshold,
) -> list[tuple[str, ...]]:
    """Report entries for a list of row dicts: one entry per (row, value field)."""
    seed_s, thr_s = format_value(seed), format_value(threshold)
    out = []
    for r in rows:
        label = "/".join(str(r[f]) for f in row_fields)
        for col in value_fields:
            out.append((table, label, col, format_value(r[col]), seed_s, thr_s))
    return out


def write_report(path, entries: Sequence[tuple[str, ...]]) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(REPORT_FIELDS)
        writer.writerows(entries)


def read_report(path) -> list[tuple[str, ...]]:
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader)
        if tuple(header) != REPORT_FIELDS:
            raise EvalError(f"{path}: unexpected report header {header!r}")
        return [tuple(row) for row in reader]


def render_report(entries: Sequence[tuple[str, ...]]) -> str:
    """Aligned text tables, one block per table name, rows and columns in
    first-appearance order."""
    by_table: dict[str, dict[str, dict[str, str]]] = {}
    cols_of: dict[str, list[str]] = {}
    for table, row, col, value, _, _ in entries:
        grid = by_table.setdefault(table, {})
        grid.setdefault(row, {})[col] = value
        cols = cols_of.setdefault(table, [])
        if col not in cols:
            cols.append(col)
    blocks = []
    for table, grid in by_table.items():
        cols = cols_of[table]
        rows = list(grid)
        head_w = max([len(table)] + [len(r) for r in rows])
        widths = [max([len(c)] + [len(grid[r].get(c, "")) for r in rows]) for c in cols]
        lines = [
            "  ".join([table.ljust(head_w)] + [c.rjust(w) for c, w in zip(cols, widths)])
        ]
        for r in rows:
            lines.append(
                "  ".join([r.ljust(head_w)] + [grid[r].get(c, "").rjust(w) for c, w in zip(cols, widths)])
            )
        blocks.append("\n".join(lines))
    return "\n\n".join(blocks) + "\n"
