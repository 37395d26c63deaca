"""Lap storage, episode sampling, training transforms, and synthetic corruptions.

A lap is stored as a human-readable manifest (per-frame steering and labels)
plus a raw little-endian float32 raster file that is memory-mapped on load.
Frame labels tie every frame to exactly one waypoint, either as part of the
approach segment (positive) or the remaining corridor (negative).
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from enum import Enum
from pathlib import Path
from typing import Sequence

import numpy as np
from scipy import ndimage

RASTER_SHAPE = (32, 32)


class DatastoreError(Exception):
    pass


class SamplingError(Exception):
    pass


@dataclass
class FrameRecord:
    """One time step: camera rasters and the steering command issued there."""

    index: int
    raster_left: np.ndarray
    raster_right: np.ndarray
    steering: float


@dataclass
class Lap:
    """An ordered run of frames for one course, with optional frame labels."""

    course_id: str
    lap_id: str
    frames: list[FrameRecord]
    label_pos: np.ndarray | None = None  # bool (n,), approach-segment frames
    label_wp: np.ndarray | None = None  # int (n,), waypoint each frame belongs to
    _rasters: np.ndarray | None = field(default=None, repr=False)

    @property
    def n_frames(self) -> int:
        return len(self.frames)

    @property
    def labelled(self) -> bool:
        return self.label_pos is not None

    def set_labels(self, label_pos: np.ndarray, label_wp: np.ndarray) -> None:
        if len(label_pos) != self.n_frames or len(label_wp) != self.n_frames:
            raise DatastoreError("label length does not match frame count")
        self.label_pos = np.asarray(label_pos, dtype=bool)
        self.label_wp = np.asarray(label_wp, dtype=np.int64)

    def rasters(self) -> np.ndarray:
        """All rasters as one (n, 2, H, W) float32 array (cached)."""
        if self._rasters is None:
            self._rasters = np.stack(
                [np.stack([f.raster_left, f.raster_right]) for f in self.frames]
            ).astype(np.float32)
        return self._rasters

    def steering(self) -> np.ndarray:
        return np.array([f.steering for f in self.frames])


def _lap_paths(root, course_id: str, lap_id: str) -> tuple[Path, Path]:
    base = Path(root) / course_id
    return base / f"{lap_id}.manifest", base / f"{lap_id}.rasters"


def save_lap(lap: Lap, root) -> None:
    manifest, rasters_path = _lap_paths(root, lap.course_id, lap.lap_id)
    manifest.parent.mkdir(parents=True, exist_ok=True)
    lines = [
        "waynav-lap v1",
        f"course = {lap.course_id}",
        f"lap = {lap.lap_id}",
        f"frames = {lap.n_frames}",
        f"raster = {RASTER_SHAPE[0]}x{RASTER_SHAPE[1]}",
    ]
    for i, frame in enumerate(lap.frames):
        if lap.labelled:
            tag = ("P" if lap.label_pos[i] else "N") + str(int(lap.label_wp[i]))
        else:
            tag = "-"
        lines.append(f"frame {frame.index} {frame.steering:.9f} {tag}")
    manifest.write_text("\n".join(lines) + "\n")
    stacked = lap.rasters()
    with open(rasters_path, "wb") as fh:
        fh.write(np.ascontiguousarray(stacked, dtype="<f4").tobytes())


def load_lap(root, course_id: str, lap_id: str) -> Lap:
    manifest, rasters_path = _lap_paths(root, course_id, lap_id)
    if not manifest.exists():
        raise DatastoreError(f"no manifest at {manifest}")
    lines = manifest.read_text().splitlines()
    if not lines or lines[0] != "waynav-lap v1":
        raise DatastoreError(f"{manifest}: unrecognised manifest header")
    meta: dict[str, str] = {}
    frame_lines: list[str] = []
    for line in lines[1:]:
        if line.startswith("frame "):
            frame_lines.append(line)
        elif line:
            key, _, value = line.partition(" = ")
            meta[key] = value
    n = int(meta["frames"])
    h, w = (int(d) for d in meta["raster"].split("x"))
    if (h, w) != RASTER_SHAPE:
        raise DatastoreError(f"{manifest}: raster shape {h}x{w} unsupported")
    if len(frame_lines) != n:
        raise DatastoreError(f"{manifest}: expected {n} frame lines, found {len(frame_lines)}")
    expected = 4 * n * 2 * h * w
    actual = rasters_path.stat().st_size
    if actual != expected:
        raise DatastoreError(f"{rasters_path}: size {actual} != expected {expected}")
    rasters = np.memmap(rasters_path, dtype="<f4", mode="r", shape=(n, 2, h, w))

    frames: list[FrameRecord] = []
    label_pos = np.zeros(n, dtype=bool)
    label_wp = np.zeros(n, dtype=np.int64)
    labelled = True
    for row, line in enumerate(frame_lines):
        _, idx_s, steer_s, tag = line.split(" ")
        frames.append(FrameRecord(int(idx_s), rasters[row, 0], rasters[row, 1], float(steer_s)))
        if tag == "-":
            labelled = False
        else:
            label_pos[row] = tag[0] == "P"
            label_wp[row] = int(tag[1:])
    lap = Lap(meta["course"], meta["lap"], frames, _rasters=np.asarray(rasters))
    if labelled:
        lap.set_labels(label_pos, label_wp)
    return lap


def list_laps(root, course_id: str) -> list[str]:
    base = Path(root) / course_id
    if not base.is_dir():
        return []
    return sorted(p.stem for p in base.glob("*.manifest"))


# ---------------------------------------------------------------------------
# Episodes


@dataclass
class Episode:
    """Few-shot unit: a support block plus labelled query blocks."""

    support: list[FrameRecord]
    queries: list[tuple[list[FrameRecord], int]]
    course_id: str
    waypoint: int

    def raster_blocks(self) -> tuple[np.ndarray, np.ndarray]:
        """Blocks as ((1+Q), s, 2, H, W) float64 with block 0 the support, plus labels."""
        blocks = [self.support] + [frames for frames, _ in self.queries]
        stacked = np.stack(
            [
                np.stack([np.stack([f.raster_left, f.raster_right]) for f in frames])
                for frames in blocks
            ]
        ).astype(np.float64)
        labels = np.array([label for _, label in self.queries], dtype=np.float64)
        return stacked, labels


@dataclass
class _LapRuns:
    """Contiguous label runs for one lap: waypoint -> list of (start, length)."""

    pos: dict[int, list[tuple[int, int]]]
    neg: dict[int, list[tuple[int, int]]]


def label_runs(lap: Lap) -> _LapRuns:
    if not lap.labelled:
        raise DatastoreError(f"lap {lap.lap_id} has no labels")
    pos: dict[int, list[tuple[int, int]]] = {}
    neg: dict[int, list[tuple[int, int]]] = {}
    n = lap.n_frames
    start = 0
    for i in range(1, n + 1):
        boundary = (
            i == n
            or lap.label_pos[i] != lap.label_pos[start]
            or lap.label_wp[i] != lap.label_wp[start]
        )
        if boundary:
            bucket = pos if lap.label_pos[start] else neg
            bucket.setdefault(int(lap.label_wp[start]), []).append((start, i - start))
            start = i
    return _LapRuns(pos, neg)


class Dataset:
    """Laps grouped by course, indexed for episode sampling."""

    def __init__(self, laps: Sequence[Lap], roles: dict[str, str]):
        self.by_course: dict[str, list[Lap]] = {}
        self.roles = dict(roles)
        self._runs: dict[tuple[str, str], _LapRuns] = {}
        for lap in laps:
            if lap.course_id not in self.roles:
                raise DatastoreError(f"lap for unknown course {lap.course_id}")
            self.by_course.setdefault(lap.course_id, []).append(lap)
            self._runs[(lap.course_id, lap.lap_id)] = label_runs(lap)

    @classmethod
    def open(cls, root, roles: dict[str, str]) -> "Dataset":
        laps = [
            load_lap(root, course_id, lap_id)
            for course_id in roles
            for lap_id in list_laps(root, course_id)
        ]
        return cls(laps, roles)

    def courses(self, role: str | None = None) -> list[str]:
        ids = sorted(self.by_course)
        if role is None:
            return ids
        return [c for c in ids if self.roles[c] == role]

    def laps(self, course_id: str) -> list[Lap]:
        return self.by_course[course_id]

    def runs(self, course_id: str, lap_id: str) -> _LapRuns:
        return self._runs[(course_id, lap_id)]

    def _episode_candidates(self, course_id: str, s: int) -> list[int]:
        """Waypoints with a long-enough positive run in at least two laps."""
        counts: dict[int, int] = {}
        for lap in self.by_course[course_id]:
            runs = self.runs(course_id, lap.lap_id)
            for wp, rs in runs.pos.items():
                if any(length >= s for _, length in rs):
                    counts[wp] = counts.get(wp, 0) + 1
        return sorted(wp for wp, c in counts.items() if c >= 2)

    def sample_episode(
        self,
        rng: np.random.Generator,
        role: str = "train",
        s: int = 10,
        q_p: int = 1,
        q_n: int = 6,
        max_tries: int = 100,
    ) -> Episode:
        """Draw one episode: support and positive query come from different laps
        of the same course and waypoint; negatives come from that waypoint's
        corridor segment in any lap of the course."""
        course_ids = self.courses(role)
        if not course_ids:
            raise SamplingError(f"no courses with role {role!r}")
        for _ in range(max_tries):
            course_id = course_ids[rng.integers(len(course_ids))]
            candidates = self._episode_candidates(course_id, s)
            if not candidates:
                continue
            wp = int(candidates[rng.integers(len(candidates))])
            laps = self.by_course[course_id]
            pos_laps = [
                lap
                for lap in laps
                if any(
                    length >= s for _, length in self.runs(course_id, lap.lap_id).pos.get(wp, [])
                )
            ]
            if len(pos_laps) < 2:
                continue
            support_lap = pos_laps[rng.integers(len(pos_laps))]
            others = [lap for lap in pos_laps if lap is not support_lap]
            query_lap = others[rng.integers(len(others))]
            support = self._draw_pos_block(rng, course_id, support_lap, wp, s)
            queries: list[tuple[list[FrameRecord], int]] = []
            for _ in range(q_p):
                queries.append((self._draw_pos_block(rng, course_id, query_lap, wp, s), 1))
            neg_sources = [
                (lap, run)
                for lap in laps
                for run in self.runs(course_id, lap.lap_id).neg.get(wp, [])
                if run[1] >= s
            ]
            if not neg_sources:
                continue
            for _ in range(q_n):
                lap, (start, length) = neg_sources[rng.integers(len(neg_sources))]
                off = int(rng.integers(length - s + 1))
                queries.append((lap.frames[start + off : start + off + s], 0))
            return Episode(support, queries, course_id, wp)
        raise SamplingError(f"could not sample an episode for role {role!r}")

    def _draw_pos_block(self, rng, course_id, lap, wp, s) -> list[FrameRecord]:
        runs = [r for r in self.runs(course_id, lap.lap_id).pos.get(wp, []) if r[1] >= s]
        start, length = runs[rng.integers(len(runs))]
        off = int(rng.integers(length - s + 1))
        return lap.frames[start + off : start + off + s]


# ---------------------------------------------------------------------------
# Training transforms

ROTATE_MAX_DEG = 10.0
BRIGHTNESS_RANGE = (0.7, 1.4)
CONTRAST_RANGE = (0.8, 1.25)
DROPOUT_MAX_HOLES = 2
DROPOUT_MAX_SIZE = 5

_ROTATE_QUANTUM = 0.5
_rotate_cache: dict[int, tuple[np.ndarray, ...]] = {}


def _rotation_gather(angle_deg: float, shape: tuple[int, int]):
    """Bilinear sampling indices/weights for an in-place rotation, cached on a
    quantised angle grid so repeated draws reuse the geometry."""
    key = int(round(angle_deg / _ROTATE_QUANTUM))
    if key in _rotate_cache:
        return _rotate_cache[key]
    h, w = shape
    theta = math.radians(key * _ROTATE_QUANTUM)
    cy, cx = (h - 1) / 2.0, (w - 1) / 2.0
    rows, cols = np.mgrid[0:h, 0:w]
    dy, dx = rows - cy, cols - cx
    # Inverse map: output pixel pulls from the source rotated the other way.
    src_y = cy + dy * math.cos(theta) - dx * math.sin(theta)
    src_x = cx + dy * math.sin(theta) + dx * math.cos(theta)
    y0 = np.clip(np.floor(src_y).astype(np.int64), 0, h - 2)
    x0 = np.clip(np.floor(src_x).astype(np.int64), 0, w - 2)
    wy = np.clip(src_y - y0, 0.0, 1.0)
    wx = np.clip(src_x - x0, 0.0, 1.0)
    _rotate_cache[key] = (y0.ravel(), x0.ravel(), wy.ravel(), wx.ravel())
    return _rotate_cache[key]


def rotate_raster(raster: np.ndarray, angle_deg: float) -> np.ndarray:
    """Rotate about the centre with bilinear sampling and edge clamping."""
    raster = np.asarray(raster, dtype=np.float64)
    h, w = raster.shape
    y0, x0, wy, wx = _rotation_gather(angle_deg, (h, w))
    tl = raster[y0, x0]
    tr = raster[y0, x0 + 1]
    bl = raster[y0 + 1, x0]
    br = raster[y0 + 1, x0 + 1]
    top = tl + (tr - tl) * wx
    bot = bl + (br - bl) * wx
    return (top + (bot - top) * wy).reshape(h, w)


@dataclass
class TransformParams:
    angle_deg: float
    brightness: float
    contrast: float
    holes: list[tuple[int, int, int, int]]  # (row, col, height, width)

    @staticmethod
    def identity() -> "TransformParams":
        return TransformParams(0.0, 1.0, 1.0, [])


def draw_transform_params(
    rng: np.random.Generator, shape: tuple[int, int] = RASTER_SHAPE
) -> TransformParams:
    holes: list[tuple[int, int, int, int]] = []
    if rng.random() < 0.5:
        for _ in range(int(rng.integers(1, DROPOUT_MAX_HOLES + 1))):
            hh = int(rng.integers(1, DROPOUT_MAX_SIZE + 1))
            ww = int(rng.integers(1, DROPOUT_MAX_SIZE + 1))
            holes.append(
                (int(rng.integers(shape[0] - hh + 1)), int(rng.integers(shape[1] - ww + 1)), hh, ww)
            )
    return TransformParams(
        angle_deg=float(rng.uniform(-ROTATE_MAX_DEG, ROTATE_MAX_DEG)),
        brightness=float(rng.uniform(*BRIGHTNESS_RANGE)),
        contrast=float(rng.uniform(*CONTRAST_RANGE)),
        holes=holes,
    )


def apply_transform(raster: np.ndarray, params: TransformParams) -> np.ndarray:
    out = rotate_raster(raster, params.angle_deg) if params.angle_deg else np.array(raster, dtype=np.float64)
    out *= params.brightness
    out = (out - 0.5) * params.contrast + 0.5
    for r, c, hh, ww in params.holes:
        out[r : r + hh, c : c + ww] = 0.0
    return np.clip(out, 0.0, 1.0)


def apply_training_transforms(
    raster_left: np.ndarray, raster_right: np.ndarray, rng: np.random.Generator
) -> tuple[np.ndarray, np.ndarray]:
    """One random photometric/geometric draw applied to both cameras."""
    params = draw_transform_params(rng)
    return apply_transform(raster_left, params), apply_transform(raster_right, params)


# ---------------------------------------------------------------------------
# Corruptions (evaluation-time robustness probes, three severities each)


class CorruptionKind(Enum):
    DROPOUT = "dropout"
    BRIGHTNESS = "brightness"
    DEFOCUS = "defocus"
    NOISE = "noise"


_DROPOUT_MAX = {1: 6, 2: 11, 3: 17}
_BRIGHTNESS = {1: (0.75, 1.33), 2: (0.5, 2.0), 3: (0.33, 3.0)}
_DEFOCUS_RADIUS = {1: 1, 2: 2, 3: 3}
_NOISE_SIGMA = {1: 10.0 / 255.0, 2: 50.0 / 255.0, 3: 200.0 / 255.0}

_disk_cache: dict[int, np.ndarray] = {}


def _disk_kernel(radius: int) -> np.ndarray:
    if radius not in _disk_cache:
        span = np.arange(-radius, radius + 1)
        yy, xx = np.meshgrid(span, span, indexing="ij")
        mask = (yy**2 + xx**2) <= radius**2 + 0.25
        _disk_cache[radius] = mask / mask.sum()
    return _disk_cache[radius]


def apply_corruption(
    raster: np.ndarray,
    kind: CorruptionKind,
    severity: int,
    rng: np.random.Generator | None = None,
) -> np.ndarray:
    """Corrupt one raster.  Defocus is deterministic; the rest need an rng."""
    if severity not in (1, 2, 3):
        raise ValueError(f"severity must be 1, 2 or 3, got {severity!r}")
    raster = np.asarray(raster, dtype=np.float64)
    if kind is CorruptionKind.DEFOCUS:
        return np.clip(ndimage.convolve(raster, _disk_kernel(_DEFOCUS_RADIUS[severity]), mode="nearest"), 0.0, 1.0)
    if rng is None:
        raise ValueError(f"{kind.value} corruption requires an rng")
    if kind is CorruptionKind.DROPOUT:
        out = raster.copy()
        h, w = out.shape
        limit = _DROPOUT_MAX[severity]
        for _ in range(int(rng.integers(1, 4))):
            hh = int(rng.integers(1, limit + 1))
            ww = int(rng.integers(1, limit + 1))
            r = int(rng.integers(h - hh + 1))
            c = int(rng.integers(w - ww + 1))
            out[r : r + hh, c : c + ww] = 0.0
        return out
    if kind is CorruptionKind.BRIGHTNESS:
        lo, hi = _BRIGHTNESS[severity]
        return np.clip(raster * rng.uniform(lo, hi), 0.0, 1.0)
    if kind is CorruptionKind.NOISE:
        return np.clip(raster + rng.normal(0.0, _NOISE_SIGMA[severity], size=raster.shape), 0.0, 1.0)
    raise ValueError(f"unknown corruption kind {kind!r}")
