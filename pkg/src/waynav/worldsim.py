"""Procedural corridor worlds: layout, textures, rendering, vehicle, expert driver.

A world is a grid of unit cells, mostly wall, with a one-cell-wide closed
corridor loop carved through it.  Every loop corner is a waypoint: two short
dead-end stubs are carved there (straight ahead and opposite the loop's turn)
so each corner reads as a four-way junction, and the surrounding walls get a
junction-specific landmark texture.  One world carries two courses, the
clockwise and counter-clockwise traversals of the same loop.

Observations are a pair of 32x32 grayscale rasters from two forward cameras
yawed 30 degrees left and right, rendered by per-column raycasting.  The
vehicle is a kinematic bicycle driven by a pure-pursuit expert that follows
the course centreline.
"""

from __future__ import annotations

import math
import zlib
from dataclasses import dataclass
from enum import Enum

import numpy as np

from .datastore import FrameRecord, Lap

# Vehicle.
WHEELBASE = 0.25
SPEED = 1.0
DT = 0.1
MAX_STEER = math.pi / 6  # steering command 1.0 = full left lock
VEHICLE_RADIUS = 0.12
LOOKAHEAD = 1.5

# Cameras.
RASTER_SIZE = 32
FOV = math.pi / 3
CAMERA_YAW = (math.pi / 6, -math.pi / 6)  # left, right
FOCAL = (RASTER_SIZE / 2) / math.tan(FOV / 2)
CEIL_SHADE = 0.12
FLOOR_SHADE = 0.35
Y_FACE_SHADE = 0.85

# Lap recording / labelling.
POSITIVE_LEN = 15  # frames before a steering onset that count as the approach
APPROACH_ARC = 3.5  # spawn distance before waypoint 0
STEER_DEV_THRESHOLD = 0.15
STEER_MIN_RUN = 3


class WorldGenError(Exception):
    pass


class RecordingError(Exception):
    pass


class SegmentationError(Exception):
    pass


class Action(Enum):
    LEFT = "left"
    STRAIGHT = "straight"
    RIGHT = "right"


ACTION_ORDER = (Action.LEFT, Action.STRAIGHT, Action.RIGHT)

_DIRVEC = ((1, 0), (0, 1), (-1, 0), (0, -1))  # E, N, W, S


@dataclass(frozen=True)
class Pose:
    x: float
    y: float
    heading: float


@dataclass(frozen=True)
class Waypoint:
    index: int
    cell: tuple[int, int]
    action: Action


def wrap_angle(a: float) -> float:
    return (a + math.pi) % (2.0 * math.pi) - math.pi


class RoutePolyline:
    """Polyline through cell centres, with arc-length bookkeeping.

    Closed polylines wrap all arc arithmetic around the loop; open ones clamp
    to the endpoints, which makes the pure-pursuit target stick to the final
    point when the lookahead overruns the end.
    """

    def __init__(self, points: np.ndarray, closed: bool = True):
        self.points = np.asarray(points, dtype=np.float64)
        if self.points.ndim != 2 or self.points.shape[0] < 3:
            raise ValueError("route needs at least three points")
        self.closed = closed
        if closed:
            self.segs = np.roll(self.points, -1, axis=0) - self.points
        else:
            self.segs = self.points[1:] - self.points[:-1]
        self.seg_len = np.hypot(self.segs[:, 0], self.segs[:, 1])
        self.start_arc = np.concatenate([[0.0], np.cumsum(self.seg_len)[:-1]])
        self.length = float(self.seg_len.sum())
        self.n_segs = len(self.segs)

    def _wrap(self, s: float) -> float:
        if self.closed:
            return s % self.length
        return min(max(s, 0.0), self.length)

    def point_at(self, s: float) -> tuple[np.ndarray, float]:
        """Point and tangent angle at arc position s."""
        s = self._wrap(s)
        i = min(int(np.searchsorted(self.start_arc, s, side="right")) - 1, self.n_segs - 1)
        t = (s - self.start_arc[i]) / self.seg_len[i]
        pt = self.points[i] + t * self.segs[i]
        return pt, math.atan2(self.segs[i, 1], self.segs[i, 0])

    def project(self, x: float, y: float, s_hint: float | None = None, window: float = 3.0) -> float:
        """Arc position of the nearest route point, searched near s_hint."""
        if s_hint is None:
            idx = np.arange(self.n_segs)
        else:
            base = int(self._wrap(s_hint))
            idx = base + np.arange(-int(window), int(2 * window) + 1)
            if self.closed:
                idx = idx % self.n_segs
            else:
                idx = np.clip(idx, 0, self.n_segs - 1)
        a = self.points[idx]
        seg = self.segs[idx]
        ln2 = self.seg_len[idx] ** 2
        t = np.clip(((x - a[:, 0]) * seg[:, 0] + (y - a[:, 1]) * seg[:, 1]) / ln2, 0.0, 1.0)
        cx = a[:, 0] + t * seg[:, 0]
        cy = a[:, 1] + t * seg[:, 1]
        d2 = (cx - x) ** 2 + (cy - y) ** 2
        best = int(np.argmin(d2))
        s = float(self.start_arc[idx[best]] + t[best] * self.seg_len[idx[best]])
        return s % self.length if self.closed else s

    def arc_delta(self, s_from: float, s_to: float) -> float:
        """Signed forward progress from s_from to s_to, wrapped to half a loop."""
        if not self.closed:
            return s_to - s_from
        d = (s_to - s_from) % self.length
        if d > self.length / 2:
            d -= self.length
        return d


@dataclass
class CourseSpec:
    course_id: str
    role: str
    direction: str  # "ccw" or "cw"
    waypoints: tuple[Waypoint, ...]
    route: RoutePolyline
    wp_arcs: np.ndarray  # arc position of each waypoint along the route

    @property
    def n_waypoints(self) -> int:
        return len(self.waypoints)

    @property
    def loop_length(self) -> float:
        return self.route.length

    def arc_to_waypoint(self, s: float, index: int) -> float:
        """Forward arc distance from s to the given waypoint (non-negative)."""
        return (self.wp_arcs[index] - s) % self.route.length


@dataclass
class TexParams:
    family: int
    base: float
    amp: float
    fu: int
    fv: int
    pu: float
    pv: float


@dataclass
class World:
    world_id: str
    role: str
    seed: int
    grid: np.ndarray  # uint8 (nx, ny), 1 = wall
    tex: np.ndarray  # int16 (nx, ny), texture id per wall cell (0 = background)
    texture_params: dict[int, TexParams]
    corner_cells: tuple[tuple[int, int], ...]
    courses: tuple[CourseSpec, ...]

    def course(self, direction: str) -> CourseSpec:
        for c in self.courses:
            if c.direction == direction:
                return c
        raise KeyError(f"world {self.world_id} has no {direction} course")


# ---------------------------------------------------------------------------
# Layout generation


def _turn_template(rng: np.random.Generator, corners: int) -> list[int]:
    """Turn (+1 left, -1 right) at each corner for counter-clockwise travel."""
    if corners == 4:
        return [1, 1, 1, 1]
    if corners == 6:
        return [1, 1, -1, 1, 1, 1]
    if corners == 8:
        options = ([1, 1, -1, 1, 1, -1, 1, 1], [1, -1, 1, 1, 1, -1, 1, 1])
        return list(options[rng.integers(len(options))])
    if corners == 20:
        return [1, -1] * 4 + [1, 1] + [1, -1] * 4 + [1, 1]
    if corners < 4 or corners % 2:
        raise WorldGenError(f"corner count must be an even number >= 4, got {corners}")
    extra = (corners - 4) // 2
    template = [1] * (4 + extra) + [-1] * extra
    return list(rng.permutation(template))


def _balance(rng, lengths, dirs, plus_dir, minus_dir, min_edge):
    plus = [i for i, d in enumerate(dirs) if d == plus_dir]
    minus = [i for i, d in enumerate(dirs) if d == minus_dir]
    diff = int(lengths[plus].sum() - lengths[minus].sum())
    while diff != 0:
        if diff > 0:
            shrink = [i for i in plus if lengths[i] > min_edge]
            if shrink:
                lengths[shrink[rng.integers(len(shrink))]] -= 1
            else:
                lengths[minus[rng.integers(len(minus))]] += 1
            diff -= 1
        else:
            shrink = [i for i in minus if lengths[i] > min_edge]
            if shrink:
                lengths[shrink[rng.integers(len(shrink))]] -= 1
            else:
                lengths[plus[rng.integers(len(plus))]] += 1
            diff += 1


def _generate_layout(rng, corners, min_edge, max_edge):
    """Corner turns, edge directions/lengths, and the ordered loop cells."""
    for _ in range(500):
        template = _turn_template(rng, corners)
        dirs = np.cumsum(template) % 4  # direction of edge leaving corner i
        dirs = (dirs - template[0]) % 4  # first edge heads east
        if len(set(dirs.tolist())) < 4:
            continue
        lengths = rng.integers(min_edge, max_edge + 1, size=corners)
        _balance(rng, lengths, dirs, 0, 2, min_edge)
        _balance(rng, lengths, dirs, 1, 3, min_edge)

        cells: list[tuple[int, int]] = []
        corner_pos: list[int] = []
        x, y = 0, 0
        ok = True
        for i in range(corners):
            corner_pos.append(len(cells))
            dx, dy = _DIRVEC[dirs[i]]
            for _ in range(int(lengths[i])):
                cells.append((x, y))
                x, y = x + dx, y + dy
        if (x, y) != (0, 0):
            continue
        cell_set = set(cells)
        if len(cell_set) != len(cells):
            continue
        for cx, cy in cells:
            nbrs = sum((cx + dx, cy + dy) in cell_set for dx, dy in _DIRVEC)
            if nbrs != 2:
                ok = False
                break
        if ok:
            # dirs[i] = dirs[i-1] + template[i], so template[i] is the turn
            # executed at corner i (corner 0 closes the loop consistently).
            return list(template), dirs, cells, corner_pos
    raise WorldGenError(f"no simple {corners}-corner loop found")


def _carve_stub(grid, start, direction, length):
    """Dead-end branch off a junction; stops before merging with open cells."""
    dx, dy = _DIRVEC[direction]
    carved = []
    px, py = start
    cx, cy = start[0] + dx, start[1] + dy
    for _ in range(length):
        if grid[cx, cy] == 0:
            break
        open_nbrs = sum(
            grid[cx + ddx, cy + ddy] == 0 and (cx + ddx, cy + ddy) != (px, py)
            for ddx, ddy in _DIRVEC
        )
        if open_nbrs:
            break
        grid[cx, cy] = 0
        carved.append((cx, cy))
        px, py = cx, cy
        cx, cy = cx + dx, cy + dy
    return carved


def _landmark_params(rng: np.random.Generator) -> TexParams:
    return TexParams(
        family=int(rng.integers(6)),
        base=float(rng.uniform(0.35, 0.65)),
        amp=float(rng.uniform(0.25, 0.35)),
        fu=int(rng.integers(2, 5)),
        fv=int(rng.integers(1, 4)),
        pu=float(rng.random()),
        pv=float(rng.random()),
    )


def generate_world(
    seed: int,
    world_id: str,
    role: str,
    corners: int = 8,
    min_edge: int = 5,
    max_edge: int = 9,
    stub_len: int = 2,
    directions: tuple[str, ...] = ("ccw", "cw"),
) -> World:
    """Build one world and its course(s) deterministically from (seed, world_id)."""
    rng = np.random.Generator(np.random.Philox(np.random.SeedSequence((seed, zlib.crc32(world_id.encode())))))
    turn_at, dirs, cells, corner_pos = _generate_layout(rng, corners, min_edge, max_edge)

    margin = 4
    xs = [c[0] for c in cells]
    ys = [c[1] for c in cells]
    ox, oy = margin - min(xs), margin - min(ys)
    nx = max(xs) + ox + margin + 1
    ny = max(ys) + oy + margin + 1
    cells = [(cx + ox, cy + oy) for cx, cy in cells]
    grid = np.ones((nx, ny), dtype=np.uint8)
    for cx, cy in cells:
        grid[cx, cy] = 0

    n = corners
    corner_cells = tuple(cells[p] for p in corner_pos)
    stub_cells: list[list[tuple[int, int]]] = []
    for j in range(n):
        in_dir = int(dirs[(j - 1) % n])
        out_dir = int(dirs[j])
        carved = _carve_stub(grid, corner_cells[j], in_dir, stub_len)
        carved += _carve_stub(grid, corner_cells[j], (out_dir + 2) % 4, stub_len)
        stub_cells.append(carved)

    tex = np.zeros((nx, ny), dtype=np.int16)
    texture_params: dict[int, TexParams] = {
        0: TexParams(family=0, base=0.42, amp=0.06, fu=2, fv=1, pu=float(rng.random()), pv=0.0)
    }
    for j in range(n):
        tid = j + 1
        texture_params[tid] = _landmark_params(
            np.random.Generator(np.random.Philox(np.random.SeedSequence((seed, zlib.crc32(world_id.encode()), 7777, tid))))
        )
        cx, cy = corner_cells[j]
        for ddx in range(-2, 3):
            for ddy in range(-2, 3):
                px, py = cx + ddx, cy + ddy
                if 0 <= px < nx and 0 <= py < ny and grid[px, py] == 1:
                    tex[px, py] = tid
        for sx, sy in stub_cells[j]:
            for ddx, ddy in _DIRVEC:
                px, py = sx + ddx, sy + ddy
                if grid[px, py] == 1:
                    tex[px, py] = tid

    courses = tuple(
        _build_course(world_id, role, direction, cells, corner_pos, turn_at)
        for direction in directions
    )
    return World(
        world_id=world_id,
        role=role,
        seed=seed,
        grid=grid,
        tex=tex,
        texture_params=texture_params,
        corner_cells=corner_cells,
        courses=courses,
    )


def _build_course(world_id, role, direction, cells, corner_pos, turn_at) -> CourseSpec:
    n = len(corner_pos)
    m = len(cells)
    if direction == "ccw":
        order = list(range(m))
        corner_order = list(range(n))
        actions = [Action.LEFT if turn_at[j] > 0 else Action.RIGHT for j in corner_order]
    elif direction == "cw":
        order = [0] + list(range(m - 1, 0, -1))
        corner_order = [0] + list(range(n - 1, 0, -1))
        actions = [Action.RIGHT if turn_at[j] > 0 else Action.LEFT for j in corner_order]
    else:
        raise ValueError(f"direction must be 'ccw' or 'cw', got {direction!r}")

    cell_seq = [cells[i] for i in order]
    pos_in_seq = {cell_seq[i]: i for i in range(m)}
    corner_seq_pos = [pos_in_seq[cells[corner_pos[j]]] for j in corner_order]

    # Waypoint 0 is the corner with the longest incoming straight, so lap
    # recording has room to spawn on its approach.
    incoming = [
        (corner_seq_pos[k] - corner_seq_pos[k - 1]) % m for k in range(n)
    ]
    anchor = int(np.argmax(incoming))

    rot_corners = corner_order[anchor:] + corner_order[:anchor]
    rot_actions = actions[anchor:] + actions[:anchor]
    shift = corner_seq_pos[anchor]
    cell_seq = cell_seq[shift:] + cell_seq[:shift]
    wp_arcs = np.array([(corner_seq_pos[(anchor + k) % n] - shift) % m for k in range(n)], dtype=np.float64)

    points = np.array(cell_seq, dtype=np.float64) + 0.5
    waypoints = tuple(
        Waypoint(index=k, cell=cells[corner_pos[rot_corners[k]]], action=rot_actions[k])
        for k in range(n)
    )
    return CourseSpec(
        course_id=f"{world_id}_{direction}",
        role=role,
        direction=direction,
        waypoints=waypoints,
        route=RoutePolyline(points),
        wp_arcs=wp_arcs,
    )


def generate_world_set(
    seed: int,
    n_train: int = 6,
    n_val: int = 3,
    n_test: int = 3,
    corners: int = 8,
    long_corners: int = 20,
    min_edge: int = 5,
    max_edge: int = 9,
) -> list[World]:
    """Disjoint worlds per role; each contributes a cw and a ccw course, and
    one extra long-loop world contributes a single course."""
    worlds = []
    for role, count in (("train", n_train), ("val", n_val), ("test", n_test)):
        for i in range(count):
            worlds.append(generate_world(seed, f"{role}{i}", role, corners, min_edge, max_edge))
    if long_corners:
        worlds.append(
            generate_world(seed, "long0", "long", long_corners, min_edge, max_edge, directions=("ccw",))
        )
    return worlds


# ---------------------------------------------------------------------------
# Rendering


def _square(t: np.ndarray, freq: float, phase: float) -> np.ndarray:
    return np.floor(t * freq + phase) % 2.0


def _texture_values(p: TexParams, u: np.ndarray, v: np.ndarray) -> np.ndarray:
    if p.family == 0:
        k = _square(u, p.fu, p.pu)
    elif p.family == 1:
        k = _square(v, p.fv, p.pv)
    elif p.family == 2:
        k = np.abs(_square(u, p.fu, p.pu) - _square(v, p.fv, p.pv))
    elif p.family == 3:
        k = _square(u + v, p.fu, p.pu)
    elif p.family == 4:
        du = (u * p.fu + p.pu) % 1.0 - 0.5
        dv = (v * p.fv + p.pv) % 1.0 - 0.5
        k = (du * du + dv * dv < 0.09).astype(np.float64)
    else:
        rad = np.hypot(u - 0.5, v - 0.5)
        k = _square(rad, 2.0 * p.fu, p.pu)
    return np.clip(p.base + p.amp * (2.0 * k - 1.0), 0.03, 0.97)


_COL_XS = (np.arange(RASTER_SIZE) + 0.5) / RASTER_SIZE * 2.0 - 1.0
_COL_OFFSETS = np.arctan(_COL_XS * math.tan(FOV / 2))
_ROWS = (np.arange(RASTER_SIZE) + 0.5)[:, None]


def _cast(world: World, ox: float, oy: float, angles: np.ndarray):
    k = len(angles)
    dx, dy = np.cos(angles), np.sin(angles)
    ix = np.full(k, int(math.floor(ox)), dtype=np.int64)
    iy = np.full(k, int(math.floor(oy)), dtype=np.int64)
    sx = np.where(dx >= 0, 1, -1).astype(np.int64)
    sy = np.where(dy >= 0, 1, -1).astype(np.int64)
    with np.errstate(divide="ignore", invalid="ignore"):
        tdx = np.abs(1.0 / dx)
        tdy = np.abs(1.0 / dy)
        tmx = np.where(dx >= 0, ix + 1 - ox, ox - ix) * tdx
        tmy = np.where(dy >= 0, iy + 1 - oy, oy - iy) * tdy
    tmx = np.nan_to_num(tmx, nan=np.inf, posinf=np.inf)
    tmy = np.nan_to_num(tmy, nan=np.inf, posinf=np.inf)

    dist = np.zeros(k)
    side = np.zeros(k, dtype=np.int8)
    active = np.ones(k, dtype=bool)
    grid = world.grid
    nx, ny = grid.shape
    for _ in range(4 * max(nx, ny)):
        if not active.any():
            break
        step_x = active & (tmx <= tmy)
        step_y = active & ~step_x
        ix[step_x] += sx[step_x]
        dist[step_x] = tmx[step_x]
        tmx[step_x] += tdx[step_x]
        side[step_x] = 0
        iy[step_y] += sy[step_y]
        dist[step_y] = tmy[step_y]
        tmy[step_y] += tdy[step_y]
        side[step_y] = 1
        np.clip(ix, 0, nx - 1, out=ix)
        np.clip(iy, 0, ny - 1, out=iy)
        active &= grid[ix, iy] == 0

    hx = ox + dist * dx
    hy = oy + dist * dy
    u = np.where(side == 0, hy - np.floor(hy), hx - np.floor(hx))
    tex = world.tex[ix, iy]
    return dist, u, tex, side


def render_observation(
    world: World,
    pose: Pose,
    noise_sigma: float = 0.0,
    rng: np.random.Generator | None = None,
) -> tuple[np.ndarray, np.ndarray]:
    """Render the two camera rasters at a pose, values in [0, 1].

    Column 0 is the leftmost ray of each camera.  With zero noise, the right
    camera of a pose yawed +60 degrees sees exactly what the left camera sees
    at the original pose, which pins down the camera geometry in tests.
    """
    images = []
    for cam in CAMERA_YAW:
        angles = pose.heading + (cam - _COL_OFFSETS)
        dist, u, tex, side = _cast(world, pose.x, pose.y, angles)
        perp = np.maximum(dist * np.cos(_COL_OFFSETS), 1e-6)
        lh = FOCAL / perp
        top = RASTER_SIZE / 2 - lh / 2
        v = (_ROWS - top) / lh  # (rows, cols)
        wall = (v >= 0.0) & (v < 1.0)

        texval = np.empty((RASTER_SIZE, RASTER_SIZE))
        for tid in np.unique(tex):
            cols = tex == tid
            params = world.texture_params.get(int(tid), world.texture_params[0])
            texval[:, cols] = _texture_values(params, u[cols][None, :], v[:, cols])

        shade = 1.0 / (1.0 + 0.12 * dist + 0.02 * dist * dist)
        shade = shade * np.where(side == 1, Y_FACE_SHADE, 1.0)
        img = np.where(wall, texval * shade, np.where(v < 0.0, CEIL_SHADE, FLOOR_SHADE))
        images.append(img)

    if noise_sigma > 0.0:
        if rng is None:
            raise ValueError("render noise requires an rng")
        images = [img + rng.normal(0.0, noise_sigma, img.shape) for img in images]
    left, right = (np.clip(img, 0.0, 1.0) for img in images)
    return left, right


# ---------------------------------------------------------------------------
# Vehicle


def _blocked(world: World, x: float, y: float) -> bool:
    ix, iy = int(math.floor(x)), int(math.floor(y))
    if not (0 <= ix < world.grid.shape[0] and 0 <= iy < world.grid.shape[1]):
        return True
    return world.grid[ix, iy] != 0


def collides(world: World, x: float, y: float) -> bool:
    """Vehicle body test: centre plus four rim points."""
    if _blocked(world, x, y):
        return True
    for a in (0.0, math.pi / 2, math.pi, 3 * math.pi / 2):
        if _blocked(world, x + VEHICLE_RADIUS * math.cos(a), y + VEHICLE_RADIUS * math.sin(a)):
            return True
    return False


def step_vehicle(world: World, pose: Pose, steering: float) -> tuple[Pose, bool]:
    """One kinematic bicycle step.  On collision the pose is left unchanged."""
    sigma = min(max(float(steering), 0.0), 1.0)
    delta = (2.0 * sigma - 1.0) * MAX_STEER
    nx = pose.x + SPEED * DT * math.cos(pose.heading)
    ny = pose.y + SPEED * DT * math.sin(pose.heading)
    nh = wrap_angle(pose.heading + SPEED * DT / WHEELBASE * math.tan(delta))
    if collides(world, nx, ny):
        return pose, True
    return Pose(nx, ny, nh), False


# ---------------------------------------------------------------------------
# Expert driver


def pursuit_steering(
    route: RoutePolyline, pose: Pose, s_hint: float | None = None, lookahead: float = LOOKAHEAD
) -> tuple[float, float]:
    """Pure-pursuit steering toward a point `lookahead` ahead on the route.

    Returns (steering command, arc position of the pose's projection).
    """
    s = route.project(pose.x, pose.y, s_hint)
    target, _ = route.point_at(s + lookahead)
    tx, ty = target[0] - pose.x, target[1] - pose.y
    d = math.hypot(tx, ty)
    alpha = wrap_angle(math.atan2(ty, tx) - pose.heading)
    if d < 1e-9:
        return 0.5, s
    if abs(alpha) > math.pi / 2:
        delta = math.copysign(MAX_STEER, alpha)
    else:
        kappa = 2.0 * math.sin(alpha) / max(d, 0.3)
        delta = max(-MAX_STEER, min(MAX_STEER, math.atan(kappa * WHEELBASE)))
    sigma = min(max(0.5 + 0.5 * delta / MAX_STEER, 0.0), 1.0)
    return sigma, s


def expert_steering(course: CourseSpec, pose: Pose, s_hint: float | None = None) -> tuple[float, float]:
    return pursuit_steering(course.route, pose, s_hint)


def _jittered_pose(
    path: RoutePolyline,
    s_nominal: float,
    rng: np.random.Generator,
    arc: float = 0.3,
    lateral: float = 0.05,
    heading_deg: float = 3.0,
) -> tuple[Pose, float]:
    """Pose near arc s_nominal with small arc, lateral, and heading jitter."""
    s0 = path._wrap(s_nominal + rng.uniform(-arc, arc))
    pt, tangent = path.point_at(s0)
    offset = rng.uniform(-lateral, lateral)
    nx_, ny_ = -math.sin(tangent), math.cos(tangent)
    heading = wrap_angle(tangent + math.radians(rng.uniform(-heading_deg, heading_deg)))
    return Pose(pt[0] + offset * nx_, pt[1] + offset * ny_, heading), s0


def spawn_pose(course: CourseSpec, rng: np.random.Generator, approach: float = APPROACH_ARC) -> tuple[Pose, float]:
    """Jittered start on the approach to waypoint 0; returns pose and arc position."""
    return _jittered_pose(course.route, -approach % course.route.length, rng)


def record_lap(
    world: World,
    course: CourseSpec,
    lap_id: str,
    seed: int,
    noise_sigma: float = 0.02,
) -> Lap:
    """Drive the expert once around the loop, recording observation/steering pairs."""
    rng = np.random.Generator(
        np.random.Philox(
            np.random.SeedSequence(
                (seed, zlib.crc32(course.course_id.encode()), zlib.crc32(lap_id.encode()))
            )
        )
    )
    route = course.route
    pose, s_prev = spawn_pose(course, rng)
    frames: list[FrameRecord] = []
    progress = 0.0
    max_frames = int(3 * route.length / (SPEED * DT))
    while progress < route.length:
        if len(frames) >= max_frames:
            raise RecordingError(f"{course.course_id}/{lap_id}: lap did not close")
        left, right = render_observation(world, pose, noise_sigma, rng)
        sigma, s_now = expert_steering(course, pose, s_prev)
        progress += route.arc_delta(s_prev, s_now)
        s_prev = s_now
        frames.append(
            FrameRecord(
                len(frames),
                left.astype(np.float32),
                right.astype(np.float32),
                float(sigma),
            )
        )
        pose, hit = step_vehicle(world, pose, sigma)
        if hit:
            raise RecordingError(f"{course.course_id}/{lap_id}: collision at frame {len(frames) - 1}")
    return Lap(course.course_id, lap_id, frames)


def branch_path(
    world: World,
    course: CourseSpec,
    waypoint_index: int,
    branch: Action,
    approach: float = APPROACH_ARC,
    tail: int = 2,
) -> RoutePolyline | None:
    """Open path through one junction: along the route to the corner, then out
    along the chosen exit.  Straight and opposite-turn exits lead into the
    junction's dead-end stubs; returns None when that stub was truncated away
    during carving.
    """
    route = course.route
    a_k = float(course.wp_arcs[waypoint_index])
    corner = course.waypoints[waypoint_index].cell
    _, t_in = route.point_at((a_k - 0.5) % route.length)
    din = (round(math.cos(t_in)), round(math.sin(t_in)))
    if branch is Action.STRAIGHT:
        d = din
    elif branch is Action.LEFT:
        d = (-din[1], din[0])
    else:
        d = (din[1], -din[0])
    cells = []
    cx, cy = corner
    for _ in range(tail):
        cx, cy = cx + d[0], cy + d[1]
        if world.grid[cx, cy] != 0:
            break
        cells.append((cx, cy))
    if len(cells) < tail:
        # truncated stubs leave too little room past the corner to be useful
        return None
    # route vertices sit at integer arcs, so starting half a cell off the
    # nominal spawn keeps every polyline segment non-degenerate
    span = approach + 1.0
    lo = (a_k - span) % route.length
    pts = [route.point_at(lo)[0]]
    verts = []
    for s_v, p in zip(route.start_arc, route.points):
        off = (s_v - lo) % route.length
        if 1e-9 < off < span - 1e-9:
            verts.append((off, p))
    pts += [p for _, p in sorted(verts, key=lambda v: v[0])]
    pts.append(np.array([corner[0] + 0.5, corner[1] + 0.5]))
    pts += [np.array([c[0] + 0.5, c[1] + 0.5]) for c in cells]
    return RoutePolyline(np.asarray(pts), closed=False)


def record_branch(
    world: World,
    course: CourseSpec,
    waypoint_index: int,
    branch: Action,
    lap_id: str,
    seed: int,
    noise_sigma: float = 0.02,
    tail: int = 2,
) -> Lap | None:
    """Drive the expert through one junction exit; None if the exit is absent.

    The drive starts a jittered approach before the corner and stops a little
    short of the path's end, so stub drives pull up before the dead end.  The
    start jitter is much wider than a route spawn's: repeated drives fan out
    over off-centre, misaligned approach states, and the expert's path back
    onto the lane is exactly the recovery behaviour a closed-loop follower
    needs to have seen.
    """
    path = branch_path(world, course, waypoint_index, branch, tail=tail)
    if path is None:
        return None
    rng = np.random.Generator(
        np.random.Philox(
            np.random.SeedSequence(
                (seed, zlib.crc32(course.course_id.encode()), zlib.crc32(lap_id.encode()))
            )
        )
    )
    pose, s_prev = _jittered_pose(path, 1.0, rng, arc=0.5, lateral=0.15, heading_deg=9.0)
    frames: list[FrameRecord] = []
    max_frames = int(3 * path.length / (SPEED * DT))
    while True:
        if len(frames) >= max_frames:
            raise RecordingError(f"{course.course_id}/{lap_id}: branch drive did not finish")
        left, right = render_observation(world, pose, noise_sigma, rng)
        sigma, s_now = pursuit_steering(path, pose, s_prev)
        s_prev = s_now
        frames.append(
            FrameRecord(
                len(frames),
                left.astype(np.float32),
                right.astype(np.float32),
                float(sigma),
            )
        )
        if s_now >= path.length - 0.15:
            break
        pose, hit = step_vehicle(world, pose, sigma)
        if hit:
            raise RecordingError(f"{course.course_id}/{lap_id}: collision at frame {len(frames) - 1}")
    return Lap(course.course_id, lap_id, frames)


# ---------------------------------------------------------------------------
# Segmentation


def steering_runs(
    steering: np.ndarray, threshold: float = STEER_DEV_THRESHOLD, min_run: int = STEER_MIN_RUN
) -> list[tuple[int, int]]:
    """Sustained steering deviations as (start, end) spans, end exclusive."""
    mask = np.abs(np.asarray(steering) - 0.5) > threshold
    runs = []
    i = 0
    n = len(mask)
    while i < n:
        if mask[i]:
            j = i
            while j < n and mask[j]:
                j += 1
            if j - i >= min_run:
                runs.append((i, j))
            i = j
        else:
            i += 1
    return runs


def steering_onsets(steering: np.ndarray, threshold: float = STEER_DEV_THRESHOLD, min_run: int = STEER_MIN_RUN) -> list[int]:
    """Frame indices where a sustained steering deviation begins."""
    return [start for start, _ in steering_runs(steering, threshold, min_run)]


def segment_lap(lap: Lap, course: CourseSpec, positive_len: int = POSITIVE_LEN) -> tuple[np.ndarray, np.ndarray]:
    """Label every frame with a waypoint and approach/corridor status.

    The k-th sustained steering deviation is the turn at waypoint k; the
    positive_len frames before it form waypoint k's approach segment.  All
    remaining frames, including the turns themselves and the tail of the lap,
    belong to the next waypoint ahead as corridor (negative) frames.
    """
    onsets = steering_onsets(lap.steering())
    n_wp = course.n_waypoints
    if len(onsets) != n_wp:
        raise SegmentationError(
            f"{lap.course_id}/{lap.lap_id}: found {len(onsets)} steering onsets, expected {n_wp}"
        )
    n = lap.n_frames
    is_pos = np.zeros(n, dtype=bool)
    wp = np.zeros(n, dtype=np.int64)
    prev_end = 0
    for k, onset in enumerate(onsets):
        p_start = onset - positive_len
        if p_start < prev_end:
            raise SegmentationError(
                f"{lap.course_id}/{lap.lap_id}: approach to waypoint {k} overlaps the previous turn"
            )
        wp[prev_end:p_start] = k
        wp[p_start:onset] = k
        is_pos[p_start:onset] = True
        prev_end = onset
    wp[prev_end:] = 0  # tail of the lap is the approach corridor to waypoint 0
    return is_pos, wp
