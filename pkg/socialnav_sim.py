"""
Procedural 2D social-navigation simulator.

Occupancy-grid floor plans, robots with discrete actions, social-force
pedestrians, a 64-ray planar depth scan, the task reward terms and the
navigation metric suite (SR, SPL, PSC, H-Coll, T-SR, T-SPL).
"""

import json
import math
from collections import OrderedDict
from dataclasses import dataclass, field
from enum import IntEnum
from functools import cached_property
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np
import pandas as pd
from pydantic import BaseModel
from scipy import ndimage
from scipy.sparse import coo_matrix
from scipy.sparse.csgraph import dijkstra

from config import SceneConfig

RESOLUTION = 0.1  # meters per cell
ROBOT_RADIUS = 0.2
HUMAN_RADIUS = 0.3
FORWARD_STEP = 0.25
TURN_ANGLE = math.radians(30.0)
DT = 0.25
SUCCESS_RADIUS = 0.3
SUCCESS_REWARD = 2.5
STATIC_PENALTY = 0.05
HUMAN_PENALTY = 0.3
CONTACT_DISTANCE = ROBOT_RADIUS + HUMAN_RADIUS

N_RAYS = 64
FOV = math.radians(90.0)
MAX_RANGE = 5.0

SF_A = 2.0  # m/s^2
SF_B = 0.3  # m
SF_TAU = 0.5  # s
SPEED_CAP = 1.2
WAYPOINT_RADIUS = 0.3
WALL_CUTOFF = 1.5

PSC_RADIUS = 1.0
SPAWN_SEPARATION = 1.0
SCENE_ATTEMPTS = 100
SPAWN_ATTEMPTS = 200
FIELD_CACHE_SIZE = 64


class Action(IntEnum):
    FORWARD = 0
    TURN_LEFT = 1
    TURN_RIGHT = 2
    STOP = 3


N_ACTIONS = len(Action)


class SceneGenerationError(ValueError):
    pass


class EpisodeSamplingError(ValueError):
    pass


class InvalidActionError(ValueError):
    pass


class OccupiedPointError(ValueError):
    pass


class PathCorruptionError(ValueError):
    pass


def wrap_angle(angle: float) -> float:
    """Wrap into [-pi, pi)"""
    return (angle + math.pi) % (2.0 * math.pi) - math.pi


def to_robot_frame(points: np.ndarray, position: np.ndarray, heading: float) -> np.ndarray:
    """World points (..., 2) expressed in the frame of a robot at (position, heading)"""
    c, s = math.cos(heading), math.sin(heading)
    rel = np.asarray(points, dtype=np.float64) - position
    return np.stack([c * rel[..., 0] + s * rel[..., 1], -s * rel[..., 0] + c * rel[..., 1]], axis=-1)


def _disk(radius_cells: int) -> np.ndarray:
    r = np.arange(-radius_cells, radius_cells + 1)
    return (r[:, None] ** 2 + r[None, :] ** 2) <= radius_cells ** 2


# ---------------------------------------------------------------------------
# scenes
# ---------------------------------------------------------------------------

@dataclass(eq=False)
class Scene:
    """Static occupancy grid, grid[iy, ix] is True for walls"""
    grid: np.ndarray
    resolution: float = RESOLUTION
    seed: int = 0
    family: str = 'standard'
    _fields: 'OrderedDict' = field(default_factory=OrderedDict, repr=False)
    _inflated: Dict = field(default_factory=dict, repr=False)
    _graphs: Dict = field(default_factory=dict, repr=False)
    _snap: Dict = field(default_factory=dict, repr=False)

    @property
    def width(self) -> float:
        return self.grid.shape[1] * self.resolution

    @property
    def height(self) -> float:
        return self.grid.shape[0] * self.resolution

    def cell(self, point) -> Tuple[int, int]:
        return int(math.floor(point[0] / self.resolution)), int(math.floor(point[1] / self.resolution))

    def in_bounds(self, ix: int, iy: int) -> bool:
        return 0 <= ix < self.grid.shape[1] and 0 <= iy < self.grid.shape[0]

    def is_occupied(self, point) -> bool:
        ix, iy = self.cell(point)
        return not self.in_bounds(ix, iy) or bool(self.grid[iy, ix])

    def cell_center(self, ix: int, iy: int) -> np.ndarray:
        return np.array([(ix + 0.5) * self.resolution, (iy + 0.5) * self.resolution])

    def inflated(self, radius: float) -> np.ndarray:
        """Walls grown so that a disc of `radius` centred in any remaining free cell clears them"""
        cells = int(math.ceil(radius / self.resolution + 0.5 - 1e-9))
        if cells not in self._inflated:
            if cells == 0:
                self._inflated[cells] = self.grid.copy()
            else:
                self._inflated[cells] = ndimage.binary_dilation(self.grid, structure=_disk(cells))
        return self._inflated[cells]

    def _graph(self, radius: float):
        key = round(radius, 6)
        if key in self._graphs:
            return self._graphs[key]
        free = ~self.inflated(radius)
        ny, nx = free.shape
        ids = np.arange(nx * ny).reshape(ny, nx)
        rows, cols, weights = [], [], []
        # right, up, and both diagonals; diagonals need both side cells free
        for dy, dx, cost in ((0, 1, 1.0), (1, 0, 1.0), (1, 1, math.sqrt(2.0)), (1, -1, math.sqrt(2.0))):
            ys = slice(0, ny - dy)
            xs = slice(max(0, -dx), nx - max(0, dx))
            ys2 = slice(dy, ny)
            xs2 = slice(max(0, dx), nx - max(0, -dx) if dx < 0 else nx)
            ok = free[ys, xs] & free[ys2, xs2]
            if dx != 0 and dy != 0:
                ok &= free[ys2, xs] & free[ys, xs2]
            rows.append(ids[ys, xs][ok])
            cols.append(ids[ys2, xs2][ok])
            weights.append(np.full(int(ok.sum()), cost * self.resolution))
        graph = coo_matrix((np.concatenate(weights), (np.concatenate(rows), np.concatenate(cols))),
                           shape=(nx * ny, nx * ny)).tocsr()
        self._graphs[key] = graph
        return graph

    def snap(self, point, radius: float) -> Tuple[int, int]:
        """Cell of a point, moved to the nearest cell free of the inflated walls"""
        ix, iy = self.cell(point)
        ix = min(max(ix, 0), self.grid.shape[1] - 1)
        iy = min(max(iy, 0), self.grid.shape[0] - 1)
        inflated = self.inflated(radius)
        if not inflated[iy, ix]:
            return ix, iy
        key = round(radius, 6)
        if key not in self._snap:
            _, indices = ndimage.distance_transform_edt(inflated, return_indices=True)
            self._snap[key] = indices
        indices = self._snap[key]
        return int(indices[1, iy, ix]), int(indices[0, iy, ix])

    def distance_field(self, target: Tuple[int, int], radius: float) -> np.ndarray:
        """Geodesic distance (m) from every cell to target; inf where unreachable"""
        key = (target, round(radius, 6))
        if key in self._fields:
            self._fields.move_to_end(key)
            return self._fields[key]
        ix, iy = target
        nx = self.grid.shape[1]
        dist = dijkstra(self._graph(radius), directed=False, indices=iy * nx + ix)
        result = dist.reshape(self.grid.shape)
        self._fields[key] = result
        if len(self._fields) > FIELD_CACHE_SIZE:
            self._fields.popitem(last=False)
        return result

    def free_cells(self, radius: float) -> np.ndarray:
        """(n, 2) array of (ix, iy) cells free of walls inflated by radius"""
        iy, ix = np.nonzero(~self.inflated(radius))
        return np.stack([ix, iy], axis=1)

    @cached_property
    def wall_cells(self) -> np.ndarray:
        iy, ix = np.nonzero(self.grid)
        return np.stack([ix, iy], axis=1)


def _split_rooms(rng: np.random.Generator, nx: int, ny: int, n_rooms: int, door_cells: int) -> np.ndarray:
    grid = np.zeros((ny, nx), dtype=bool)
    grid[0, :] = grid[-1, :] = True
    grid[:, 0] = grid[:, -1] = True
    min_side = 20  # 2 m rooms at least on each side of a split
    rooms = [(1, 1, nx - 1, ny - 1)]  # x0, y0, x1, y1 (exclusive)
    for _ in range(n_rooms - 1):
        rooms.sort(key=lambda r: (r[2] - r[0]) * (r[3] - r[1]), reverse=True)
        x0, y0, x1, y1 = rooms[0]
        w, h = x1 - x0, y1 - y0
        vertical = w >= h
        span = w if vertical else h
        if span < 2 * min_side + 1:
            break
        rooms.pop(0)
        offset = int(rng.integers(int(span * 0.3), int(span * 0.7) + 1))
        offset = min(max(offset, min_side), span - min_side - 1)
        length = h if vertical else w
        door = min(door_cells + int(rng.integers(0, 5)), length - 2)
        door_start = int(rng.integers(1, max(2, length - door)))
        if vertical:
            wx = x0 + offset
            grid[y0:y1, wx] = True
            grid[y0 + door_start:y0 + door_start + door, wx] = False
            rooms += [(x0, y0, wx, y1), (wx + 1, y0, x1, y1)]
        else:
            wy = y0 + offset
            grid[wy, x0:x1] = True
            grid[wy, x0 + door_start:x0 + door_start + door] = False
            rooms += [(x0, y0, x1, wy), (x0, wy + 1, x1, y1)]
    return grid


def _add_pillars(rng: np.random.Generator, grid: np.ndarray, n_pillars: int):
    ny, nx = grid.shape
    clearance = ndimage.binary_dilation(grid, structure=_disk(10))
    for _ in range(n_pillars):
        size = int(rng.integers(4, 9))
        for _attempt in range(20):
            px = int(rng.integers(1, nx - size - 1))
            py = int(rng.integers(1, ny - size - 1))
            if not clearance[py:py + size, px:px + size].any():
                grid[py:py + size, px:px + size] = True
                clearance = ndimage.binary_dilation(grid, structure=_disk(10))
                break


def _component_count(free: np.ndarray) -> int:
    _, count = ndimage.label(free, structure=np.ones((3, 3), dtype=bool))
    return count


def generate_scene(seed: int, config: Optional[SceneConfig] = None) -> Scene:
    """Deterministic connected floor plan for a seed"""
    config = config or SceneConfig()
    nx = int(round(config.width / RESOLUTION))
    ny = int(round(config.height / RESOLUTION))
    door_cells = int(math.ceil(config.corridor_width / RESOLUTION - 1e-9))
    for attempt in range(SCENE_ATTEMPTS):
        rng = np.random.default_rng([seed, attempt])
        n_rooms = int(rng.integers(config.min_rooms, config.max_rooms + 1))
        grid = _split_rooms(rng, nx, ny, n_rooms, door_cells)
        _add_pillars(rng, grid, config.n_pillars)
        scene = Scene(grid=grid, seed=seed, family=config.family)
        if _component_count(~grid) == 1 and _component_count(~scene.inflated(HUMAN_RADIUS)) == 1:
            return scene
    raise SceneGenerationError(f'no connected layout for scene seed {seed} after {SCENE_ATTEMPTS} attempts')


_scene_cache: 'OrderedDict[Tuple[int, str], Scene]' = OrderedDict()


def cached_scene(seed: int, config: SceneConfig) -> Scene:
    """generate_scene with a small LRU so distance fields are reused across episodes"""
    key = (seed, config.model_dump_json())
    if key in _scene_cache:
        _scene_cache.move_to_end(key)
        return _scene_cache[key]
    scene = generate_scene(seed, config)
    _scene_cache[key] = scene
    if len(_scene_cache) > 64:
        _scene_cache.popitem(last=False)
    return scene


def geodesic_distance(scene: Scene, p, q, radius: float = ROBOT_RADIUS) -> float:
    """8-connected Dijkstra distance on the radius-inflated grid; inf if unreachable.

    Both endpoints are joined to their (snapped) cell centres by straight
    segments, so the result is symmetric and zero only for p == q.
    """
    p = np.asarray(p, dtype=np.float64)
    q = np.asarray(q, dtype=np.float64)
    for point in (p, q):
        if scene.is_occupied(point):
            raise OccupiedPointError(f'point {tuple(point.tolist())} lies in an occupied cell')
    source = scene.snap(p, radius)
    target = scene.snap(q, radius)
    if source == target:
        return float(np.hypot(*(p - q)))
    between = float(scene.distance_field(target, radius)[source[1], source[0]])
    return (float(np.hypot(*(p - scene.cell_center(*source)))) + between
            + float(np.hypot(*(q - scene.cell_center(*target)))))


# ---------------------------------------------------------------------------
# geometry
# ---------------------------------------------------------------------------

def _closest_wall_point(scene: Scene, center: np.ndarray, reach: float):
    """Nearest point on any wall cell within reach, or None"""
    res = scene.resolution
    ix0 = int(math.floor((center[0] - reach) / res))
    ix1 = int(math.floor((center[0] + reach) / res))
    iy0 = int(math.floor((center[1] - reach) / res))
    iy1 = int(math.floor((center[1] + reach) / res))
    ny, nx = scene.grid.shape
    xs = np.arange(ix0, ix1 + 1)
    ys = np.arange(iy0, iy1 + 1)
    gx, gy = np.meshgrid(xs, ys)
    outside = (gx < 0) | (gx >= nx) | (gy < 0) | (gy >= ny)
    occupied = outside.copy()
    inside = ~outside
    occupied[inside] = scene.grid[gy[inside], gx[inside]]
    if not occupied.any():
        return None
    cx = np.clip(center[0], gx[occupied] * res, (gx[occupied] + 1) * res)
    cy = np.clip(center[1], gy[occupied] * res, (gy[occupied] + 1) * res)
    d = np.hypot(cx - center[0], cy - center[1])
    k = int(np.argmin(d))
    if d[k] > reach:
        return None
    return np.array([cx[k], cy[k]]), float(d[k])


def disc_hits_wall(scene: Scene, center: np.ndarray, radius: float) -> bool:
    hit = _closest_wall_point(scene, center, radius)
    return hit is not None and hit[1] < radius


def _segment_distance(a: np.ndarray, b: np.ndarray, points: np.ndarray) -> np.ndarray:
    ab = b - a
    denom = float(ab @ ab)
    if denom == 0.0:
        return np.hypot(*(points - a).T)
    t = np.clip((points - a) @ ab / denom, 0.0, 1.0)
    closest = a + t[:, None] * ab
    return np.hypot(*(points - closest).T)


def _line_of_sight(scene: Scene, a: np.ndarray, b: np.ndarray, radius: float) -> bool:
    inflated = scene.inflated(radius)
    length = float(np.hypot(*(b - a)))
    n = max(2, int(math.ceil(length / 0.05)) + 1)
    pts = a + np.linspace(0.0, 1.0, n)[:, None] * (b - a)
    ix = np.floor(pts[:, 0] / scene.resolution).astype(int)
    iy = np.floor(pts[:, 1] / scene.resolution).astype(int)
    ny, nx = inflated.shape
    if (ix < 0).any() or (iy < 0).any() or (ix >= nx).any() or (iy >= ny).any():
        return False
    return not inflated[iy, ix].any()


def _dda_walls(scene: Scene, x: float, y: float, dx: np.ndarray, dy: np.ndarray, max_range: float) -> np.ndarray:
    """Distance along each ray to the first wall cell (inf beyond max_range); leaving the grid counts as a wall"""
    res = scene.resolution
    ny, nx = scene.grid.shape
    n = len(dx)
    cx = np.full(n, int(math.floor(x / res)))
    cy = np.full(n, int(math.floor(y / res)))
    step_x = np.sign(dx).astype(int)
    step_y = np.sign(dy).astype(int)
    with np.errstate(divide='ignore', invalid='ignore'):
        delta_x = np.where(dx != 0, res / np.abs(dx), np.inf)
        delta_y = np.where(dy != 0, res / np.abs(dy), np.inf)
        next_x = np.where(dx > 0, (cx + 1) * res, cx * res)
        next_y = np.where(dy > 0, (cy + 1) * res, cy * res)
        t_max_x = np.where(dx != 0, (next_x - x) / dx, np.inf)
        t_max_y = np.where(dy != 0, (next_y - y) / dy, np.inf)
    dist = np.full(n, np.inf)
    active = np.ones(n, dtype=bool)
    for _ in range(2 * int(math.ceil(max_range / res)) + 4):
        along_x = t_max_x < t_max_y
        t = np.where(along_x, t_max_x, t_max_y)
        cx = np.where(active & along_x, cx + step_x, cx)
        cy = np.where(active & ~along_x, cy + step_y, cy)
        t_max_x = np.where(active & along_x, t_max_x + delta_x, t_max_x)
        t_max_y = np.where(active & ~along_x, t_max_y + delta_y, t_max_y)
        active &= t <= max_range
        outside = (cx < 0) | (cx >= nx) | (cy < 0) | (cy >= ny)
        wall = np.zeros(n, dtype=bool)
        inside = ~outside
        wall[inside] = scene.grid[cy[inside], cx[inside]]
        hit = active & (outside | wall)
        dist[hit] = t[hit]
        active &= ~hit
        if not active.any():
            break
    return dist


def raycast_depth(scene: Scene, pose, disc_centers: Optional[np.ndarray] = None,
                  disc_radii: Optional[np.ndarray] = None, n_rays: int = N_RAYS,
                  fov: float = FOV, max_range: float = MAX_RANGE) -> np.ndarray:
    """Normalized depth per ray: nearest wall or agent disc, clamped to max_range, / max_range"""
    x, y, heading = float(pose[0]), float(pose[1]), float(pose[2])
    bearings = -fov / 2.0 + np.arange(n_rays) * fov / (n_rays - 1)
    angles = heading + bearings
    dx, dy = np.cos(angles), np.sin(angles)
    dist = _dda_walls(scene, x, y, dx, dy, max_range)
    if disc_centers is not None and len(disc_centers):
        centers = np.asarray(disc_centers, dtype=np.float64).reshape(-1, 2)
        radii = np.asarray(disc_radii, dtype=np.float64).reshape(-1)
        fx = x - centers[:, 0]
        fy = y - centers[:, 1]
        b = dx[:, None] * fx[None, :] + dy[:, None] * fy[None, :]
        c = (fx * fx + fy * fy - radii * radii)[None, :]
        disc = b * b - c
        with np.errstate(invalid='ignore'):
            t = -b - np.sqrt(disc)
        t = np.where(c < 0, 0.0, t)  # origin inside a disc
        t = np.where((disc >= 0) & (t >= 0), t, np.inf)
        dist = np.minimum(dist, t.min(axis=1))
    return np.minimum(dist, max_range) / max_range


# ---------------------------------------------------------------------------
# agents
# ---------------------------------------------------------------------------

@dataclass
class RobotState:
    position: np.ndarray
    heading: float
    goal: np.ndarray
    radius: float = ROBOT_RADIUS
    done: bool = False
    success: bool = False
    path_length: float = 0.0
    geodesic: float = 0.0
    shortest: float = 0.0
    prev_action: int = -1
    human_collided: bool = False
    min_human_dists: List[float] = field(default_factory=list)

    @property
    def pose(self) -> np.ndarray:
        return np.array([self.position[0], self.position[1], self.heading])


@dataclass
class HumanState:
    position: np.ndarray
    velocity: np.ndarray
    waypoints: List[np.ndarray]
    current_waypoint: int = 0
    radius: float = HUMAN_RADIUS
    preferred_speed: float = 0.75

    def copy(self) -> 'HumanState':
        return HumanState(self.position.copy(), self.velocity.copy(), self.waypoints,
                          self.current_waypoint, self.radius, self.preferred_speed)


@dataclass
class Observation:
    depth: np.ndarray
    goal_polar: Tuple[float, float]
    pose: np.ndarray
    prev_action: int


@dataclass
class RewardTerms:
    r_goal: float = 0.0
    r_succ: float = 0.0
    r_coll: float = 0.0
    r_traj: float = 0.0
    total: float = 0.0

    def __post_init__(self):
        self.total = self.r_goal + self.r_succ - self.r_coll - self.r_traj

    @property
    def task(self) -> float:
        """Everything but the predictive social cost"""
        return self.r_goal + self.r_succ - self.r_coll

    def with_traj(self, r_traj: float) -> 'RewardTerms':
        return RewardTerms(self.r_goal, self.r_succ, self.r_coll, r_traj)

    def as_dict(self) -> Dict[str, float]:
        return {'r_goal': self.r_goal, 'r_succ': self.r_succ, 'r_coll': self.r_coll,
                'r_traj': self.r_traj, 'total': self.total}


@dataclass
class StepInfo:
    human_collision: bool = False
    static_collision: bool = False
    min_human_dist: float = math.inf
    geodesic_to_goal: float = 0.0


@dataclass
class StepResult:
    observations: List[Observation]
    reward_terms: List[RewardTerms]
    done: List[bool]
    info: List[StepInfo]
    acted: List[bool]


def _desired_direction(scene: Scene, human: HumanState, waypoint: np.ndarray) -> np.ndarray:
    to_goal = waypoint - human.position
    dist = float(np.hypot(*to_goal))
    if dist < 1e-9:
        return np.zeros(2)
    if _line_of_sight(scene, human.position, waypoint, human.radius):
        return to_goal / dist
    # descend the geodesic field towards the waypoint
    target = scene.snap(waypoint, human.radius)
    dist_field = scene.distance_field(target, human.radius)
    ix, iy = scene.snap(human.position, human.radius)
    best, best_cell = dist_field[iy, ix], None
    for ddx, ddy in ((1, 0), (-1, 0), (0, 1), (0, -1), (1, 1), (1, -1), (-1, 1), (-1, -1)):
        jx, jy = ix + ddx, iy + ddy
        if scene.in_bounds(jx, jy) and dist_field[jy, jx] < best:
            best, best_cell = dist_field[jy, jx], (jx, jy)
    if best_cell is None:
        return to_goal / dist
    step = scene.cell_center(*best_cell) - human.position
    norm = float(np.hypot(*step))
    return step / norm if norm > 1e-9 else to_goal / dist


def social_force_step(humans: Sequence[HumanState], scene: Scene, robot_positions: Sequence[np.ndarray],
                      dt: float = DT) -> List[HumanState]:
    """Advance every pedestrian one step; forces use positions at the start of the step"""
    updated = []
    robots = [np.asarray(p, dtype=np.float64) for p in robot_positions]
    for i, human in enumerate(humans):
        h = human.copy()
        waypoint = h.waypoints[h.current_waypoint]
        if np.hypot(*(waypoint - h.position)) < WAYPOINT_RADIUS:
            h.current_waypoint = (h.current_waypoint + 1) % len(h.waypoints)
            waypoint = h.waypoints[h.current_waypoint]

        desired = h.preferred_speed * _desired_direction(scene, h, waypoint)
        force = (desired - h.velocity) / SF_TAU
        neighbours = [(other.position, other.radius) for j, other in enumerate(humans) if j != i]
        neighbours += [(p, ROBOT_RADIUS) for p in robots]
        for position, radius in neighbours:
            sep = h.position - position
            d = float(np.hypot(*sep))
            if d < 1e-9:
                continue
            force = force + SF_A * math.exp((h.radius + radius - d) / SF_B) * sep / d
        wall = _closest_wall_point(scene, h.position, WALL_CUTOFF)
        if wall is not None and wall[1] > 1e-9:
            sep = h.position - wall[0]
            force = force + SF_A * math.exp((h.radius - wall[1]) / SF_B) * sep / wall[1]

        velocity = h.velocity + force * dt
        speed = float(np.hypot(*velocity))
        cap = SPEED_CAP * h.preferred_speed
        if speed > cap:
            velocity = velocity * (cap / speed)
        candidate = h.position + velocity * dt
        if disc_hits_wall(scene, candidate, h.radius):
            slide_x = np.array([candidate[0], h.position[1]])
            slide_y = np.array([h.position[0], candidate[1]])
            if not disc_hits_wall(scene, slide_x, h.radius):
                candidate, velocity = slide_x, np.array([velocity[0], 0.0])
            elif not disc_hits_wall(scene, slide_y, h.radius):
                candidate, velocity = slide_y, np.array([0.0, velocity[1]])
            else:
                candidate, velocity = h.position.copy(), np.zeros(2)
        h.position = candidate
        h.velocity = velocity
        updated.append(h)
    return updated


# ---------------------------------------------------------------------------
# environment
# ---------------------------------------------------------------------------

class SocialNavEnv:
    """One episode of robots and pedestrians in a fixed scene (single-threaded)"""

    def __init__(self, scene: Scene, n_robots: int = 1, n_humans: int = 4, max_steps: int = 200,
                 min_goal_distance: float = 3.0, max_goal_distance: float = 15.0):
        self.scene = scene
        self.n_robots = n_robots
        self.n_humans = n_humans
        self.max_steps = max_steps
        self.min_goal_distance = min_goal_distance
        self.max_goal_distance = max_goal_distance
        self.robots: List[RobotState] = []
        self.humans: List[HumanState] = []
        self.t = 0
        self.seed = 0
        self.human_history: List[np.ndarray] = []
        self.trace: List[Dict] = []
        self.observations: List[Observation] = []

    # -- sampling -----------------------------------------------------------

    def _sample_point(self, rng: np.random.Generator, radius: float) -> np.ndarray:
        cells = self.scene.free_cells(radius)
        ix, iy = cells[int(rng.integers(len(cells)))]
        return self.scene.cell_center(int(ix), int(iy))

    def reset(self, seed: int) -> List[Observation]:
        """Sample starts, goals and pedestrians; deterministic in (scene, seed)"""
        rng = np.random.default_rng(seed)
        self.seed = seed
        self.t = 0
        spawns: List[np.ndarray] = []
        goals: List[np.ndarray] = []
        attempts = 0

        def far_from(point, others):
            return all(np.hypot(*(point - o)) >= SPAWN_SEPARATION for o in others)

        self.robots = []
        while len(self.robots) < self.n_robots:
            attempts += 1
            if attempts > SPAWN_ATTEMPTS:
                raise EpisodeSamplingError(
                    f'could not place {self.n_robots} robots in scene {self.scene.seed} (episode seed {seed})')
            start = self._sample_point(rng, ROBOT_RADIUS)
            goal = self._sample_point(rng, ROBOT_RADIUS)
            if not far_from(start, spawns) or not far_from(goal, goals):
                continue
            d = geodesic_distance(self.scene, start, goal)
            if not (self.min_goal_distance <= d <= self.max_goal_distance):
                continue
            heading = wrap_angle(float(rng.uniform(-math.pi, math.pi)))
            spawns.append(start)
            goals.append(goal)
            self.robots.append(RobotState(position=start, heading=heading, goal=goal, geodesic=d, shortest=d))

        self.humans = []
        while len(self.humans) < self.n_humans:
            attempts += 1
            if attempts > SPAWN_ATTEMPTS:
                raise EpisodeSamplingError(
                    f'could not place {self.n_humans} humans in scene {self.scene.seed} (episode seed {seed})')
            start = self._sample_point(rng, HUMAN_RADIUS)
            if not far_from(start, spawns):
                continue
            n_waypoints = int(rng.integers(2, 5))
            waypoints = [self._sample_point(rng, HUMAN_RADIUS) for _ in range(n_waypoints)]
            speed = float(rng.uniform(0.5, 1.0))
            spawns.append(start)
            self.humans.append(HumanState(position=start, velocity=np.zeros(2), waypoints=waypoints,
                                          preferred_speed=speed))

        self.human_history = [self.human_positions()]
        self.trace = []
        self.observations = [self.observe(i) for i in range(self.n_robots)]
        return self.observations

    # -- queries ------------------------------------------------------------

    def human_positions(self) -> np.ndarray:
        if not self.humans:
            return np.zeros((0, 2))
        return np.array([h.position for h in self.humans])

    def _discs_for(self, index: int) -> Tuple[np.ndarray, np.ndarray]:
        centers = [r.position for j, r in enumerate(self.robots) if j != index]
        radii = [r.radius for j, r in enumerate(self.robots) if j != index]
        centers += [h.position for h in self.humans]
        radii += [h.radius for h in self.humans]
        if not centers:
            return np.zeros((0, 2)), np.zeros(0)
        return np.array(centers), np.array(radii)

    def observe(self, index: int) -> Observation:
        robot = self.robots[index]
        centers, radii = self._discs_for(index)
        depth = raycast_depth(self.scene, robot.pose, centers, radii)
        delta = robot.goal - robot.position
        rho = float(np.hypot(*delta))
        phi = wrap_angle(math.atan2(delta[1], delta[0]) - robot.heading)
        return Observation(depth=depth, goal_polar=(rho, phi), pose=robot.pose, prev_action=robot.prev_action)

    def robot_geodesic(self, position: np.ndarray, goal: np.ndarray) -> float:
        d = geodesic_distance(self.scene, position, goal)
        # only reachable through snapping artefacts; fall back to straight-line distance
        return d if math.isfinite(d) else float(np.hypot(*(goal - position)))

    def nearest_humans(self, index: int, count: int) -> Tuple[np.ndarray, np.ndarray, List[int]]:
        """Robot-frame positions of the nearest `count` humans, validity mask and their indices"""
        robot = self.robots[index]
        positions = self.human_positions()
        order: List[int] = []
        if len(positions):
            d = np.hypot(*(positions - robot.position).T)
            order = [int(k) for k in np.argsort(d, kind='stable')[:count]]
        local = np.zeros((count, 2))
        valid = np.zeros(count, dtype=bool)
        for slot, k in enumerate(order):
            local[slot] = to_robot_frame(positions[k], robot.position, robot.heading)
            valid[slot] = True
        return local, valid, order

    @property
    def all_done(self) -> bool:
        return all(r.done for r in self.robots)

    # -- dynamics -----------------------------------------------------------

    def blocker(self, index: int, start: np.ndarray, end: np.ndarray) -> Optional[str]:
        """What stops a robot disc swept from start to end: 'human', 'wall', 'robot' or None"""
        robot = self.robots[index]
        if self.humans:
            d = _segment_distance(start, end, self.human_positions())
            if (d < robot.radius + HUMAN_RADIUS).any():
                return 'human'
        length = float(np.hypot(*(end - start)))
        for s in np.linspace(0.0, 1.0, max(2, int(math.ceil(length / 0.05)) + 1)):
            if disc_hits_wall(self.scene, start + s * (end - start), robot.radius):
                return 'wall'
        others = [r.position for j, r in enumerate(self.robots) if j != index]
        if others:
            d = _segment_distance(start, end, np.array(others))
            if (d < 2 * robot.radius).any():
                return 'robot'
        return None

    def step(self, actions: Sequence[Optional[int]]) -> StepResult:
        if len(actions) != self.n_robots:
            raise InvalidActionError(f'expected {self.n_robots} actions, got {len(actions)}')
        acted = [not r.done for r in self.robots]
        for i, (robot, action) in enumerate(zip(self.robots, actions)):
            if robot.done and action is not None:
                raise InvalidActionError(f'action {action} supplied for robot {i}, whose episode is done')
            if not robot.done and (action is None or int(action) not in range(N_ACTIONS)):
                raise InvalidActionError(f'robot {i} needs an action in 0..{N_ACTIONS - 1}, got {action}')

        previous = [r.geodesic for r in self.robots]
        static_hit = [False] * self.n_robots
        human_hit = [False] * self.n_robots

        # (1) robots
        for i, robot in enumerate(self.robots):
            if not acted[i]:
                continue
            action = Action(int(actions[i]))
            robot.prev_action = int(action)
            if action == Action.FORWARD:
                end = robot.position + FORWARD_STEP * np.array([math.cos(robot.heading), math.sin(robot.heading)])
                blocked = self.blocker(i, robot.position, end)
                if blocked is None:
                    robot.position = end
                    robot.path_length += FORWARD_STEP
                else:
                    static_hit[i] = True
            elif action == Action.TURN_LEFT:
                robot.heading = wrap_angle(robot.heading + TURN_ANGLE)
            elif action == Action.TURN_RIGHT:
                robot.heading = wrap_angle(robot.heading - TURN_ANGLE)
            else:
                robot.done = True
                robot.success = bool(np.hypot(*(robot.goal - robot.position)) <= SUCCESS_RADIUS)

        # (2) humans
        self.humans = social_force_step(self.humans, self.scene, [r.position for r in self.robots])
        self.human_history.append(self.human_positions())

        # (3) collisions, (4) rewards
        self.t += 1
        positions = self.human_positions()
        terms: List[RewardTerms] = []
        infos: List[StepInfo] = []
        for i, robot in enumerate(self.robots):
            if not acted[i]:
                terms.append(RewardTerms())
                infos.append(StepInfo(geodesic_to_goal=robot.geodesic))
                continue
            min_dist = float(np.hypot(*(positions - robot.position).T).min()) if len(positions) else math.inf
            if min_dist < CONTACT_DISTANCE:
                human_hit[i] = True
            robot.human_collided |= human_hit[i]
            robot.min_human_dists.append(min_dist)
            robot.geodesic = self.robot_geodesic(robot.position, robot.goal)
            r_succ = SUCCESS_REWARD if robot.success and robot.done else 0.0
            r_coll = STATIC_PENALTY * static_hit[i] + HUMAN_PENALTY * human_hit[i]
            terms.append(RewardTerms(r_goal=previous[i] - robot.geodesic, r_succ=r_succ, r_coll=r_coll))
            infos.append(StepInfo(human_collision=human_hit[i], static_collision=static_hit[i],
                                  min_human_dist=min_dist, geodesic_to_goal=robot.geodesic))

        if self.t >= self.max_steps:
            for robot in self.robots:
                robot.done = True

        # (5) observations
        self.observations = [self.observe(i) for i in range(self.n_robots)]
        self.trace.append({
            't': self.t,
            'robot_poses': [r.pose.tolist() for r in self.robots],
            'human_poses': positions.tolist(),
            'actions': [None if a is None else int(a) for a in actions],
            'reward_terms': [tm.as_dict() for tm in terms],
            'min_human_dist': [info.min_human_dist if acted[i] and math.isfinite(info.min_human_dist) else None
                               for i, info in enumerate(infos)],
            'human_collision': [info.human_collision for info in infos],
            'acted': acted,
            'done': [r.done for r in self.robots],
        })
        return StepResult(self.observations, terms, [r.done for r in self.robots], infos, acted)

    def advance_humans(self, steps: int) -> List[np.ndarray]:
        """Roll pedestrians forward with the robots frozen (ground-truth futures past episode end)"""
        future = []
        for _ in range(steps):
            self.humans = social_force_step(self.humans, self.scene, [r.position for r in self.robots])
            positions = self.human_positions()
            self.human_history.append(positions)
            future.append(positions)
        return future

    def episode_records(self, episode_id: int) -> List['EpisodeRecord']:
        return [EpisodeRecord(episode_id=episode_id, robot=i, success=r.success, shortest=r.shortest,
                              path_length=r.path_length, min_human_dists=list(r.min_human_dists),
                              human_collided=r.human_collided)
                for i, r in enumerate(self.robots)]


# ---------------------------------------------------------------------------
# scripted controllers
# ---------------------------------------------------------------------------

def greedy_action(env: SocialNavEnv, index: int) -> int:
    """Geodesic-descent replanner: Stop inside the success radius, else the best simulated outcome.

    Turns are scored by the position a Forward move would reach after turning;
    humans only matter when they block the move. Ties keep the lowest action id.
    """
    robot = env.robots[index]
    if np.hypot(*(robot.goal - robot.position)) <= SUCCESS_RADIUS:
        return int(Action.STOP)
    best_action, best_score = int(Action.FORWARD), None
    for action, turn in ((Action.FORWARD, 0.0), (Action.TURN_LEFT, TURN_ANGLE), (Action.TURN_RIGHT, -TURN_ANGLE)):
        heading = wrap_angle(robot.heading + turn)
        end = robot.position + FORWARD_STEP * np.array([math.cos(heading), math.sin(heading)])
        outcome = robot.position if env.blocker(index, robot.position, end) else end
        score = (env.robot_geodesic(outcome, robot.goal), float(np.hypot(*(robot.goal - outcome))))
        if best_score is None or score < best_score:
            best_action, best_score = int(action), score
    here = (env.robot_geodesic(robot.position, robot.goal), float(np.hypot(*(robot.goal - robot.position))))
    if best_action == Action.FORWARD and best_score >= here:
        # nothing makes progress (usually a blocked Forward): rotate in place
        return int(Action.TURN_LEFT)
    return best_action


def scripted_action(env: SocialNavEnv, index: int, rng: np.random.Generator, random_prob: float) -> int:
    """Warm-up data policy: greedy with probability 1 - random_prob, else a random move (never Stop)"""
    if rng.random() < random_prob:
        return int(rng.integers(0, N_ACTIONS - 1))
    return greedy_action(env, index)


# ---------------------------------------------------------------------------
# metrics
# ---------------------------------------------------------------------------

@dataclass
class EpisodeRecord:
    episode_id: int
    robot: int
    success: bool
    shortest: float
    path_length: float
    min_human_dists: List[float]
    human_collided: bool


METRIC_COLUMNS = ['episode', 'robot', 'success', 'spl_term', 'psc', 'human_collided',
                  'SR', 'SPL', 'PSC', 'H-Coll', 'T-SR', 'T-SPL']


class RobotEpisodeMetrics(BaseModel):
    episode: int
    robot: int
    success: bool
    spl_term: float
    psc: float
    human_collided: bool


class MetricsReport(BaseModel):
    episodes: List[RobotEpisodeMetrics] = []
    sr: float = 0.0
    spl: float = 0.0
    psc: float = 0.0
    h_coll: float = 0.0
    t_sr: float = 0.0
    t_spl: float = 0.0
    n_episodes: int = 0

    def aggregate(self) -> Dict[str, float]:
        return {'SR': self.sr, 'SPL': self.spl, 'PSC': self.psc, 'H-Coll': self.h_coll,
                'T-SR': self.t_sr, 'T-SPL': self.t_spl}

    def to_frame(self) -> pd.DataFrame:
        """One row per robot-episode plus an aggregate row; header only when empty"""
        rows = [{'episode': ep.episode, 'robot': ep.robot, 'success': int(ep.success), 'spl_term': ep.spl_term,
                 'psc': ep.psc, 'human_collided': int(ep.human_collided)} for ep in self.episodes]
        if rows:
            rows.append({'episode': 'aggregate', **self.aggregate()})
        return pd.DataFrame(rows, columns=METRIC_COLUMNS)


def compute_metrics(records: Sequence[EpisodeRecord]) -> MetricsReport:
    """Per-robot SR/SPL/PSC/H-Coll plus team T-SR/T-SPL, all as percentages"""
    if not records:
        return MetricsReport()
    rows = []
    teams: 'OrderedDict[int, List[Tuple[bool, float]]]' = OrderedDict()
    for rec in records:
        if rec.success and rec.path_length < rec.shortest - (SUCCESS_RADIUS + 0.1 * rec.shortest):
            raise PathCorruptionError(
                f'episode {rec.episode_id} robot {rec.robot}: path {rec.path_length:.3f} m is shorter '
                f'than the shortest path {rec.shortest:.3f} m')
        ratio = rec.shortest / max(rec.path_length, rec.shortest) if rec.shortest > 0 else 1.0
        steps = len(rec.min_human_dists)
        close = sum(1 for d in rec.min_human_dists if d is not None and d < PSC_RADIUS)
        psc = 1.0 - close / steps if steps else 1.0
        rows.append(RobotEpisodeMetrics(episode=rec.episode_id, robot=rec.robot, success=rec.success,
                                        spl_term=ratio if rec.success else 0.0, psc=psc,
                                        human_collided=rec.human_collided))
        teams.setdefault(rec.episode_id, []).append((rec.success, ratio))

    n = len(rows)
    team_success = [all(s for s, _ in members) for members in teams.values()]
    team_spl = [float(np.mean([r for _, r in members])) if ok else 0.0
                for ok, members in zip(team_success, teams.values())]
    return MetricsReport(
        episodes=rows,
        sr=100.0 * sum(r.success for r in rows) / n,
        spl=100.0 * sum(r.spl_term for r in rows) / n,
        psc=100.0 * sum(r.psc for r in rows) / n,
        h_coll=100.0 * sum(r.human_collided for r in rows) / n,
        t_sr=100.0 * sum(team_success) / len(teams),
        t_spl=100.0 * sum(team_spl) / len(teams),
        n_episodes=len(teams),
    )


# ---------------------------------------------------------------------------
# episode traces
# ---------------------------------------------------------------------------

def export_trace(path, env: SocialNavEnv, episode_id: int):
    """One JSON record per line, then a summary line with what metrics need"""
    path = Path(path)
    with open(path, 'w', encoding='utf-8', newline='\n') as fh:
        for row in env.trace:
            fh.write(json.dumps(row) + '\n')
        summary = {'summary': {
            'episode_id': episode_id,
            'scene_seed': env.scene.seed,
            'episode_seed': env.seed,
            'robots': [{'success': r.success, 'shortest': r.shortest, 'path_length': r.path_length,
                        'human_collided': r.human_collided} for r in env.robots],
        }}
        fh.write(json.dumps(summary) + '\n')


def load_trace(path) -> Tuple[List[Dict], Dict]:
    rows, summary = [], {}
    with open(path, encoding='utf-8') as fh:
        for line in fh:
            record = json.loads(line)
            if 'summary' in record:
                summary = record['summary']
            else:
                rows.append(record)
    return rows, summary


def records_from_trace(path) -> List[EpisodeRecord]:
    rows, summary = load_trace(path)
    records = []
    for i, robot in enumerate(summary['robots']):
        dists = [math.inf if row['min_human_dist'][i] is None else row['min_human_dist'][i]
                 for row in rows if row['acted'][i]]
        records.append(EpisodeRecord(episode_id=summary['episode_id'], robot=i, success=robot['success'],
                                     shortest=robot['shortest'], path_length=robot['path_length'],
                                     min_human_dists=dists, human_collided=robot['human_collided']))
    return records


def metrics_from_traces(paths: Sequence) -> MetricsReport:
    records: List[EpisodeRecord] = []
    for path in paths:
        records.extend(records_from_trace(path))
    return compute_metrics(records)
