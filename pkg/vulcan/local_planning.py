"""Hazard-aware fast marching and path following.

The speed field slows the wavefront in hazardous cells, ``F = 1 / (1 +
alpha * H)``; the arrival field from a goal region is solved with a
first-order upwind fast marching method over 4-neighbours, and paths
descend its gradient.  Arrival values are in meters at unit speed.
"""

import enum
import heapq
import logging
import math
from dataclasses import dataclass

import numpy as np
from scipy import ndimage

from vulcan.config import Params, check_non_negative
from vulcan.errors import (
    ConfigError,
    GeometryError,
    StagnationError,
    UnreachableError,
)
from vulcan.mapping import OCCUPIED, UNKNOWN
from vulcan.sensors import TILT_STEP, Pose
from vulcan.world import EIGHT_CONNECTED


logger = logging.getLogger(__name__)

FORWARD_STEP = 0.25
TURN_ANGLE = math.radians(30)

# goal sets this small are treated as point sources and seeded exactly
POINT_SOURCE_CELLS = 4
SEED_RADIUS = 10
APPROACH_MOVES = 3


class Action(enum.Enum):
    MOVE_FORWARD = 'move_forward'
    TURN_LEFT = 'turn_left'
    TURN_RIGHT = 'turn_right'
    LOOK_UP = 'look_up'
    LOOK_DOWN = 'look_down'
    STOP = 'stop'

    def __str__(self):
        return self.value


@dataclass(frozen=True)
class LocalPlannerParams(Params):
    alpha: float = 5.0
    unknown_factor: float = 0.5
    inflation: int = 1
    path_step: float = 0.5
    goal_tolerance: float = 0.1
    max_iterations: int = 10000

    def __post_init__(self):
        check_non_negative('LocalPlannerParams', alpha=self.alpha,
                           inflation=self.inflation,
                           goal_tolerance=self.goal_tolerance)
        if not 0 < self.unknown_factor <= 1:
            raise ConfigError("LocalPlannerParams: unknown_factor must lie"
                              " in (0, 1]")
        if not self.path_step > 0:
            raise ConfigError("LocalPlannerParams: path_step must be"
                              " positive")
        if self.max_iterations < 1:
            raise ConfigError("LocalPlannerParams: max_iterations must be"
                              " at least 1")


@dataclass(eq=False)
class SpeedField:
    """Per-cell speed; zero marks untraversable cells.

    ``base`` is the speed before obstacle inflation.
    """

    F: np.ndarray
    resolution: float
    origin: tuple = (0.0, 0.0)
    base: np.ndarray = None

    def __post_init__(self):
        if self.base is None:
            self.base = self.F

    @property
    def shape(self):
        return self.F.shape

    def traversable(self, cell):
        return self.F[cell] > 0

    def reopen(self, cells):
        """Restore the pre-inflation speed on ``cells``."""
        F = self.F.copy()
        for row, col in cells:
            F[row, col] = self.base[row, col]
        return SpeedField(F, self.resolution, self.origin, self.base)


def hazard_speed(hazard_map, alpha=5.0, unknown_factor=0.5, inflation=1):
    """Speed field of a map: ``1 / (1 + alpha * H)`` on free cells."""
    if alpha < 0:
        raise ConfigError(f"alpha must be non-negative, got {alpha}")
    F = 1.0 / (1.0 + alpha * hazard_map.H)
    F = np.where(hazard_map.O == UNKNOWN, unknown_factor * F, F)
    occupied = hazard_map.O == OCCUPIED
    F = np.where(occupied, 0.0, F)
    base = F
    if inflation > 0 and occupied.any():
        grown = ndimage.binary_dilation(occupied, structure=EIGHT_CONNECTED,
                                        iterations=int(inflation))
        F = np.where(grown, 0.0, F)
    return SpeedField(F, hazard_map.resolution, tuple(hazard_map.origin),
                      base)


@dataclass(eq=False)
class ArrivalField:
    """Arrival value per cell; ``inf`` where no goal can be reached."""

    time: np.ndarray
    goals: tuple
    resolution: float
    origin: tuple = (0.0, 0.0)

    @property
    def shape(self):
        return self.time.shape

    def cell_of(self, x, y):
        ox, oy = self.origin
        row = int((y - oy) // self.resolution)
        col = int((x - ox) // self.resolution)
        if not (0 <= row < self.shape[0] and 0 <= col < self.shape[1]):
            raise GeometryError(f"({x:.3f}, {y:.3f}) is outside the field")
        return (row, col)

    def at(self, x, y):
        return float(self.time[self.cell_of(x, y)])

    def sample(self, x, y):
        """Bilinear arrival value at a point, as path descent reads it."""
        ox, oy = self.origin
        r = (y - oy) / self.resolution - 0.5
        c = (x - ox) / self.resolution - 0.5
        with np.errstate(invalid='ignore'):
            value = float(_sample(self.time, r, c))
        return math.inf if math.isnan(value) else value


def _seed_values(F, goal, h):
    """Straight-segment travel times from a point goal to nearby cells."""
    H, W = F.shape
    gr, gc = goal
    dr, dc = np.mgrid[-SEED_RADIUS:SEED_RADIUS + 1,
                      -SEED_RADIUS:SEED_RADIUS + 1]
    dr, dc = dr.ravel(), dc.ravel()
    dist = np.hypot(dr, dc)
    rows, cols = gr + dr, gc + dc
    keep = ((dist > 0) & (dist <= SEED_RADIUS) & (rows >= 0) & (rows < H)
            & (cols >= 0) & (cols < W))
    dr, dc, dist = dr[keep], dc[keep], dist[keep]
    s = np.linspace(0.0, 1.0, 4 * SEED_RADIUS + 1)
    along_r = np.floor(gr + 0.5 + np.outer(dr, s)).astype(int)
    along_c = np.floor(gc + 0.5 + np.outer(dc, s)).astype(int)
    speeds = F[np.clip(along_r, 0, H - 1), np.clip(along_c, 0, W - 1)]
    clear = (speeds > 0).all(axis=1)
    slowness = (1.0 / speeds[clear]).mean(axis=1)
    values = dist[clear] * h * slowness
    return {(int(gr + r), int(gc + c)): float(v)
            for r, c, v in zip(dr[clear], dc[clear], values)}


def solve_fmm(speed, goals, order=None, stop_at=None, limit=None):
    """First-order fast marching from a set of goal cells.

    Untraversable goals are ignored.  When ``order`` is a list, accepted
    cells are appended to it with their values.  With ``stop_at`` the
    march ends shortly after every listed cell has been accepted, and with
    ``limit`` once arrival values exceed it; cells not reached hold
    ``inf``.
    """
    F = speed.F
    H, W = F.shape
    h = speed.resolution
    goals = [tuple(int(v) for v in g) for g in goals]
    for row, col in goals:
        if not (0 <= row < H and 0 <= col < W):
            raise GeometryError(f"goal cell ({row}, {col}) is off the grid")
    live = [g for g in goals if F[g] > 0]
    if not live:
        raise UnreachableError("every goal cell is untraversable")

    speeds = F.ravel().tolist()
    INF = math.inf
    T = [INF] * (H * W)
    accepted = bytearray(H * W)
    heap = []
    for row, col in live:
        i = row * W + col
        T[i] = 0.0
        heap.append((0.0, i))
    if len(live) <= POINT_SOURCE_CELLS:
        for goal in live:
            for (row, col), value in _seed_values(F, goal, h).items():
                i = row * W + col
                if value < T[i]:
                    T[i] = value
                    heap.append((value, i))
    heapq.heapify(heap)

    pending = None
    if stop_at is not None:
        pending = {r * W + c for r, c in stop_at
                   if 0 <= r < H and 0 <= c < W}
    horizon = INF if limit is None else limit

    while heap:
        t, i = heapq.heappop(heap)
        if accepted[i] or t > T[i]:
            continue
        if t > horizon:
            break
        accepted[i] = 1
        if order is not None:
            order.append((t, divmod(i, W)))
        if pending:
            pending.discard(i)
            if not pending:
                horizon = min(horizon, t + 3 * h / max(speeds[i], 1e-9))
        row, col = divmod(i, W)
        for j, nr, nc in ((i - W, row - 1, col), (i + W, row + 1, col),
                          (i - 1, row, col - 1), (i + 1, row, col + 1)):
            if nr < 0 or nr >= H or nc < 0 or nc >= W:
                continue
            if accepted[j] or speeds[j] <= 0:
                continue
            a = INF
            if nr > 0 and accepted[j - W]:
                a = T[j - W]
            if nr < H - 1 and accepted[j + W] and T[j + W] < a:
                a = T[j + W]
            b = INF
            if nc > 0 and accepted[j - 1]:
                b = T[j - 1]
            if nc < W - 1 and accepted[j + 1] and T[j + 1] < b:
                b = T[j + 1]
            if a > b:
                a, b = b, a
            tau = h / speeds[j]
            if b - a >= tau:
                value = a + tau
            else:
                value = 0.5 * (a + b + math.sqrt(2 * tau * tau
                                                 - (a - b) ** 2))
            if value < T[j]:
                T[j] = value
                heapq.heappush(heap, (value, j))

    time = np.array(T).reshape(H, W)
    time[~np.frombuffer(bytes(accepted), dtype=np.uint8)
         .astype(bool).reshape(H, W)] = INF
    return ArrivalField(time, tuple(live), h, tuple(speed.origin))


def _sample(A, r, c):
    """Bilinear sample of ``A`` at fractional index ``(r, c)``, clamped."""
    H, W = A.shape
    r = min(max(r, 0.0), H - 1.0)
    c = min(max(c, 0.0), W - 1.0)
    r0 = min(int(r), H - 2) if H > 1 else 0
    c0 = min(int(c), W - 2) if W > 1 else 0
    fr = r - r0
    fc = c - c0
    r1 = min(r0 + 1, H - 1)
    c1 = min(c0 + 1, W - 1)
    return ((1 - fr) * ((1 - fc) * A[r0, c0] + fc * A[r0, c1])
            + fr * ((1 - fc) * A[r1, c0] + fc * A[r1, c1]))


def extract_path(field, start, step=0.5, max_iterations=10000):
    """Descend the arrival field from ``start`` to the goal region.

    Returns a list of ``(x, y)`` vertices in meters with strictly
    decreasing arrival value.  Raises UnreachableError if the start cannot
    reach a goal and StagnationError if the descent gets stuck.
    """
    time = field.time
    row, col = field.cell_of(*start)
    if not np.isfinite(time[row, col]):
        raise UnreachableError(f"start ({start[0]:.3f}, {start[1]:.3f})"
                               f" cannot reach the goal")
    goal_mask = np.zeros(time.shape, dtype=bool)
    for cell in field.goals:
        goal_mask[cell] = True
    if goal_mask[row, col]:
        return [tuple(map(float, start))]
    near_goal = ndimage.binary_dilation(goal_mask, structure=EIGHT_CONNECTED)

    finite = np.isfinite(time)
    ceiling = (time[finite].max() if finite.any() else 0.0) * 2 + 1.0
    filled = np.where(finite, time, ceiling)
    grad_r, grad_c = np.gradient(filled) if min(time.shape) > 1 else (
        np.zeros(time.shape), np.zeros(time.shape))
    res = field.resolution
    ox, oy = field.origin
    H, W = time.shape

    r = (start[1] - oy) / res - 0.5
    c = (start[0] - ox) / res - 0.5
    value = _sample(filled, r, c)
    path = [tuple(map(float, start))]
    for _ in range(max_iterations):
        cell = (min(max(int(round(r)), 0), H - 1),
                min(max(int(round(c)), 0), W - 1))
        if near_goal[cell]:
            if value <= 0:
                return path
            goals = np.array(field.goals)
            nearest = goals[np.argmin(np.hypot(goals[:, 0] - r,
                                               goals[:, 1] - c))]
            path.append((float(ox + (nearest[1] + 0.5) * res),
                         float(oy + (nearest[0] + 0.5) * res)))
            return path
        gr = _sample(grad_r, r, c)
        gc = _sample(grad_c, r, c)
        norm = math.hypot(gr, gc)
        moved = False
        if norm > 1e-12:
            nr = r - step * gr / norm
            nc = c - step * gc / norm
            new_value = _sample(filled, nr, nc)
            if new_value < value:
                r, c, value = nr, nc, new_value
                moved = True
        if not moved:
            best = None
            for dr in (-1, 0, 1):
                for dc in (-1, 0, 1):
                    rr, cc = cell[0] + dr, cell[1] + dc
                    if (dr or dc) and 0 <= rr < H and 0 <= cc < W \
                            and filled[rr, cc] < value \
                            and (best is None or filled[rr, cc] < best[0]):
                        best = (filled[rr, cc], rr, cc)
            if best is None:
                raise StagnationError(
                    f"path descent stuck at cell {cell} (arrival"
                    f" {value:.3f})")
            value, r, c = float(best[0]), float(best[1]), float(best[2])
        path.append((ox + (c + 0.5) * res, oy + (r + 0.5) * res))
    raise StagnationError(f"path descent did not reach the goal in"
                          f" {max_iterations} iterations")


def _wrap_pi(angle):
    return (angle + math.pi) % (2 * math.pi) - math.pi


def _final_approach(x, y, heading, goal, tolerance):
    """Turn-and-move sequence of at most ``APPROACH_MOVES`` steps.

    Prefers the fewest actions that end within ``tolerance`` of ``goal``,
    then the sequence ending closest to it.  Returns an empty list when no
    sequence gets closer than the robot already is.
    """
    gx, gy = goal
    best_key, best = None, []
    layer = [(x, y, 0, [])]
    for _ in range(APPROACH_MOVES):
        grown = []
        for px, py, k, seq in layer:
            for turns in range(-5, 7):
                angle = heading + (k + turns) * TURN_ANGLE
                nx = px + FORWARD_STEP * math.cos(angle)
                ny = py + FORWARD_STEP * math.sin(angle)
                turn = Action.TURN_LEFT if turns > 0 else Action.TURN_RIGHT
                steps = seq + [turn] * abs(turns) + [Action.MOVE_FORWARD]
                dist = math.hypot(gx - nx, gy - ny)
                key = ((0, len(steps), dist) if dist <= tolerance
                       else (1, dist, len(steps)))
                if best_key is None or key < best_key:
                    best_key, best = key, steps
                grown.append((nx, ny, k + turns, steps))
        layer = grown
    if best_key[0] == 1 and best_key[1] >= math.hypot(gx - x, gy - y):
        return []
    return best


def path_to_actions(path, pose, tolerance=0.1, max_actions=None):
    """Greedy tracking of a path with the discrete action set.

    Turns by the multiple of 30 degrees closest to the bearing of the next
    waypoint at least one step ahead, then moves forward.  Near the last
    waypoint a short search picks the moves that land within ``tolerance``
    of it, or as close as the 0.25 m lattice allows.  The list ends with
    ``stop``.
    """
    if not path:
        raise GeometryError("cannot follow an empty path")
    x, y, heading = pose.x, pose.y, pose.heading
    gx, gy = path[-1]
    if max_actions is None:
        length = sum(math.dist(a, b) for a, b in zip(path, path[1:]))
        length += math.dist((x, y), path[0])
        max_actions = int(4 * (length / FORWARD_STEP + 12))
    actions = []
    index = 0
    while len(actions) < max_actions:
        remaining = math.hypot(gx - x, gy - y)
        if remaining <= tolerance:
            break
        while index < len(path) - 1 and \
                math.dist((x, y), path[index]) < FORWARD_STEP:
            index += 1
        if index == len(path) - 1 and remaining <= 2 * FORWARD_STEP:
            actions.extend(_final_approach(x, y, heading, (gx, gy),
                                           tolerance))
            break
        tx, ty = path[index]
        diff = _wrap_pi(math.atan2(ty - y, tx - x) - heading)
        turns = int(round(diff / TURN_ANGLE))
        turn = Action.TURN_LEFT if turns > 0 else Action.TURN_RIGHT
        for _ in range(abs(turns)):
            actions.append(turn)
        heading += turns * TURN_ANGLE
        actions.append(Action.MOVE_FORWARD)
        x += FORWARD_STEP * math.cos(heading)
        y += FORWARD_STEP * math.sin(heading)
    else:
        logger.warning("path tracking gave up after %d actions", max_actions)
    actions.append(Action.STOP)
    return actions


def _segment_clear(scene, a, b):
    n = max(2, int(math.ceil(math.dist(a, b) / (scene.resolution / 2))) + 1)
    for s in np.linspace(0.0, 1.0, n):
        if not scene.is_free_at(a[0] + s * (b[0] - a[0]),
                                a[1] + s * (b[1] - a[1])):
            return False
    return True


def execute_action(scene, pose, action):
    """Apply one action against the true occupancy.

    Returns the new pose and the distance moved; a blocked forward move
    leaves the pose unchanged and moves zero.
    """
    if action is Action.MOVE_FORWARD:
        target = (pose.x + FORWARD_STEP * math.cos(pose.heading),
                  pose.y + FORWARD_STEP * math.sin(pose.heading))
        if not _segment_clear(scene, pose.position, target):
            return pose, 0.0
        return Pose(target[0], target[1], pose.heading, pose.tilt), \
            FORWARD_STEP
    if action is Action.TURN_LEFT:
        return Pose(pose.x, pose.y, pose.heading + TURN_ANGLE,
                    pose.tilt), 0.0
    if action is Action.TURN_RIGHT:
        return Pose(pose.x, pose.y, pose.heading - TURN_ANGLE,
                    pose.tilt), 0.0
    if action is Action.LOOK_UP:
        return Pose(pose.x, pose.y, pose.heading,
                    pose.tilt + TILT_STEP), 0.0
    if action is Action.LOOK_DOWN:
        return Pose(pose.x, pose.y, pose.heading,
                    pose.tilt - TILT_STEP), 0.0
    return pose, 0.0
