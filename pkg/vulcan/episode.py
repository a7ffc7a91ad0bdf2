"""Episodes: the sense, map, plan and act loop, traces and metrics.

One ``Episode`` owns the mutable state of a run: the fire, the shared
obstacle-hazard map and every robot.  Each tick the fire advances, every
alive robot senses and its points join the shared map, the global planner
runs when a replanning trigger fires, and every robot executes one action
along its hazard-aware path.
"""

import concurrent.futures
import json
import logging
import math
from dataclasses import dataclass, field

import numpy as np

from vulcan.config import Params, check_unit_interval
from vulcan.errors import (
    ConfigError,
    GeometryError,
    PlanningError,
    TraceError,
)
from vulcan.global_planning import (
    FRONTIER,
    HOLD,
    Goal,
    Planner,
    PlannerInput,
    PlannerParams,
    RobotState,
    make_planner,
)
from vulcan.local_planning import (
    FORWARD_STEP,
    Action,
    LocalPlannerParams,
    execute_action,
    extract_path,
    hazard_speed,
    path_to_actions,
    solve_fmm,
)
from vulcan.mapping import (
    HazardAccumulator,
    MapParams,
    extract_frontiers,
    frontier_mask,
    write_map,
)
from vulcan.perception import (
    VISION,
    CloudParams,
    FusionParams,
    build_local_cloud,
    fuse_modalities,
    locate_detection,
    merge_global,
    outlier_mask,
)
from vulcan.sensors import (
    CameraIntrinsics,
    DegradationParams,
    Pose,
    SensorRig,
    observe,
)
from vulcan.world import (
    distance_field,
    inject_fire,
    no_fire,
    reachable_mask,
    step_fire,
    stream_rng,
    true_hazard,
)


logger = logging.getLogger(__name__)

SUCCESS = 'success'
BUDGET_EXHAUSTED = 'budget_exhausted'
ALL_AGENTS_LOST = 'all_agents_lost'
TERMINATIONS = (SUCCESS, BUDGET_EXHAUSTED, ALL_AGENTS_LOST)

TRACE_VERSION = 1


@dataclass(frozen=True)
class Task:
    """One episode to run.

    ``spawn`` is the shared start in meters; robots face evenly spread
    headings.  ``None`` picks the scene's first start.
    """

    scene_id: str
    target: str
    agents: int = 2
    spawn: tuple = None
    required_targets: int = 1
    max_steps: int = 500
    seed: int = 0
    episode_id: str = ''

    def __post_init__(self):
        if self.agents < 1:
            raise ConfigError(f"task {self.episode_id}: needs at least one"
                              f" agent")
        if self.required_targets < 1:
            raise ConfigError(f"task {self.episode_id}: required_targets"
                              f" must be at least 1")
        if self.max_steps < 0:
            raise ConfigError(f"task {self.episode_id}: max_steps must be"
                              f" non-negative")
        if self.spawn is not None:
            object.__setattr__(self, 'spawn',
                               tuple(float(v) for v in self.spawn))

    def to_dict(self):
        return {'scene_id': self.scene_id, 'target': self.target,
                'agents': self.agents,
                'spawn': None if self.spawn is None else list(self.spawn),
                'required_targets': self.required_targets,
                'max_steps': self.max_steps, 'seed': self.seed,
                'episode_id': self.episode_id}

    @classmethod
    def from_dict(cls, data):
        try:
            return cls(**data)
        except TypeError as e:
            raise TraceError(f"bad task record: {e}")


@dataclass(frozen=True)
class EpisodeParams(Params):
    """Every module's parameters plus the episode rules."""

    intrinsics: CameraIntrinsics = CameraIntrinsics()
    rig: SensorRig = SensorRig()
    degradation: DegradationParams = DegradationParams()
    fusion: FusionParams = FusionParams()
    cloud: CloudParams = CloudParams()
    mapping: MapParams = MapParams()
    local: LocalPlannerParams = LocalPlannerParams()
    planner: PlannerParams = PlannerParams()
    lethal_hazard: float = 0.9
    explore_fraction: float = 0.95
    success_radius: float = 0.1
    candidate_merge: float = 0.5

    def __post_init__(self):
        check_unit_interval('EpisodeParams',
                            lethal_hazard=self.lethal_hazard,
                            explore_fraction=self.explore_fraction)
        if not self.success_radius > 0:
            raise ConfigError("EpisodeParams: success_radius must be"
                              " positive")
        if self.candidate_merge < 0:
            raise ConfigError("EpisodeParams: candidate_merge must be"
                              " non-negative")


@dataclass
class EpisodeTrace:
    """Step records and events of one episode, plus its summary."""

    task: Task
    records: list = field(default_factory=list)
    termination: str = BUDGET_EXHAUSTED
    path_length: dict = field(default_factory=dict)
    spawn: tuple = (0.0, 0.0)
    coverage: float = 0.0
    redundancy: float = 0.0
    hazard_exposure: float = 0.0
    explore_fraction: float = 0.95
    method: str = ''
    condition: str = ''

    @property
    def episode_id(self):
        return self.task.episode_id

    @property
    def steps(self):
        return [r for r in self.records if r['type'] == 'step']

    @property
    def num_steps(self):
        return len(self.steps)

    def events(self, kind=None):
        return [r for r in self.records
                if r['type'] != 'step' and (kind is None
                                            or r['type'] == kind)]

    def summary(self):
        return {'type': 'summary', 'version': TRACE_VERSION,
                'task': self.task.to_dict(),
                'termination': self.termination,
                'steps': self.num_steps,
                'path_length': {str(k): v for k, v in
                                sorted(self.path_length.items())},
                'spawn': list(self.spawn), 'coverage': self.coverage,
                'redundancy': self.redundancy,
                'hazard_exposure': self.hazard_exposure,
                'explore_fraction': self.explore_fraction,
                'method': self.method, 'condition': self.condition}


def write_trace(trace, path):
    """One JSON record per line; the summary comes last."""
    with open(path, 'w') as f:
        for record in trace.records:
            f.write(json.dumps(record, sort_keys=True))
            f.write('\n')
        f.write(json.dumps(trace.summary(), sort_keys=True))
        f.write('\n')


def read_trace(path):
    records = []
    with open(path) as f:
        for lineno, line in enumerate(f, 1):
            if not line.strip():
                continue
            try:
                record = json.loads(line)
            except json.JSONDecodeError as e:
                raise TraceError(f"{path}:{lineno}: {e}")
            if not isinstance(record, dict) or 'type' not in record:
                raise TraceError(f"{path}:{lineno}: not a trace record")
            records.append(record)
    if not records or records[-1]['type'] != 'summary':
        raise TraceError(f"{path}: trace has no summary record")
    summary = records.pop()
    if summary.get('version') != TRACE_VERSION:
        raise TraceError(f"{path}: unsupported trace version")
    try:
        trace = EpisodeTrace(
            Task.from_dict(summary['task']), records,
            summary['termination'],
            {int(k): float(v) for k, v in summary['path_length'].items()},
            tuple(summary['spawn']), float(summary['coverage']),
            float(summary['redundancy']), float(summary['hazard_exposure']),
            float(summary['explore_fraction']), summary.get('method', ''),
            summary.get('condition', ''))
    except (KeyError, TypeError, ValueError) as e:
        raise TraceError(f"{path}: bad summary record: {e}")
    if trace.num_steps != summary['steps']:
        raise TraceError(f"{path}: summary counts {summary['steps']} steps,"
                         f" found {trace.num_steps}")
    return trace


def footprint_distance(obj, resolution, x, y):
    """Distance from a point to the union of an object's cell squares."""
    cells = obj.cell_array
    x0 = cells[:, 1] * resolution
    y0 = cells[:, 0] * resolution
    dx = np.maximum(np.maximum(x0 - x, 0.0), x - (x0 + resolution))
    dy = np.maximum(np.maximum(y0 - y, 0.0), y - (y0 + resolution))
    return float(np.hypot(dx, dy).min())


class Agent:
    """Mutable per-robot state."""

    def __init__(self, robot_id, pose):
        self.id = robot_id
        self.pose = pose
        self.alive = True
        self.path_length = 0.0
        self.goal = Goal.hold()
        self.goal_cells = []
        self.field = None
        self.candidate = None
        self.needs_plan = True
        self.visited = set()

    def __repr__(self):
        return f'<Agent {self.id} at ({self.pose.x:.2f}, {self.pose.y:.2f})>'

    def state(self):
        return RobotState(self.id, self.pose, self.alive)

    def set_goal(self, goal, cells):
        self.goal = goal
        self.goal_cells = list(cells)
        self.field = None
        self.needs_plan = False


class Candidate:
    """A believed target location, from the detector."""

    def __init__(self, x, y):
        self.x = x
        self.y = y
        self.pursuer = None
        self.confirmed = None


class Episode:
    """One run of a task; call ``run()`` once."""

    def __init__(self, task, scene, fire_config=None, planner='greedy',
                 params=None, method='', condition=''):
        self.task = task
        self.scene = scene
        self.fire_config = fire_config
        self.params = params or EpisodeParams()
        mapping = self.params.mapping
        if mapping.resolution != scene.resolution:
            mapping = mapping.replace(resolution=scene.resolution)
        self.map_params = mapping
        if isinstance(planner, Planner):
            self.planner = planner
        else:
            self.planner = make_planner(planner, self.params.planner)
        self.method = method or self.planner.name
        self.condition = condition or ('fire' if fire_config is not None
                                       and fire_config.flame_sources
                                       else 'normal')
        if task.target not in scene.categories:
            raise ConfigError(f"{scene.scene_id}: target {task.target!r} is"
                              f" not one of the scene's categories")
        if task.spawn is not None:
            self.spawn = task.spawn
        elif scene.starts:
            self.spawn = tuple(scene.starts[0])
        else:
            raise ConfigError(f"{scene.scene_id}: no start position")
        if not scene.is_free_at(*self.spawn):
            raise ConfigError(f"{scene.scene_id}: spawn {self.spawn} is not"
                              f" on free floor")
        self._warned_about = set()
        self.hazard_map = None
        self.frontiers = []

    def warn(self, about, message, *args):
        """Log a warning once per subject."""
        if about in self._warned_about:
            return
        self._warned_about.add(about)
        logger.warning(message, *args)

    def _note(self, record):
        self.trace.records.append(record)

    def _anomaly(self, tick, agent, kind, message):
        self._note({'type': 'anomaly', 'tick': tick, 'agent': agent,
                    'kind': kind, 'message': message})
        self.warn(kind, "%s: %s (first seen at tick %d, robot %s)",
                  self.task.episode_id or self.scene.scene_id, message,
                  tick, agent)

    def run(self):
        task = self.task
        scene = self.scene
        p = self.params
        self.trace = EpisodeTrace(task, spawn=self.spawn,
                                  explore_fraction=p.explore_fraction,
                                  method=self.method,
                                  condition=self.condition)
        if self.fire_config is not None:
            fire = inject_fire(scene, self.fire_config)
        else:
            fire = no_fire(scene)
        self.accumulator = HazardAccumulator(scene.shape, self.map_params)
        self.agents = [
            Agent(i, Pose(self.spawn[0], self.spawn[1],
                          2 * math.pi * i / task.agents))
            for i in range(task.agents)]
        reachable = reachable_mask(scene, self.spawn)
        reachable_count = max(int(reachable.sum()), 1)
        targets = scene.objects_of(task.target)
        self.detected = set()
        self.approached = set()
        self.candidates = []
        self.dismissed = []
        self.last_replan = None
        self.replans = 0
        hazard = 0.0
        redundant = 0
        robot_steps = 0
        coverage = 0.0

        for tick in range(task.max_steps):
            if self.fire_config is not None:
                fire = step_fire(fire, self.fire_config)
            truth = true_hazard(fire, self.map_params.weights)
            self._sense(fire, tick)
            self.hazard_map = self.accumulator.snapshot()
            self.frontiers = extract_frontiers(
                self.hazard_map, self.map_params.min_frontier_size,
                self.map_params.thresholds)
            self._assign_candidates()
            self._replan(tick)

            robots = []
            for agent in self.agents:
                if not agent.alive:
                    robots.append({'id': agent.id, 'x': agent.pose.x,
                                   'y': agent.pose.y,
                                   'heading': agent.pose.heading,
                                   'action': None, 'moved': 0.0,
                                   'hazard': 0.0, 'alive': False})
                    continue
                action = self._next_action(agent, tick)
                pose, moved = execute_action(scene, agent.pose, action)
                if action is Action.MOVE_FORWARD and not moved:
                    self._bumped(agent)
                agent.pose = pose
                agent.path_length += moved
                cell = scene.cell_of(*pose.position)
                h = float(truth[cell])
                hazard += h
                others = [a for a in self.agents if a is not agent]
                if any(cell in a.visited for a in others):
                    redundant += 1
                robot_steps += 1
                agent.visited.add(cell)
                self._check_approach(agent, targets, tick)
                if h >= p.lethal_hazard:
                    agent.alive = False
                    self._note({'type': 'lost', 'tick': tick,
                                'agent': agent.id, 'hazard': h})
                    logger.info("robot %d lost at tick %d (hazard %.3f)",
                                agent.id, tick, h)
                robots.append({'id': agent.id, 'x': pose.x, 'y': pose.y,
                               'heading': pose.heading,
                               'action': action.value, 'moved': moved,
                               'hazard': h, 'alive': agent.alive})

            seen = self.accumulator.explored & reachable
            coverage = float(seen.sum()) / reachable_count
            self._note({'type': 'step', 'tick': tick, 'coverage': coverage,
                        'robots': robots})
            logger.debug("tick %d: coverage %.3f, %d frontiers", tick,
                         coverage, len(self.frontiers))
            found = len(self.detected & self.approached)
            if found >= task.required_targets \
                    or coverage >= p.explore_fraction:
                self.trace.termination = SUCCESS
                break
            if not any(a.alive for a in self.agents):
                self.trace.termination = ALL_AGENTS_LOST
                break

        self.trace.path_length = {a.id: a.path_length for a in self.agents}
        self.trace.coverage = coverage
        self.trace.redundancy = (redundant / robot_steps if robot_steps
                                 else 0.0)
        self.trace.hazard_exposure = hazard
        logger.info("%s: %s after %d steps", task.episode_id
                    or scene.scene_id, self.trace.termination,
                    self.trace.num_steps)
        return self.trace

    def _sense(self, fire, tick):
        p = self.params
        clouds = []
        for agent in self.agents:
            if not agent.alive:
                continue
            obs = observe(self.scene, fire, agent.pose, p.intrinsics,
                          p.degradation, p.rig, seed=self.task.seed,
                          agent=agent.id, tick=tick)
            fused = fuse_modalities(obs, p.fusion)
            clouds.append(build_local_cloud(
                fused, obs.detections, obs.radar, agent.pose, p.intrinsics,
                p.rig, fire, p.cloud, tick=tick))
            self.accumulator.mark_explored(obs.footprint)
            for det in obs.detections:
                if det.category == self.task.target:
                    self._note_detection(det, agent, tick)
        self.accumulator.add(self._denoise(merge_global(clouds)))

    def _denoise(self, cloud):
        """Drop isolated vision points that would otherwise mark obstacles.

        Floor points only carry hazard and radar echoes are sparse by
        nature, so both bypass the filter.
        """
        if not len(cloud):
            return cloud
        subject = ((cloud.source == VISION)
                   & (cloud.positions[:, 2] > self.map_params.floor_height))
        index = np.flatnonzero(subject)
        if not len(index):
            return cloud
        noise = outlier_mask(cloud.positions[index], self.params.cloud.
                             dbscan_eps, self.params.cloud.dbscan_min_pts)
        keep = np.ones(len(cloud), dtype=bool)
        keep[index[noise]] = False
        return cloud.take(keep)

    def _note_detection(self, det, agent, tick):
        x, y = locate_detection(det, agent.pose, self.params.intrinsics,
                                self.params.rig)
        self._note({'type': 'detection', 'tick': tick, 'agent': agent.id,
                    'category': det.category,
                    'instance_id': det.instance_id,
                    'confidence': det.confidence,
                    'is_false_positive': det.is_false_positive,
                    'x': x, 'y': y})
        if not det.is_false_positive:
            self.detected.add(det.instance_id)
        merge = self.params.candidate_merge
        for px, py in self.dismissed:
            if math.hypot(px - x, py - y) <= merge:
                return
        for cand in self.candidates:
            if math.hypot(cand.x - x, cand.y - y) <= merge:
                return
        if self.scene.in_bounds(x, y):
            self.candidates.append(Candidate(x, y))

    def _assign_candidates(self):
        """Send the nearest free robot to each unpursued candidate."""
        for cand in self.candidates:
            if cand.pursuer is not None:
                continue
            free = [a for a in self.agents
                    if a.alive and a.candidate is None]
            if not free:
                return
            agent = min(free, key=lambda a: (math.hypot(a.pose.x - cand.x,
                                                        a.pose.y - cand.y),
                                             a.id))
            self._pursue(agent, cand, cand.x, cand.y)

    def _pursue(self, agent, cand, x, y):
        cand.pursuer = agent.id
        agent.candidate = cand
        agent.set_goal(Goal.to_point(x, y), [self.scene.cell_of(x, y)])

    def _release(self, agent, dismiss):
        cand = agent.candidate
        agent.candidate = None
        agent.needs_plan = True
        if cand in self.candidates:
            self.candidates.remove(cand)
        if dismiss:
            self.dismissed.append((cand.x, cand.y))

    def _replan(self, tick):
        free = [a for a in self.agents if a.alive and a.candidate is None]
        if not free:
            return
        period = self.params.planner.replan_period
        mask = frontier_mask(self.hazard_map)
        for agent in free:
            if agent.goal.kind == FRONTIER and not any(
                    mask[cell] for cell in agent.goal_cells):
                agent.needs_plan = True
        due = (self.last_replan is None
               or tick - self.last_replan >= period
               or any(a.needs_plan for a in free))
        if not due:
            return
        inp = PlannerInput.gather(self.hazard_map, self.frontiers,
                                  [a.state() for a in free],
                                  self.task.target, self.params.local)
        rng = stream_rng(self.task.seed, 'planner', self.replans)
        assignment = self.planner(inp, rng)
        self.last_replan = tick
        self.replans += 1
        self._note({'type': 'assignment', 'tick': tick,
                    **assignment.to_dict()})
        if assignment.fallback:
            self.warn('fallback', "%s: planner fell back at tick %d: %s",
                      self.task.episode_id or self.scene.scene_id, tick,
                      assignment.rationale)
        for agent in free:
            goal = assignment.goals[agent.id]
            if goal.kind == FRONTIER:
                cells = inp.frontier(goal.frontier).cells
            elif goal.kind == HOLD:
                cells = []
            else:
                cells = [self.hazard_map.cell_of(*goal.point)]
            agent.set_goal(goal, cells)

    def _solve(self, agent):
        lp = self.params.local
        speed = hazard_speed(self.hazard_map, lp.alpha, lp.unknown_factor,
                             lp.inflation)
        cell = self.hazard_map.cell_of(*agent.pose.position)
        speed = speed.reopen([cell] + agent.goal_cells)
        agent.field = solve_fmm(speed, agent.goal_cells, stop_at=[cell])

    def _path(self, agent):
        lp = self.params.local
        if agent.field is None:
            self._solve(agent)
        try:
            return extract_path(agent.field, agent.pose.position,
                                lp.path_step, lp.max_iterations)
        except (PlanningError, GeometryError):
            self._solve(agent)
            return extract_path(agent.field, agent.pose.position,
                                lp.path_step, lp.max_iterations)

    def _next_action(self, agent, tick):
        """Scan in place without a goal, else follow the path one action."""
        if agent.goal.kind == HOLD or not agent.goal_cells:
            return Action.TURN_LEFT
        try:
            path = self._path(agent)
        except (PlanningError, GeometryError) as e:
            self._anomaly(tick, agent.id, type(e).__name__, str(e))
            if agent.candidate is not None:
                self._release(agent, dismiss=True)
            agent.set_goal(Goal.hold(), [])
            agent.needs_plan = True
            return Action.TURN_LEFT
        actions = path_to_actions(path, agent.pose,
                                  self.params.local.goal_tolerance)
        if actions[0] is Action.STOP:
            self._arrived(agent, tick)
        return actions[0]

    def _arrived(self, agent, tick):
        if agent.candidate is None:
            agent.needs_plan = True
            return
        cand = agent.candidate
        x, y = agent.pose.position
        near = [obj for obj in self.scene.objects_of(self.task.target)
                if footprint_distance(obj, self.scene.resolution, x, y)
                <= self.params.candidate_merge]
        if not near:
            self._note({'type': 'approach', 'tick': tick, 'agent': agent.id,
                        'category': self.task.target, 'instance_id': None,
                        'is_false_positive': True})
            self._release(agent, dismiss=True)
            return
        obj = min(near, key=lambda o: (footprint_distance(
            o, self.scene.resolution, x, y), o.instance_id))
        if obj.instance_id in self.approached or cand.confirmed is not None:
            self._release(agent, dismiss=True)
            return
        # close enough to see it: drive onto the middle of its footprint
        cells = obj.cell_array
        middle = cells.mean(axis=0)
        row, col = cells[np.argmin(np.hypot(cells[:, 0] - middle[0],
                                            cells[:, 1] - middle[1]))]
        cand.confirmed = obj.instance_id
        cand.x, cand.y = self.scene.cell_center(int(row), int(col))
        self._pursue(agent, cand, cand.x, cand.y)

    def _check_approach(self, agent, targets, tick):
        x, y = agent.pose.position
        for obj in targets:
            if obj.instance_id in self.approached:
                continue
            if footprint_distance(obj, self.scene.resolution, x, y) \
                    <= self.params.success_radius:
                self.approached.add(obj.instance_id)
                self._note({'type': 'approach', 'tick': tick,
                            'agent': agent.id, 'category': obj.category,
                            'instance_id': obj.instance_id,
                            'is_false_positive': False})
                if agent.candidate is not None and \
                        agent.candidate.confirmed == obj.instance_id:
                    self._release(agent, dismiss=True)

    def _bumped(self, agent):
        pose = agent.pose
        x = pose.x + FORWARD_STEP * math.cos(pose.heading)
        y = pose.y + FORWARD_STEP * math.sin(pose.heading)
        if self.scene.in_bounds(x, y):
            row, col = self.scene.cell_of(x, y)
            self.accumulator.mark_blocked(row, col)
        agent.field = None


def run_episode(task, scene, fire_config=None, planner='greedy',
                params=None, method='', condition=''):
    return Episode(task, scene, fire_config, planner, params, method,
                   condition).run()


def check_success(trace, task=None):
    """Success bit re-derived from the trace records alone."""
    task = task or trace.task
    if trace.termination not in TERMINATIONS:
        raise TraceError(f"unknown termination {trace.termination!r}")
    if trace.num_steps > task.max_steps:
        raise TraceError(f"trace has {trace.num_steps} steps for a budget"
                         f" of {task.max_steps}")
    detected = set()
    approached = set()
    try:
        for record in trace.events('detection'):
            if record['category'] == task.target and \
                    not record['is_false_positive']:
                detected.add(record['instance_id'])
        for record in trace.events('approach'):
            if record['category'] == task.target and \
                    not record['is_false_positive']:
                approached.add(record['instance_id'])
        explored = any(step['coverage'] >= trace.explore_fraction
                       for step in trace.steps)
    except KeyError as e:
        raise TraceError(f"trace record lacks {e}")
    if len(detected & approached) >= task.required_targets or explored:
        return 1
    return 0


def shortest_success_distance(scene, spawn, target):
    """Geodesic meters from the spawn to the nearest target footprint."""
    dist = distance_field(scene, spawn)
    best = math.inf
    for obj in scene.objects_of(target):
        cells = obj.cell_array
        best = min(best, float(dist[cells[:, 0], cells[:, 1]].min()))
    return best


class DistanceOracle:
    """Shortest success distance per trace, from the ground-truth scenes."""

    def __init__(self, scenes):
        self.scenes = scenes
        self._cache = {}

    def __call__(self, trace):
        key = (trace.task.scene_id, tuple(trace.spawn), trace.task.target)
        if key not in self._cache:
            scene = self.scenes[trace.task.scene_id]
            self._cache[key] = shortest_success_distance(
                scene, tuple(trace.spawn), trace.task.target)
        return self._cache[key]


@dataclass(frozen=True)
class Metrics:
    NS: float
    SR: float
    SPL: float
    CHE: float
    episodes: int = 0
    excluded: int = 0

    def to_dict(self):
        return {'NS': self.NS, 'SR': self.SR, 'SPL': self.SPL,
                'CHE': self.CHE, 'episodes': self.episodes,
                'excluded': self.excluded}


def spl_term(success, shortest, executed):
    if not success:
        return 0.0
    longest = max(shortest, executed)
    return shortest / longest if longest > 0 else 1.0


def compute_metrics(traces, oracle):
    """NS, SR, SPL and CHE over a batch.

    ``oracle(trace)`` gives the shortest success distance of a trace's
    episode.  Successful episodes whose target is unreachable are excluded
    with a warning.
    """
    traces = sorted(traces, key=lambda t: t.episode_id)
    if not traces:
        raise TraceError("no traces to evaluate")
    steps, successes, spls, exposure = [], [], [], 0.0
    excluded = 0
    for trace in traces:
        success = check_success(trace)
        shortest = oracle(trace) if success else 0.0
        if success and not math.isfinite(shortest):
            logger.warning("%s: succeeded with an unreachable target;"
                           " excluded", trace.episode_id)
            excluded += 1
            continue
        executed = min(trace.path_length.values(), default=0.0)
        steps.append(trace.num_steps)
        successes.append(success)
        spls.append(spl_term(success, shortest, executed))
        exposure += trace.hazard_exposure
    n = len(steps)
    if not n:
        return Metrics(0.0, 0.0, 0.0, exposure, 0, excluded)
    return Metrics(sum(steps) / n, sum(successes) / n, sum(spls) / n,
                   exposure, n, excluded)


@dataclass(frozen=True)
class Job:
    task: Task
    scene: object
    fire_config: object = None
    planner: str = 'greedy'
    params: EpisodeParams = None
    method: str = ''
    condition: str = ''
    dump: str = None


def run_job(job):
    episode = Episode(job.task, job.scene, job.fire_config, job.planner,
                      job.params, job.method, job.condition)
    trace = episode.run()
    if job.dump and episode.hazard_map is not None:
        write_map(episode.hazard_map, episode.frontiers, job.dump)
    return trace


def run_batch(jobs, workers=None):
    """Run episodes on a thread pool; traces come back by episode id."""
    jobs = list(jobs)
    if workers == 1 or len(jobs) <= 1:
        traces = [run_job(job) for job in jobs]
    else:
        with concurrent.futures.ThreadPoolExecutor(
                max_workers=workers) as executor:
            traces = list(executor.map(run_job, jobs))
    return sorted(traces, key=lambda t: t.episode_id)
