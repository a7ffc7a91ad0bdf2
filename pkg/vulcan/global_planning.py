"""Long-term frontier goals for the team.

Every planner takes a ``PlannerInput`` and returns an ``Assignment`` with an
entry for every alive robot.  The baselines are plain functions; the
vision-language planner talks to a backend through one text-in/text-out
call and falls back to risk-filtered cost-utility when the answer is
unusable.
"""

import base64
import io
import json
import logging
import math
import os
import re
from dataclasses import dataclass, field

import jsonschema
import numpy as np
import requests

from vulcan.config import Params, check_non_negative
from vulcan.errors import (
    BackendError,
    ConfigError,
    InvalidGoal,
    MalformedResponse,
    MissingRobot,
    PlanningError,
    ResponseError,
    UnknownFrontier,
    UnknownRobot,
)
from vulcan.local_planning import LocalPlannerParams, hazard_speed, solve_fmm
from vulcan.mapping import DANGEROUS, LEVELS, check_thresholds
from vulcan.render import prompt_image


logger = logging.getLogger(__name__)

SCHEMA_VERSION = 1
SCHEMA_PATH = os.path.join(os.path.dirname(__file__),
                           'hazard_report.schema.json')

FRONTIER = 'frontier'
POINT = 'point'
HOLD = 'hold'

PLANNERS = ('greedy', 'cost_utility', 'random', 'vlm_mock',
            'vlm_mock_blind', 'vlm_http')


@dataclass(frozen=True)
class PlannerParams(Params):
    cost_lambda: float = 0.5
    replan_period: int = 25
    fallback_radius: float = 2.0
    retries: int = 1
    timeout: float = 30.0
    thresholds: tuple = (0.2, 0.5)

    def __post_init__(self):
        check_non_negative('PlannerParams', cost_lambda=self.cost_lambda,
                           fallback_radius=self.fallback_radius,
                           retries=self.retries)
        if self.replan_period < 1:
            raise ConfigError("PlannerParams: replan_period must be at"
                              " least 1")
        if not self.timeout > 0:
            raise ConfigError("PlannerParams: timeout must be positive")
        check_thresholds(self.thresholds)


@dataclass(frozen=True)
class Goal:
    kind: str
    frontier: int = None
    point: tuple = None

    @classmethod
    def to_frontier(cls, frontier_id):
        return cls(FRONTIER, frontier=int(frontier_id))

    @classmethod
    def to_point(cls, x, y):
        return cls(POINT, point=(float(x), float(y)))

    @classmethod
    def hold(cls):
        return cls(HOLD)

    def to_dict(self):
        data = {'kind': self.kind}
        if self.kind == FRONTIER:
            data['frontier'] = self.frontier
        elif self.kind == POINT:
            data['point'] = list(self.point)
        return data

    @classmethod
    def from_dict(cls, data):
        kind = data['kind']
        if kind == FRONTIER:
            return cls.to_frontier(data['frontier'])
        if kind == POINT:
            return cls.to_point(*data['point'])
        return cls.hold()


@dataclass
class Assignment:
    """Goal per alive robot plus the reasoning behind it."""

    goals: dict
    rationale: str = ''
    planner: str = ''
    fallback: bool = False

    def to_dict(self):
        return {'goals': {str(rid): goal.to_dict()
                          for rid, goal in sorted(self.goals.items())},
                'rationale': self.rationale, 'planner': self.planner,
                'fallback': self.fallback}

    @classmethod
    def from_dict(cls, data):
        return cls({int(rid): Goal.from_dict(goal)
                    for rid, goal in data['goals'].items()},
                   data.get('rationale', ''), data.get('planner', ''),
                   bool(data.get('fallback', False)))


@dataclass(frozen=True)
class RobotState:
    id: int
    pose: object
    alive: bool = True


@dataclass(eq=False)
class PlannerInput:
    """What a planner sees at one planning step.

    ``distances[robot_id][frontier_id]`` is the geodesic distance in meters,
    ``inf`` when the frontier cannot be reached.
    """

    hazard_map: object
    frontiers: list
    robots: list
    target: str
    distances: dict = field(default_factory=dict)

    def __post_init__(self):
        ids = [f.id for f in self.frontiers]
        if len(set(ids)) != len(ids):
            raise PlanningError(f"duplicate frontier ids in {sorted(ids)}")
        self.frontiers = sorted(self.frontiers, key=lambda f: f.id)
        self.robots = sorted(self.robots, key=lambda r: r.id)

    @classmethod
    def gather(cls, hazard_map, frontiers, robots, target, params=None):
        """Build an input, measuring distances with the unit-cost solver."""
        distances = robot_distances(hazard_map, frontiers, robots, params)
        return cls(hazard_map, list(frontiers), list(robots), target,
                   distances)

    @property
    def alive(self):
        return [r for r in self.robots if r.alive]

    @property
    def frontier_ids(self):
        return {f.id for f in self.frontiers}

    def frontier(self, frontier_id):
        for f in self.frontiers:
            if f.id == frontier_id:
                return f
        raise KeyError(frontier_id)

    def distance(self, robot_id, frontier_id):
        return self.distances.get(robot_id, {}).get(frontier_id, math.inf)

    def reachable(self, robot_id, frontiers=None):
        frontiers = self.frontiers if frontiers is None else frontiers
        return [f for f in frontiers
                if math.isfinite(self.distance(robot_id, f.id))]


def robot_distances(hazard_map, frontiers, robots, params=None):
    """Geodesic distance from each alive robot to each frontier.

    Solved at zero hazard weight; the distance to a frontier is the
    smallest arrival value over its cells.
    """
    params = params or LocalPlannerParams()
    distances = {}
    if not frontiers:
        return {r.id: {} for r in robots if r.alive}
    speed = hazard_speed(hazard_map, alpha=0.0,
                         unknown_factor=params.unknown_factor,
                         inflation=params.inflation)
    goal_cells = [cell for f in frontiers for cell in f.cells]
    for robot in robots:
        if not robot.alive:
            continue
        try:
            cell = hazard_map.cell_of(*robot.pose.position)
            reopened = speed.reopen([cell] + goal_cells)
            field = solve_fmm(reopened, [cell], stop_at=goal_cells)
        except (PlanningError, ValueError) as e:
            logger.debug("robot %d cannot measure distances: %s", robot.id,
                         e)
            distances[robot.id] = {f.id: math.inf for f in frontiers}
            continue
        distances[robot.id] = {
            f.id: float(field.time[f.cell_array[:, 0],
                                   f.cell_array[:, 1]].min())
            for f in frontiers}
    return distances


def _claiming(inp, score, frontiers=None, fallback=False, name=''):
    """Robots in id order take their best unclaimed reachable frontier.

    ``score(robot, frontier)`` is maximized; ties go to the lower id.
    """
    claimed = set()
    goals = {}
    for robot in inp.alive:
        options = [f for f in inp.reachable(robot.id, frontiers)
                   if f.id not in claimed]
        if not options:
            goals[robot.id] = Goal.hold()
            continue
        best = max(options, key=lambda f: (score(robot, f), -f.id))
        claimed.add(best.id)
        goals[robot.id] = Goal.to_frontier(best.id)
    return Assignment(goals, planner=name, fallback=fallback)


def plan_greedy(inp):
    assignment = _claiming(inp, lambda r, f: -inp.distance(r.id, f.id),
                           name='greedy')
    assignment.rationale = 'nearest unclaimed frontier per robot'
    return assignment


def plan_cost_utility(inp, cost_lambda=0.5, frontiers=None, fallback=False):
    """Maximize ``size - cost_lambda * distance`` with id-order claiming."""
    assignment = _claiming(
        inp, lambda r, f: f.size - cost_lambda * inp.distance(r.id, f.id),
        frontiers=frontiers, fallback=fallback, name='cost_utility')
    assignment.rationale = (f'cost-utility, lambda={cost_lambda:g} per'
                            f' meter')
    return assignment


def plan_random(inp, rng):
    goals = {}
    for robot in inp.alive:
        options = inp.reachable(robot.id)
        if not options:
            goals[robot.id] = Goal.hold()
        else:
            pick = options[int(rng.integers(len(options)))]
            goals[robot.id] = Goal.to_frontier(pick.id)
    return Assignment(goals, 'uniform sample of reachable frontiers',
                      'random')


@dataclass(eq=False)
class PromptBundle:
    image: object
    system_text: str
    hazard_report: dict
    schema_version: int = SCHEMA_VERSION

    def image_png(self):
        buffer = io.BytesIO()
        self.image.save(buffer, format='PNG')
        return buffer.getvalue()

    def request_body(self):
        return {'schema_version': self.schema_version,
                'system': self.system_text,
                'image': base64.b64encode(self.image_png()).decode('ascii'),
                'hazard_report': self.hazard_report}


SYSTEM_TEMPLATE = """\
You coordinate {count} robots searching a burning building for a {target}.
The image is a top-down map: black cells are walls, white cells are explored
floor, gray cells are unexplored and red tint marks heat and smoke.  Blue
circles are robots and green crosses are candidate frontiers, each labelled
with its number.  The JSON hazard report lists every frontier's size, smoke
density, temperature, severity and confidence.
Spread the robots over different frontiers and keep them out of dangerous
ones.
Answer with a single JSON object mapping every robot id (a string) to a
frontier id (a number), for example {example}.
"""

_schema = None


def hazard_report_schema():
    global _schema
    if _schema is None:
        with open(SCHEMA_PATH) as f:
            _schema = json.load(f)
    return _schema


def validate_report(report):
    """Raise ConfigError unless ``report`` matches the shipped schema."""
    try:
        jsonschema.validate(instance=report, schema=hazard_report_schema())
    except jsonschema.ValidationError as e:
        raise ConfigError(f"hazard report does not match the schema:"
                          f" {e.message}")
    return report


def hazard_report(inp):
    def number(value):
        return None if not math.isfinite(value) else round(float(value), 6)

    robots = []
    for robot in inp.alive:
        x, y = robot.pose.position
        entry = {'id': robot.id, 'x': float(x), 'y': float(y)}
        if robot.id in inp.distances:
            entry['distances'] = {str(f.id): number(inp.distance(robot.id,
                                                                 f.id))
                                  for f in inp.frontiers}
        robots.append(entry)
    frontiers = []
    for f in inp.frontiers:
        T, S, sigma = inp.hazard_map.attribute_means(f.cells)
        frontiers.append({
            'id': f.id, 'cx': float(f.centroid[0]),
            'cy': float(f.centroid[1]), 'size': f.size,
            'smoke': float(np.clip(S, 0, 1)),
            'temperature': float(np.clip(T, 0, 1)),
            'severity': f.level,
            'confidence': float(np.clip(1.0 - sigma, 0, 1))})
    return {'schema_version': SCHEMA_VERSION, 'target': inp.target,
            'robots': robots, 'frontiers': frontiers}


def build_prompt(inp, target=None):
    target = inp.target if target is None else target
    report = hazard_report(inp)
    report['target'] = target
    validate_report(report)
    image = prompt_image(
        inp.hazard_map,
        [(r.id, r.pose.x, r.pose.y) for r in inp.alive], inp.frontiers)
    example = json.dumps({str(r.id): 0 for r in inp.alive})
    text = SYSTEM_TEMPLATE.format(count=len(inp.alive), target=target,
                                  example=example)
    return PromptBundle(image, text, report)


def _unique_keys(pairs):
    answer = {}
    for key, value in pairs:
        if key in answer:
            raise MalformedResponse(f"duplicate key {key!r} in response")
        answer[key] = value
    return answer


def _first_object(text):
    """The first JSON object embedded in ``text``."""
    if not isinstance(text, str):
        raise MalformedResponse(f"response is not text: {text!r}")
    decoder = json.JSONDecoder(object_pairs_hook=_unique_keys)
    start = text.find('{')
    while start != -1:
        try:
            value, _ = decoder.raw_decode(text, start)
        except json.JSONDecodeError:
            value = None
        if isinstance(value, dict):
            return value
        start = text.find('{', start + 1)
    raise MalformedResponse(f"no JSON object in response: {text[:80]!r}")


def parse_vlm_response(text, inp):
    """Turn a model answer into a complete Assignment.

    Raises a ResponseError subclass on the first problem found; a partial
    assignment is never returned.
    """
    answer = _first_object(text)
    known = {r.id for r in inp.robots}
    goals = {}
    for key, value in answer.items():
        if not re.fullmatch(r'[0-9]+', key) or int(key) not in known:
            raise UnknownRobot(f"unknown robot id {key!r}")
        if isinstance(value, bool) or not isinstance(value, int):
            raise InvalidGoal(f"robot {key}: frontier id must be an"
                              f" integer, got {value!r}")
        if value not in inp.frontier_ids:
            raise UnknownFrontier(f"robot {key}: no frontier {value}")
        goals[int(key)] = Goal.to_frontier(value)
    missing = sorted(r.id for r in inp.alive if r.id not in goals)
    if missing:
        raise MissingRobot(f"no goal for robots {missing}")
    return Assignment({rid: goals[rid] for rid in sorted(goals)
                       if rid in {r.id for r in inp.alive}},
                      planner='vlm')


def mock_vlm(prompt, hazard_aware=True, cost_lambda=0.5):
    """Deterministic stand-in for the planning model.

    Reads only the hazard report.  Robots in id order pick the frontier
    with the best risk level, preferring ones nobody took yet, then the
    best ``size - cost_lambda * distance``.  The hazard-blind variant
    ignores severities.
    """
    report = prompt.hazard_report
    frontiers = sorted(report['frontiers'], key=lambda f: f['id'])
    taken = set()
    answer = {}
    for robot in sorted(report['robots'], key=lambda r: r['id']):
        known = robot.get('distances')
        options = []
        for f in frontiers:
            if known is not None:
                d = known.get(str(f['id']))
                if d is None:
                    continue
            else:
                d = math.hypot(f['cx'] - robot['x'], f['cy'] - robot['y'])
            rank = LEVELS.index(f['severity']) if hazard_aware else 0
            options.append(((rank == 2, f['id'] in taken, rank,
                             -(f['size'] - cost_lambda * d), f['id']),
                            f['id']))
        if not options:
            # nothing reachable: least severe frontier, nearest by sight
            options = [((LEVELS.index(f['severity']) if hazard_aware else 0,
                         math.hypot(f['cx'] - robot['x'],
                                    f['cy'] - robot['y']), f['id']),
                        f['id']) for f in frontiers]
        if options:
            choice = min(options)[1]
            taken.add(choice)
            answer[str(robot['id'])] = choice
    return json.dumps(answer, sort_keys=True)


class MockBackend:

    def __init__(self, hazard_aware=True, cost_lambda=0.5):
        self.hazard_aware = hazard_aware
        self.cost_lambda = cost_lambda

    def complete(self, prompt):
        return mock_vlm(prompt, self.hazard_aware, self.cost_lambda)


class HttpBackend:
    """POST the prompt to a model endpoint and return its text answer."""

    def __init__(self, url=None, token=None, timeout=30.0, session=None):
        self.url = url or os.environ.get('VULCAN_VLM_URL')
        self.token = token or os.environ.get('VULCAN_VLM_TOKEN')
        if not self.url:
            raise ConfigError("no VLM endpoint: set VULCAN_VLM_URL")
        self.timeout = timeout
        self.session = session or requests.Session()

    def complete(self, prompt):
        headers = {}
        if self.token:
            headers['Authorization'] = f'Bearer {self.token}'
        try:
            response = self.session.post(self.url,
                                         json=prompt.request_body(),
                                         headers=headers,
                                         timeout=self.timeout)
            response.raise_for_status()
        except requests.RequestException as e:
            raise BackendError(f"{self.url}: {e}")
        try:
            body = response.json()
        except ValueError:
            return response.text
        if isinstance(body, dict) and isinstance(body.get('text'), str):
            return body['text']
        return response.text


def fallback_point(hazard_map, pose, radius=2.0, params=None):
    """The least hazardous explored free cell within ``radius`` meters.

    Ties go to the nearer cell, then row-major order.  Returns the robot's
    own position when nothing qualifies.
    """
    params = params or LocalPlannerParams()
    speed = hazard_speed(hazard_map, alpha=0.0,
                         unknown_factor=params.unknown_factor, inflation=0)
    try:
        cell = hazard_map.cell_of(*pose.position)
        field = solve_fmm(speed.reopen([cell]), [cell], limit=radius)
    except (PlanningError, ValueError):
        return pose.position
    candidates = (np.isfinite(field.time) & hazard_map.explored
                  & hazard_map.free)
    cells = np.argwhere(candidates)
    if not len(cells):
        return pose.position
    rows, cols = cells[:, 0], cells[:, 1]
    best = np.lexsort((field.time[rows, cols], hazard_map.H[rows, cols]))[0]
    return hazard_map.cell_center(int(rows[best]), int(cols[best]))


def fallback_assignment(inp, params, reason):
    goals = {}
    for robot in inp.alive:
        goals[robot.id] = Goal.to_point(*fallback_point(
            inp.hazard_map, robot.pose, params.fallback_radius))
    return Assignment(goals, f'fallback points: {reason}', 'fallback', True)


def plan_vlm(inp, backend, params=None, hazard_aware=True):
    """Ask the backend, retry, then fall back; never raises on bad answers."""
    params = params or PlannerParams()
    if not inp.frontiers:
        return fallback_assignment(inp, params, 'no frontiers')
    allowed = [f for f in inp.frontiers
               if not hazard_aware or f.level != DANGEROUS]
    if not allowed:
        return fallback_assignment(inp, params, 'every frontier dangerous')
    prompt = build_prompt(inp)
    for attempt in range(1 + params.retries):
        try:
            assignment = parse_vlm_response(backend.complete(prompt), inp)
        except (BackendError, ResponseError) as e:
            logger.warning("planner response %d unusable: %s", attempt + 1,
                           e)
            continue
        assignment.rationale = f'model answer (attempt {attempt + 1})'
        return assignment
    assignment = plan_cost_utility(inp, params.cost_lambda, allowed,
                                   fallback=True)
    assignment.rationale = ('backend failed; ' + assignment.rationale
                            + ' over non-dangerous frontiers')
    for robot in inp.alive:
        if assignment.goals[robot.id].kind == HOLD:
            assignment.goals[robot.id] = Goal.to_point(*fallback_point(
                inp.hazard_map, robot.pose, params.fallback_radius))
    return assignment


class Planner:
    """A named planner; call it with a PlannerInput and a random stream."""

    def __init__(self, name, params=None, backend=None):
        if name not in PLANNERS:
            raise ConfigError(f"unknown planner {name!r}; choose from"
                              f" {', '.join(PLANNERS)}")
        self.name = name
        self.params = params or PlannerParams()
        self.hazard_aware = name != 'vlm_mock_blind'
        if backend is None and name in ('vlm_mock', 'vlm_mock_blind'):
            backend = MockBackend(self.hazard_aware, self.params.cost_lambda)
        elif backend is None and name == 'vlm_http':
            backend = HttpBackend(timeout=self.params.timeout)
        self.backend = backend

    def __repr__(self):
        return f'<Planner {self.name}>'

    def __call__(self, inp, rng=None):
        if self.name == 'greedy':
            assignment = plan_greedy(inp)
        elif self.name == 'cost_utility':
            assignment = plan_cost_utility(inp, self.params.cost_lambda)
        elif self.name == 'random':
            if rng is None:
                raise ConfigError("the random planner needs a random stream")
            assignment = plan_random(inp, rng)
        else:
            assignment = plan_vlm(inp, self.backend, self.params,
                                  self.hazard_aware)
        if not assignment.planner or assignment.planner == 'vlm':
            assignment.planner = self.name
        check_assignment(assignment, inp)
        return assignment


def make_planner(name, params=None, backend=None):
    return Planner(name, params, backend)


def check_assignment(assignment, inp):
    """Every alive robot has a goal and frontier goals exist."""
    for robot in inp.alive:
        goal = assignment.goals.get(robot.id)
        if goal is None:
            raise PlanningError(f"{assignment.planner}: robot {robot.id}"
                                f" has no goal")
        if goal.kind == FRONTIER and goal.frontier not in inp.frontier_ids:
            raise PlanningError(f"{assignment.planner}: robot {robot.id}"
                                f" sent to missing frontier"
                                f" {goal.frontier}")
    return assignment
