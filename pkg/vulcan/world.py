"""Static scenes, fire dynamics and ground-truth geometry.

A scene is an occupancy grid in the x/y plane.  Arrays are indexed
``[row, col]``; world point ``(x, y)`` in meters lies in cell
``(floor(y / resolution), floor(x / resolution))`` and cell centres sit at
``((col + 0.5) * resolution, (row + 0.5) * resolution)``.

Temperature and smoke are normalized scalar fields in [0, 1] that evolve by
explicit diffusion on the free cells, with flame cells as sources.
"""

import json
import logging
import math
import os
import zlib
from dataclasses import dataclass
from functools import cached_property

import numpy as np
from scipy import ndimage
from scipy.sparse import coo_matrix
from scipy.sparse.csgraph import dijkstra

from vulcan.config import Params, check_unit_interval
from vulcan.errors import (
    ConfigError,
    GeometryError,
    SceneFormatError,
    SceneValidationError,
)


logger = logging.getLogger(__name__)

FORMAT_VERSION = 1
DEFAULT_RESOLUTION = 0.05
DEFAULT_WALL_HEIGHT = 2.5
DEFAULT_CATEGORIES = ('chair', 'sofa', 'plant', 'bed', 'toilet', 'tv')

# explicit 5-point scheme is stable up to this diffusivity
MAX_DIFFUSIVITY = 0.25

EIGHT_CONNECTED = np.ones((3, 3), dtype=bool)


def stream_rng(seed, name, *keys):
    """Return a generator for the named random stream.

    Streams with different names never share state, so toggling one
    feature does not shift the random numbers another feature sees.
    """
    return np.random.default_rng(
        [int(seed), zlib.crc32(name.encode('ascii')), *map(int, keys)])


@dataclass(frozen=True)
class ObjectInstance:
    """A semantic object lying on the floor."""

    category: str
    cells: tuple
    instance_id: int

    @property
    def cell_array(self):
        return np.array(self.cells, dtype=int).reshape(-1, 2)


@dataclass(frozen=True, eq=False)
class Scene:
    """A static grid world."""

    scene_id: str
    width: int
    height: int
    occupancy: np.ndarray
    resolution: float = DEFAULT_RESOLUTION
    wall_height: float = DEFAULT_WALL_HEIGHT
    objects: tuple = ()
    starts: tuple = ()
    categories: tuple = DEFAULT_CATEGORIES
    fire_sources: tuple = ()

    def __repr__(self):
        return (f"<Scene {self.scene_id}: {self.width}x{self.height},"
                f" {len(self.objects)} objects>")

    @property
    def free(self):
        return ~self.occupancy

    @property
    def shape(self):
        return (self.height, self.width)

    def in_bounds(self, x, y):
        return (0 <= x < self.width * self.resolution
                and 0 <= y < self.height * self.resolution)

    def cell_of(self, x, y):
        """Return the (row, col) cell containing world point (x, y)."""
        if not self.in_bounds(x, y):
            raise GeometryError(
                f"{self.scene_id}: position ({x:.3f}, {y:.3f}) is outside"
                f" the grid")
        return (int(y // self.resolution), int(x // self.resolution))

    def cell_center(self, row, col):
        return ((col + 0.5) * self.resolution, (row + 0.5) * self.resolution)

    def is_free_at(self, x, y):
        if not self.in_bounds(x, y):
            return False
        return not self.occupancy[self.cell_of(x, y)]

    def objects_of(self, category):
        return [obj for obj in self.objects if obj.category == category]

    def validate(self):
        """Check the scene invariants, raising SceneValidationError."""
        sid = self.scene_id
        if self.width < 1 or self.height < 1:
            raise SceneValidationError(f"{sid}: empty grid")
        if not self.resolution > 0:
            raise SceneValidationError(f"{sid}: resolution must be positive")
        if not self.wall_height > 0:
            raise SceneValidationError(
                f"{sid}: wall_height must be positive")
        if self.occupancy.shape != self.shape:
            raise SceneValidationError(
                f"{sid}: occupancy is {self.occupancy.shape}, expected"
                f" {self.shape}")
        seen = set()
        for obj in self.objects:
            where = f"{sid}: object {obj.instance_id} ({obj.category})"
            if obj.instance_id in seen:
                raise SceneValidationError(f"{where}: duplicate instance_id")
            seen.add(obj.instance_id)
            if obj.category not in self.categories:
                raise SceneValidationError(f"{where}: undeclared category")
            if not obj.cells:
                raise SceneValidationError(f"{where}: empty footprint")
            mask = np.zeros(self.shape, dtype=bool)
            for row, col in obj.cells:
                if not (0 <= row < self.height and 0 <= col < self.width):
                    raise SceneValidationError(
                        f"{where}: cell ({row}, {col}) is off the grid")
                if self.occupancy[row, col]:
                    raise SceneValidationError(
                        f"{where}: cell ({row}, {col}) is not on free floor")
                mask[row, col] = True
            if ndimage.label(mask, structure=EIGHT_CONNECTED)[1] != 1:
                raise SceneValidationError(
                    f"{where}: footprint is not connected")
        for x, y in self.starts:
            if not self.is_free_at(x, y):
                raise SceneValidationError(
                    f"{sid}: start ({x}, {y}) is not on free floor")
        for row, col, intensity in self.fire_sources:
            if not (0 <= row < self.height and 0 <= col < self.width) \
                    or self.occupancy[row, col]:
                raise SceneValidationError(
                    f"{sid}: fire source ({row}, {col}) is not on free floor")
        return self

    @cached_property
    def _graph(self):
        """8-connected free-space graph; diagonals may not cut corners."""
        free = self.free
        W = self.width
        index = np.arange(self.height * W).reshape(self.shape)
        step = self.resolution
        diag = math.sqrt(2.0) * self.resolution
        rows, cols, weights = [], [], []

        def link(a, b, ok, weight):
            rows.append(a[ok])
            cols.append(b[ok])
            weights.append(np.full(int(ok.sum()), weight))

        link(index[:, :-1], index[:, 1:], free[:, :-1] & free[:, 1:], step)
        link(index[:-1, :], index[1:, :], free[:-1, :] & free[1:, :], step)
        corner = free[:-1, :-1] & free[1:, 1:] & free[:-1, 1:] & free[1:, :-1]
        link(index[:-1, :-1], index[1:, 1:], corner, diag)
        link(index[:-1, 1:], index[1:, :-1], corner, diag)
        n = self.height * W
        return coo_matrix(
            (np.concatenate(weights), (np.concatenate(rows),
                                       np.concatenate(cols))),
            shape=(n, n)).tocsr()


def encode_occupancy(occupancy):
    """Run-length encode a boolean grid.

    Runs alternate and start with free (False) cells:

        >>> encode_occupancy(np.array([[True, True, False, False, False]]))
        '0 2 3'

    """
    bits = np.asarray(occupancy, dtype=bool).ravel()
    if bits.size == 0:
        return ''
    changes = np.flatnonzero(bits[1:] != bits[:-1]) + 1
    runs = np.diff(np.concatenate([[0], changes, [bits.size]])).tolist()
    if bits[0]:
        runs.insert(0, 0)
    return ' '.join(map(str, runs))


def decode_occupancy(text, width, height):
    try:
        runs = [int(token) for token in text.split()]
    except (AttributeError, ValueError):
        raise SceneFormatError(f"bad occupancy encoding: {text!r:.40}")
    if any(run < 0 for run in runs) or sum(runs) != width * height:
        raise SceneFormatError(
            f"occupancy encodes {sum(runs)} cells, expected"
            f" {width * height}")
    values = np.arange(len(runs)) % 2 == 1
    return np.repeat(values, runs).reshape(height, width)


def scene_from_dict(data):
    if not isinstance(data, dict):
        raise SceneFormatError("scene must be a JSON object")
    if data.get('format_version') != FORMAT_VERSION:
        raise SceneFormatError(
            f"unsupported format_version {data.get('format_version')!r}")
    try:
        width = int(data['width'])
        height = int(data['height'])
        occupancy = decode_occupancy(data['occupancy'], width, height)
        objects = tuple(
            ObjectInstance(str(obj['category']),
                           tuple((int(r), int(c)) for r, c in obj['cells']),
                           int(obj['instance_id']))
            for obj in data.get('objects', ()))
        return Scene(
            scene_id=str(data['scene_id']),
            width=width,
            height=height,
            occupancy=occupancy,
            resolution=float(data.get('resolution', DEFAULT_RESOLUTION)),
            wall_height=float(data.get('wall_height', DEFAULT_WALL_HEIGHT)),
            objects=objects,
            starts=tuple((float(x), float(y)) for x, y in data['starts']),
            categories=tuple(data.get('categories', DEFAULT_CATEGORIES)),
            fire_sources=tuple((int(r), int(c), float(i))
                               for r, c, i in data.get('fire_sources', ())),
        )
    except KeyError as e:
        raise SceneFormatError(f"scene is missing field {e}")
    except (TypeError, ValueError) as e:
        if isinstance(e, SceneFormatError):
            raise
        raise SceneFormatError(f"malformed scene: {e}")


def scene_to_dict(scene):
    data = {
        'format_version': FORMAT_VERSION,
        'scene_id': scene.scene_id,
        'width': scene.width,
        'height': scene.height,
        'resolution': scene.resolution,
        'wall_height': scene.wall_height,
        'occupancy': encode_occupancy(scene.occupancy),
        'objects': [{'category': obj.category,
                     'cells': [[int(r), int(c)] for r, c in obj.cells],
                     'instance_id': obj.instance_id}
                    for obj in scene.objects],
        'starts': [[float(x), float(y)] for x, y in scene.starts],
        'categories': list(scene.categories),
    }
    if scene.fire_sources:
        data['fire_sources'] = [[int(r), int(c), float(i)]
                                for r, c, i in scene.fire_sources]
    return data


def load_scene(path):
    """Load and validate a scene file.

    ``path`` may also name a bundled scene such as ``apartment_small``.
    """
    if not os.path.exists(path):
        from vulcan.scenes import BUNDLED_SCENES, bundled_scene
        if path in BUNDLED_SCENES:
            return bundled_scene(path)
    with open(path) as f:
        try:
            data = json.load(f)
        except json.JSONDecodeError as e:
            raise SceneFormatError(f"{path}: {e}")
    try:
        return scene_from_dict(data).validate()
    except SceneFormatError as e:
        raise SceneFormatError(f"{path}: {e}")


def save_scene(scene, path):
    """Write a scene as canonical JSON.

    The file is replaced in one step, so a failure leaves no partial scene.
    """
    text = json.dumps(scene_to_dict(scene), sort_keys=True, indent=1) + '\n'
    tmp = path + '.tmp'
    try:
        with open(tmp, 'w') as f:
            f.write(text)
        os.replace(tmp, path)
    finally:
        if os.path.exists(tmp):
            os.remove(tmp)


@dataclass(frozen=True)
class FireConfig(Params):
    """Fire sources and field dynamics.

    ``flame_sources`` holds ``(row, col, intensity)`` triples; intensity
    scales the smoke a source emits.
    """

    flame_sources: tuple = ()
    smoke_diffusivity: float = 0.2
    smoke_decay: float = 0.01
    smoke_emission: float = 0.2
    temperature_diffusivity: float = 0.15
    temperature_decay: float = 0.02
    ambient_temperature: float = 0.0
    peak_temperature: float = 1.0
    spread_probability: float = 0.0
    seed: int = 0

    def __post_init__(self):
        object.__setattr__(self, 'flame_sources', tuple(
            (int(r), int(c), float(i)) for r, c, i in self.flame_sources))
        check_unit_interval(
            'FireConfig',
            smoke_diffusivity=self.smoke_diffusivity,
            smoke_decay=self.smoke_decay,
            smoke_emission=self.smoke_emission,
            temperature_diffusivity=self.temperature_diffusivity,
            temperature_decay=self.temperature_decay,
            ambient_temperature=self.ambient_temperature,
            peak_temperature=self.peak_temperature,
            spread_probability=self.spread_probability)
        for name in ('smoke_diffusivity', 'temperature_diffusivity'):
            if getattr(self, name) > MAX_DIFFUSIVITY:
                raise ConfigError(
                    f"FireConfig: {name} above {MAX_DIFFUSIVITY} makes the"
                    f" explicit scheme unstable")
        if self.seed < 0:
            raise ConfigError("FireConfig: seed must be non-negative")

    def to_dict(self):
        data = super().to_dict()
        data['format_version'] = FORMAT_VERSION
        return data

    @classmethod
    def from_dict(cls, data):
        if isinstance(data, dict) and 'format_version' in data:
            data = dict(data)
            if data.pop('format_version') != FORMAT_VERSION:
                raise SceneFormatError("unsupported fire config version")
        return super().from_dict(data)


def load_fire_config(path):
    with open(path) as f:
        try:
            data = json.load(f)
        except json.JSONDecodeError as e:
            raise SceneFormatError(f"{path}: {e}")
    return FireConfig.from_dict(data)


@dataclass(eq=False)
class FireState:
    """Temperature and smoke fields plus the burning cells."""

    T: np.ndarray
    S: np.ndarray
    flames: np.ndarray
    free: np.ndarray
    resolution: float = DEFAULT_RESOLUTION
    tick: int = 0

    @property
    def shape(self):
        return self.T.shape

    def flame_cells(self):
        return [tuple(cell) for cell in np.argwhere(self.flames).tolist()]

    def same_as(self, other):
        """Bit-for-bit equality of two states."""
        return (self.tick == other.tick
                and np.array_equal(self.T, other.T)
                and np.array_equal(self.S, other.S)
                and np.array_equal(self.flames, other.flames))


FIRE_PRESETS = {
    'light': dict(sources=1, smoke_emission=0.1, spread_probability=0.0),
    'moderate': dict(sources=2, smoke_emission=0.2, spread_probability=0.0),
    'heavy': dict(sources=3, smoke_emission=0.35, spread_probability=0.002),
}


def _check_sources(shape, free, config):
    for row, col, intensity in config.flame_sources:
        if not (0 <= row < shape[0] and 0 <= col < shape[1]):
            raise ConfigError(f"flame source ({row}, {col}) is off the grid")
        if not free[row, col]:
            raise ConfigError(
                f"flame source ({row}, {col}) is on an occupied cell")
        if intensity < 0:
            raise ConfigError(
                f"flame source ({row}, {col}) has negative intensity")


def inject_fire(scene, config):
    """Return the fire state at tick 0."""
    free = scene.free
    _check_sources(scene.shape, free, config)
    T = np.full(scene.shape, config.ambient_temperature)
    T[scene.occupancy] = 0.0
    flames = np.zeros(scene.shape, dtype=bool)
    for row, col, intensity in config.flame_sources:
        flames[row, col] = True
    T[flames] = config.peak_temperature
    return FireState(T=T, S=np.zeros(scene.shape), flames=flames,
                     free=free.copy(), resolution=scene.resolution, tick=0)


def no_fire(scene):
    return inject_fire(scene, FireConfig())


def diffuse(values, free, rate):
    """One explicit diffusion step with zero flux across walls and edges."""
    out = values.copy()
    pair = free[1:, :] & free[:-1, :]
    flux = rate * (values[1:, :] - values[:-1, :]) * pair
    out[:-1, :] += flux
    out[1:, :] -= flux
    pair = free[:, 1:] & free[:, :-1]
    flux = rate * (values[:, 1:] - values[:, :-1]) * pair
    out[:, :-1] += flux
    out[:, 1:] -= flux
    return out


def _emission_map(flames, config):
    emission = np.where(flames, config.smoke_emission, 0.0)
    for row, col, intensity in config.flame_sources:
        if flames[row, col]:
            emission[row, col] = config.smoke_emission * intensity
    return emission


def step_fire(state, config):
    """Advance the fire by one tick and return the new state."""
    free = state.free
    flames = state.flames
    if config.spread_probability > 0 and flames.any():
        burning = flames.astype(int)
        neighbours = np.zeros(flames.shape, dtype=int)
        neighbours[1:, :] += burning[:-1, :]
        neighbours[:-1, :] += burning[1:, :]
        neighbours[:, 1:] += burning[:, :-1]
        neighbours[:, :-1] += burning[:, 1:]
        p_ignite = 1.0 - (1.0 - config.spread_probability) ** neighbours
        draws = stream_rng(config.seed, 'flame', state.tick).random(
            flames.shape)
        flames = flames | (free & (draws < p_ignite) & (neighbours > 0))

    S = diffuse(state.S, free, config.smoke_diffusivity)
    S += _emission_map(flames, config)
    S *= 1.0 - config.smoke_decay
    np.clip(S, 0.0, 1.0, out=S)

    ambient = config.ambient_temperature
    T = diffuse(state.T, free, config.temperature_diffusivity)
    T = ambient + (T - ambient) * (1.0 - config.temperature_decay)
    T[flames] = config.peak_temperature
    T[~free] = 0.0
    np.clip(T, 0.0, 1.0, out=T)
    return FireState(T=T, S=S, flames=flames, free=free,
                     resolution=state.resolution, tick=state.tick + 1)


def bilinear(values, xs, ys, resolution):
    """Sample a cell-centred grid at world points (clamped at the edges)."""
    xs = np.asarray(xs, dtype=float)
    ys = np.asarray(ys, dtype=float)
    coords = np.stack([ys.ravel() / resolution - 0.5,
                       xs.ravel() / resolution - 0.5])
    samples = ndimage.map_coordinates(values, coords, order=1, mode='nearest')
    return samples.reshape(xs.shape)


def sample_fields(state, position):
    """Bilinear temperature and smoke at a world position."""
    x, y = position
    height, width = state.shape
    res = state.resolution
    if not (0 <= x <= width * res and 0 <= y <= height * res):
        raise GeometryError(f"position ({x:.3f}, {y:.3f}) is outside the"
                            f" fire grid")
    T = bilinear(state.T, x, y, res)
    S = bilinear(state.S, x, y, res)
    return float(T), float(S)


def _free_cell(scene, point, what):
    x, y = point
    try:
        cell = scene.cell_of(x, y)
    except GeometryError:
        raise GeometryError(f"{what} ({x:.3f}, {y:.3f}) is outside the grid")
    if scene.occupancy[cell]:
        raise GeometryError(f"{what} ({x:.3f}, {y:.3f}) is inside an obstacle")
    return cell


def distance_field(scene, a):
    """Geodesic distance in meters from point ``a`` to every cell."""
    row, col = _free_cell(scene, a, 'source')
    dist = dijkstra(scene._graph, directed=False,
                    indices=row * scene.width + col)
    return dist.reshape(scene.shape)


def reachable_mask(scene, a):
    return np.isfinite(distance_field(scene, a))


def ground_truth_distance(scene, a, b):
    """Length of the shortest 8-connected obstacle-free path, in meters.

    Returns ``math.inf`` when the endpoints are disconnected.
    """
    cell_a = _free_cell(scene, a, 'endpoint')
    cell_b = _free_cell(scene, b, 'endpoint')
    if cell_a == cell_b:
        return 0.0
    dist = distance_field(scene, a)[cell_b]
    return float(dist) if np.isfinite(dist) else math.inf


def place_fire(scene, preset, seed, spawn=None, keep_clear=1.5):
    """Pick flame sources for a scene that does not ship its own.

    Sources land on free floor reachable from ``spawn`` but at least
    ``keep_clear`` meters away from it, and never on an object.
    """
    if scene.fire_sources:
        return FireConfig(flame_sources=scene.fire_sources, seed=seed)
    try:
        knobs = FIRE_PRESETS[preset]
    except KeyError:
        raise ConfigError(f"unknown fire level {preset!r}")
    candidates = scene.free.copy()
    if spawn is not None:
        dist = distance_field(scene, spawn)
        candidates &= np.isfinite(dist) & (dist >= keep_clear)
    for obj in scene.objects:
        cells = obj.cell_array
        candidates[cells[:, 0], cells[:, 1]] = False
    cells = np.argwhere(candidates)
    if len(cells) == 0:
        logger.warning("%s: no room for flame sources", scene.scene_id)
        return FireConfig(seed=seed)
    rng = stream_rng(seed, 'fire-placement')
    count = min(knobs['sources'], len(cells))
    picked = sorted(rng.choice(len(cells), size=count, replace=False))
    sources = tuple((int(cells[i][0]), int(cells[i][1]), 1.0)
                    for i in picked)
    return FireConfig(flame_sources=sources,
                      smoke_emission=knobs['smoke_emission'],
                      spread_probability=knobs['spread_probability'],
                      seed=seed)


def true_hazard(fire, weights):
    """Ground-truth hazard intensity from the exact fields.

    Uses the temperature and smoke weights of ``weights`` renormalized over
    the two of them; exact fields carry no sensing uncertainty.
    """
    total = weights.w_T + weights.w_S
    if total <= 0:
        return np.zeros(fire.shape)
    return (weights.w_T * fire.T + weights.w_S * fire.S) / total
