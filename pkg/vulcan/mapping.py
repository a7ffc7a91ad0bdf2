"""2D obstacle and hazard maps, frontiers and frontier risk.

The obstacle channel ``O`` holds ``UNKNOWN``, ``FREE`` or ``OCCUPIED`` per
cell.  Occupancy comes from points above the floor; the hazard channel ``H``
is the weighted combination of the T, S and sigma attributes of every point
that falls in a cell, floor points included, so hazard shows up on the
floor robots drive over.
"""

import json
import logging
import os
from dataclasses import dataclass

import numpy as np
from PIL import Image
from scipy import ndimage

from vulcan.config import Params, check_non_negative
from vulcan.errors import ConfigError, GeometryError, TraceError
from vulcan.world import DEFAULT_RESOLUTION, EIGHT_CONNECTED


logger = logging.getLogger(__name__)

UNKNOWN = -1
FREE = 0
OCCUPIED = 1

SAFE = 'safe'
MODERATE = 'moderate'
DANGEROUS = 'dangerous'
LEVELS = (SAFE, MODERATE, DANGEROUS)


@dataclass(frozen=True)
class HazardWeights(Params):
    """Weights of temperature, smoke and uncertainty; normalized to sum 1."""

    w_T: float = 1 / 3
    w_S: float = 1 / 3
    w_sigma: float = 1 / 3

    def __post_init__(self):
        check_non_negative('HazardWeights', w_T=self.w_T, w_S=self.w_S,
                           w_sigma=self.w_sigma)
        total = self.w_T + self.w_S + self.w_sigma
        if not total > 0:
            raise ConfigError("HazardWeights: at least one weight must be"
                              " positive")
        object.__setattr__(self, 'w_T', self.w_T / total)
        object.__setattr__(self, 'w_S', self.w_S / total)
        object.__setattr__(self, 'w_sigma', self.w_sigma / total)


@dataclass(frozen=True)
class MapParams(Params):
    resolution: float = DEFAULT_RESOLUTION
    origin: tuple = (0.0, 0.0)
    weights: HazardWeights = HazardWeights()
    density_threshold: int = 1
    floor_height: float = 0.1
    normalize: bool = True
    thresholds: tuple = (0.2, 0.5)
    min_frontier_size: int = 5

    def __post_init__(self):
        if not self.resolution > 0:
            raise ConfigError(
                f"MapParams: resolution must be positive, got"
                f" {self.resolution}")
        if self.density_threshold < 1:
            raise ConfigError("MapParams: density_threshold must be at"
                              " least 1")
        if self.min_frontier_size < 1:
            raise ConfigError("MapParams: min_frontier_size must be at"
                              " least 1")
        check_thresholds(self.thresholds)


def check_thresholds(thresholds):
    safe_max, moderate_max = thresholds
    if not 0 <= safe_max <= moderate_max:
        raise ConfigError(
            f"risk thresholds must satisfy 0 <= safe_max <= moderate_max,"
            f" got {tuple(thresholds)}")


@dataclass(eq=False)
class ObstacleHazardMap:
    """Aligned obstacle, hazard and explored channels.

    ``count`` and the ``sum_*`` channels keep the raw per-cell point
    statistics behind ``H``.
    """

    O: np.ndarray
    H: np.ndarray
    explored: np.ndarray
    resolution: float = DEFAULT_RESOLUTION
    origin: tuple = (0.0, 0.0)
    count: np.ndarray = None
    sum_T: np.ndarray = None
    sum_S: np.ndarray = None
    sum_sigma: np.ndarray = None

    def __post_init__(self):
        shape = self.O.shape
        for name in ('count', 'sum_T', 'sum_S', 'sum_sigma'):
            if getattr(self, name) is None:
                setattr(self, name, np.zeros(shape))
        for name in ('H', 'explored', 'count', 'sum_T', 'sum_S',
                     'sum_sigma'):
            if getattr(self, name).shape != shape:
                raise GeometryError(f"map channel {name} is"
                                    f" {getattr(self, name).shape}, expected"
                                    f" {shape}")

    @classmethod
    def blank(cls, shape, resolution=DEFAULT_RESOLUTION, origin=(0.0, 0.0)):
        return cls(np.full(shape, UNKNOWN, dtype=np.int8), np.zeros(shape),
                   np.zeros(shape, dtype=bool), resolution, tuple(origin))

    @property
    def shape(self):
        return self.O.shape

    @property
    def free(self):
        return self.O == FREE

    @property
    def occupied(self):
        return self.O == OCCUPIED

    @property
    def unknown(self):
        return self.O == UNKNOWN

    def cell_of(self, x, y):
        ox, oy = self.origin
        row = int((y - oy) // self.resolution)
        col = int((x - ox) // self.resolution)
        if not (0 <= row < self.shape[0] and 0 <= col < self.shape[1]):
            raise GeometryError(f"({x:.3f}, {y:.3f}) is outside the map")
        return (row, col)

    def cell_center(self, row, col):
        ox, oy = self.origin
        return (ox + (col + 0.5) * self.resolution,
                oy + (row + 0.5) * self.resolution)

    def attribute_means(self, cells):
        """Mean T, S and sigma of the points that landed in ``cells``."""
        cells = np.asarray(cells, dtype=int).reshape(-1, 2)
        rows, cols = cells[:, 0], cells[:, 1]
        n = self.count[rows, cols].sum()
        if n == 0:
            return (0.0, 0.0, 0.0)
        return (float(self.sum_T[rows, cols].sum() / n),
                float(self.sum_S[rows, cols].sum() / n),
                float(self.sum_sigma[rows, cols].sum() / n))


class HazardAccumulator:
    """Incrementally built obstacle-hazard map.

    ``snapshot()`` after adding clouds equals ``project_to_2d`` of their
    union with the same explored mask.
    """

    def __init__(self, shape, params=None):
        self.params = params or MapParams()
        self.shape = tuple(shape)
        self.count = np.zeros(self.shape)
        self.obstacle_count = np.zeros(self.shape)
        self.sum_T = np.zeros(self.shape)
        self.sum_S = np.zeros(self.shape)
        self.sum_sigma = np.zeros(self.shape)
        self.explored = np.zeros(self.shape, dtype=bool)

    def add(self, cloud):
        if not len(cloud):
            return
        p = self.params
        ox, oy = p.origin
        pos = cloud.positions
        cols = np.floor((pos[:, 0] - ox) / p.resolution).astype(int)
        rows = np.floor((pos[:, 1] - oy) / p.resolution).astype(int)
        inside = ((rows >= 0) & (rows < self.shape[0])
                  & (cols >= 0) & (cols < self.shape[1]))
        flat = rows[inside] * self.shape[1] + cols[inside]
        size = self.shape[0] * self.shape[1]

        def binned(weights=None):
            return np.bincount(flat, weights=weights,
                               minlength=size).reshape(self.shape)

        self.count += binned()
        self.sum_T += binned(cloud.T[inside])
        self.sum_S += binned(cloud.S[inside])
        self.sum_sigma += binned(cloud.sigma[inside])
        high = (pos[inside, 2] > p.floor_height).astype(float)
        self.obstacle_count += binned(high)

    def mark_explored(self, mask):
        if mask is not None:
            self.explored |= mask

    def mark_blocked(self, row, col):
        """A robot bumped into this cell; map it as an obstacle."""
        if 0 <= row < self.shape[0] and 0 <= col < self.shape[1]:
            self.obstacle_count[row, col] = max(
                self.obstacle_count[row, col], self.params.density_threshold)

    def snapshot(self):
        p = self.params
        w = p.weights
        occupied = self.obstacle_count >= p.density_threshold
        explored = self.explored | occupied
        O = np.full(self.shape, UNKNOWN, dtype=np.int8)
        O[explored] = FREE
        O[occupied] = OCCUPIED
        total = (w.w_T * self.sum_T + w.w_S * self.sum_S
                 + w.w_sigma * self.sum_sigma)
        if p.normalize:
            with np.errstate(divide='ignore', invalid='ignore'):
                H = np.where(self.count > 0, total / self.count, 0.0)
        else:
            H = np.where(self.count > 0, total, 0.0)
        return ObstacleHazardMap(O, H, explored, p.resolution,
                                 tuple(p.origin), self.count.copy(),
                                 self.sum_T.copy(), self.sum_S.copy(),
                                 self.sum_sigma.copy())


def project_to_2d(cloud, resolution=DEFAULT_RESOLUTION, origin=(0.0, 0.0),
                  weights=None, density_threshold=1, floor_height=0.1,
                  explored=None, shape=None, normalize=True):
    """Top-down obstacle-hazard map of a cloud.

    ``shape`` defaults to the extent of the points.  ``explored`` is the
    ray footprint mask gathered while sensing.
    """
    if not resolution > 0:
        raise ConfigError(f"resolution must be positive, got {resolution}")
    if shape is None:
        if explored is not None:
            shape = explored.shape
        elif len(cloud):
            top = (cloud.positions[:, :2] - np.asarray(origin)).max(axis=0)
            shape = (max(1, int(top[1] // resolution) + 1),
                     max(1, int(top[0] // resolution) + 1))
        else:
            shape = (1, 1)
    params = MapParams(resolution=resolution, origin=tuple(origin),
                       weights=weights or HazardWeights(),
                       density_threshold=density_threshold,
                       floor_height=floor_height, normalize=normalize)
    acc = HazardAccumulator(shape, params)
    acc.add(cloud)
    acc.mark_explored(explored)
    return acc.snapshot()


@dataclass(frozen=True)
class Frontier:
    id: int
    cells: tuple
    centroid: tuple
    size: int
    risk: float
    level: str

    @property
    def cell_array(self):
        return np.array(self.cells, dtype=int).reshape(-1, 2)

    def to_dict(self):
        return {'id': self.id, 'cells': [list(c) for c in self.cells],
                'centroid': list(self.centroid), 'size': self.size,
                'risk': self.risk, 'level': self.level}

    @classmethod
    def from_dict(cls, data):
        return cls(int(data['id']),
                   tuple((int(r), int(c)) for r, c in data['cells']),
                   tuple(float(v) for v in data['centroid']),
                   int(data['size']), float(data['risk']),
                   str(data['level']))


def touching(mask):
    """Cells with a 4-neighbour in ``mask``; the grid edge touches nothing."""
    out = np.zeros(mask.shape, dtype=bool)
    out[1:, :] |= mask[:-1, :]
    out[:-1, :] |= mask[1:, :]
    out[:, 1:] |= mask[:, :-1]
    out[:, :-1] |= mask[:, 1:]
    return out


def frontier_mask(hazard_map):
    return (hazard_map.free & hazard_map.explored
            & touching(hazard_map.unknown)
            & ~touching(hazard_map.occupied))


def extract_frontiers(hazard_map, min_size=5, thresholds=(0.2, 0.5)):
    """Frontier clusters, numbered by their row-major first cell."""
    labels, count = ndimage.label(frontier_mask(hazard_map),
                                  structure=EIGHT_CONNECTED)
    if not count:
        return []
    cells = np.argwhere(labels > 0)
    owner = labels[cells[:, 0], cells[:, 1]]
    order = np.argsort(owner, kind='stable')
    cells, owner = cells[order], owner[order]
    bounds = np.flatnonzero(np.diff(owner)) + 1
    frontiers = []
    for group in np.split(cells, bounds):
        if len(group) < min_size:
            continue
        members = tuple((int(r), int(c)) for r, c in group.tolist())
        centroid = tuple(float(v) for v in np.mean(
            [hazard_map.cell_center(r, c) for r, c in members], axis=0))
        risk = _mean_hazard(hazard_map, group)
        frontiers.append(Frontier(len(frontiers), members, centroid,
                                  len(members), risk,
                                  classify_risk(risk, thresholds)))
    return frontiers


def _mean_hazard(hazard_map, cells):
    return float(hazard_map.H[cells[:, 0], cells[:, 1]].mean())


def score_frontier_risk(hazard_map, frontier):
    """Mean hazard intensity over the frontier's cells."""
    cells = frontier.cell_array if isinstance(frontier, Frontier) \
        else np.asarray(frontier, dtype=int).reshape(-1, 2)
    if not len(cells):
        raise GeometryError("cannot score an empty frontier")
    rows, cols = cells[:, 0], cells[:, 1]
    height, width = hazard_map.shape
    if (rows < 0).any() or (cols < 0).any() or \
            (rows >= height).any() or (cols >= width).any():
        raise GeometryError("frontier cells lie outside the map")
    return _mean_hazard(hazard_map, cells)


def classify_risk(risk, thresholds=(0.2, 0.5)):
    """Risk level with inclusive upper bounds.

        >>> classify_risk(0.5), classify_risk(0.5000001)
        ('moderate', 'dangerous')

    """
    check_thresholds(thresholds)
    safe_max, moderate_max = thresholds
    if risk <= safe_max:
        return SAFE
    if risk <= moderate_max:
        return MODERATE
    return DANGEROUS


HAZARD_LEVELS = 65535


def write_map(hazard_map, frontiers, directory):
    """Dump the map channels as PGM images plus frontier and meta JSON."""
    os.makedirs(directory, exist_ok=True)
    shade = np.full(hazard_map.shape, 128, dtype=np.uint8)
    shade[hazard_map.O == FREE] = 255
    shade[hazard_map.O == OCCUPIED] = 0
    Image.fromarray(shade).save(os.path.join(directory, 'obstacle.pgm'))
    H = hazard_map.H
    scale = max(1.0, float(H.max()) if H.size else 1.0)
    levels = np.round(np.clip(H / scale, 0, 1) * HAZARD_LEVELS)
    Image.fromarray(levels.astype(np.int32)).save(
        os.path.join(directory, 'hazard.pgm'))
    seen = np.where(hazard_map.explored, 255, 0).astype(np.uint8)
    Image.fromarray(seen).save(
        os.path.join(directory, 'explored.pgm'))
    with open(os.path.join(directory, 'frontiers.json'), 'w') as f:
        json.dump([fr.to_dict() for fr in frontiers], f, sort_keys=True,
                  indent=1)
        f.write('\n')
    with open(os.path.join(directory, 'map.json'), 'w') as f:
        json.dump({'resolution': hazard_map.resolution,
                   'origin': list(hazard_map.origin),
                   'hazard_scale': scale}, f, sort_keys=True, indent=1)
        f.write('\n')


def read_map(directory):
    """Load a map dump written by ``write_map``."""
    try:
        with open(os.path.join(directory, 'map.json')) as f:
            meta = json.load(f)
        with open(os.path.join(directory, 'frontiers.json')) as f:
            frontiers = [Frontier.from_dict(d) for d in json.load(f)]
        shade = np.array(Image.open(os.path.join(directory, 'obstacle.pgm')))
        levels = np.array(Image.open(os.path.join(directory, 'hazard.pgm')))
        explored = np.array(Image.open(os.path.join(directory,
                                                    'explored.pgm'))) > 127
    except (ValueError, KeyError, TypeError) as e:
        raise TraceError(f"{directory}: corrupt map dump: {e}")
    O = np.full(shade.shape, UNKNOWN, dtype=np.int8)
    O[shade == 255] = FREE
    O[shade == 0] = OCCUPIED
    H = levels.astype(float) / HAZARD_LEVELS * float(meta['hazard_scale'])
    return ObstacleHazardMap(O, H, explored, float(meta['resolution']),
                             tuple(meta['origin'])), frontiers
