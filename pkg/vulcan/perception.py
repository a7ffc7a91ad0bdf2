"""From degraded observations to hazard-annotated point clouds.

Each point carries the hazard attributes ``(T, S, sigma)``: temperature,
smoke density and sensing uncertainty, all in [0, 1].
"""

import json
import logging
import math
from dataclasses import dataclass

import numpy as np
from scipy import ndimage
from sklearn.cluster import DBSCAN

from vulcan.config import Params, check_non_negative
from vulcan.errors import ConfigError, GeometryError, TraceError
from vulcan.sensors import DEPTH_DROPOUT, SensorRig
from vulcan.world import bilinear


logger = logging.getLogger(__name__)

VISION = 'vision'
RADAR = 'radar'


@dataclass(frozen=True)
class FusionParams(Params):
    kappa_conf: float = math.log(0.87 / 0.15)
    repair_radius: int = 5
    min_valid_neighbors: int = 3

    def __post_init__(self):
        check_non_negative('FusionParams', kappa_conf=self.kappa_conf,
                           repair_radius=self.repair_radius,
                           min_valid_neighbors=self.min_valid_neighbors)


@dataclass(frozen=True)
class CloudParams(Params):
    """Point cloud construction and outlier removal."""

    stride: int = 4
    radar_sigma: float = 0.3
    dbscan_eps: float = 0.10
    dbscan_min_pts: int = 4

    def __post_init__(self):
        if self.stride < 1:
            raise ConfigError("CloudParams: stride must be at least 1")
        if not self.dbscan_eps > 0:
            raise ConfigError("CloudParams: dbscan_eps must be positive")
        if self.dbscan_min_pts < 1:
            raise ConfigError("CloudParams: dbscan_min_pts must be at"
                              " least 1")
        if not 0 <= self.radar_sigma <= 1:
            raise ConfigError("CloudParams: radar_sigma must lie in [0, 1]")


@dataclass(eq=False)
class FusedFrame:
    """A smoke-transparent view of one observation."""

    depth: np.ndarray
    reliability: np.ndarray
    smoke_estimate: np.ndarray
    temperature: np.ndarray
    tick: int = 0
    agent: int = 0

    def __post_init__(self):
        shapes = {self.depth.shape, self.reliability.shape,
                  self.smoke_estimate.shape, self.temperature.shape}
        if len(shapes) != 1:
            raise GeometryError(f"fused frame dimension mismatch: {shapes}")


class Fuser:
    """Interface of fusion operators.

    ``fuse(obs)`` returns a FusedFrame whose reliability lies in [0, 1] and
    is zero wherever the depth is still missing.
    """

    def fuse(self, obs):
        raise NotImplementedError


class RuleBasedFuser(Fuser):
    """Repair depth dropouts from nearby valid depth.

    A missing pixel is filled with the depth of its nearest valid pixel when
    enough valid pixels lie within the repair radius.  Larger holes stay
    empty and get zero reliability.
    """

    def __init__(self, params=None):
        self.params = params or FusionParams()

    def fuse(self, obs):
        shapes = {obs.depth.shape, obs.thermal.shape,
                  obs.smoke_integral.shape, obs.smoke_mean.shape}
        if len(shapes) != 1:
            raise GeometryError(f"observation dimension mismatch: {shapes}")
        p = self.params
        depth = obs.depth.copy()
        valid = depth != DEPTH_DROPOUT
        missing = ~valid
        if missing.any() and valid.any():
            radius = p.repair_radius
            yy, xx = np.mgrid[-radius:radius + 1, -radius:radius + 1]
            disk = (xx ** 2 + yy ** 2 <= radius ** 2).astype(int)
            neighbours = ndimage.convolve(valid.astype(int), disk,
                                          mode='constant', cval=0)
            distance, (rows, cols) = ndimage.distance_transform_edt(
                ~valid, return_indices=True)
            fixable = (missing & (distance <= radius)
                       & (neighbours >= p.min_valid_neighbors))
            depth[fixable] = depth[rows[fixable], cols[fixable]]
            valid = valid | fixable
        reliability = np.exp(-p.kappa_conf * obs.smoke_integral)
        reliability = np.where(valid, np.clip(reliability, 0.0, 1.0), 0.0)
        return FusedFrame(depth=depth, reliability=reliability,
                          smoke_estimate=np.clip(obs.smoke_mean, 0.0, 1.0),
                          temperature=np.clip(obs.thermal, 0.0, 1.0),
                          tick=obs.tick, agent=obs.agent)


def fuse_modalities(obs, params=None, fuser=None):
    fuser = fuser or RuleBasedFuser(params)
    return fuser.fuse(obs)


def back_project(pixel, depth, K):
    """Camera-frame point of a pixel at a given depth.

        >>> from vulcan.sensors import CameraIntrinsics
        >>> back_project((64, 64), 2.0, CameraIntrinsics()).tolist()
        [0.0, 0.0, 2.0]

    """
    u, v = pixel
    if not depth > 0:
        raise GeometryError(f"depth must be positive, got {depth}")
    if not (0 <= u < K.width and 0 <= v < K.height):
        raise GeometryError(f"pixel ({u}, {v}) is outside the image")
    return back_project_pixels(np.array([u]), np.array([v]),
                               np.array([depth], dtype=float), K)[0]


def back_project_pixels(u, v, depth, K):
    """Vectorised ``d * inv(K) @ (u, v, 1)``."""
    u = np.asarray(u, dtype=float)
    v = np.asarray(v, dtype=float)
    depth = np.asarray(depth, dtype=float)
    return np.stack([(u - K.cx) / K.fx * depth,
                     (v - K.cy) / K.fy * depth,
                     depth], axis=-1)


def camera_to_world(points, pose, rig=None):
    rig = rig or SensorRig()
    right, down, forward = pose.camera_axes()
    eye = np.array([pose.x, pose.y, rig.camera_height])
    points = np.asarray(points, dtype=float).reshape(-1, 3)
    return (eye + points[:, :1] * right + points[:, 1:2] * down
            + points[:, 2:] * forward)


def locate_detection(detection, pose, K, rig=None):
    """World (x, y) of the centre of a detection's box at its depth."""
    u0, v0, u1, v1 = detection.box
    centre = back_project_pixels([(u0 + u1) / 2], [(v0 + v1) / 2],
                                 [detection.depth], K)
    x, y, z = camera_to_world(centre, pose, rig)[0]
    return (float(x), float(y))


@dataclass(frozen=True)
class HazardPoint:
    position: tuple
    T: float
    S: float
    sigma: float
    source: str = VISION
    semantic: tuple = None

    def to_dict(self):
        x, y, z = self.position
        data = {'x': x, 'y': y, 'z': z, 'T': self.T, 'S': self.S,
                'sigma': self.sigma, 'source': self.source}
        if self.semantic is not None:
            category, instance_id, confidence = self.semantic
            data['semantic'] = {'category': category,
                                'instance_id': instance_id,
                                'confidence': confidence}
        return data


class HazardCloud:
    """Points stored column-wise.

    ``frame`` is ``'local'`` for a single robot and tick, ``'global'`` for
    the output of ``merge_global``.
    """

    def __init__(self, positions=None, T=None, S=None, sigma=None,
                 source=None, semantic=None, agent=None, tick=None,
                 frame='local'):
        self.positions = (np.zeros((0, 3)) if positions is None
                          else np.asarray(positions, dtype=float)
                          .reshape(-1, 3))
        n = len(self.positions)

        def column(values, fill, dtype):
            if values is None:
                return np.full(n, fill, dtype=dtype)
            values = np.asarray(values, dtype=dtype).reshape(-1)
            if len(values) != n:
                raise GeometryError(
                    f"cloud column has {len(values)} entries for {n} points")
            return values

        self.T = column(T, 0.0, float)
        self.S = column(S, 0.0, float)
        self.sigma = column(sigma, 0.0, float)
        self.source = column(source, VISION, '<U6')
        self.agent = column(agent, 0, int)
        self.tick = column(tick, 0, int)
        self.semantic = list(semantic) if semantic is not None else [None] * n
        if len(self.semantic) != n:
            raise GeometryError("cloud semantic column has the wrong length")
        self.frame = frame

    def __len__(self):
        return len(self.positions)

    def __iter__(self):
        for i in range(len(self)):
            yield self.point(i)

    def __repr__(self):
        return f"<HazardCloud {self.frame}: {len(self)} points>"

    def point(self, i):
        return HazardPoint(tuple(self.positions[i].tolist()),
                           float(self.T[i]), float(self.S[i]),
                           float(self.sigma[i]), str(self.source[i]),
                           self.semantic[i])

    def take(self, index, frame=None):
        index = np.asarray(index)
        if index.dtype == bool:
            index = np.flatnonzero(index)
        return HazardCloud(self.positions[index], self.T[index],
                           self.S[index], self.sigma[index],
                           self.source[index],
                           [self.semantic[i] for i in index.tolist()],
                           self.agent[index], self.tick[index],
                           frame or self.frame)

    @classmethod
    def concatenate(cls, clouds, frame='global'):
        clouds = list(clouds)
        if not clouds:
            return cls(frame=frame)
        semantic = []
        for cloud in clouds:
            semantic.extend(cloud.semantic)
        return cls(np.concatenate([c.positions for c in clouds]),
                   np.concatenate([c.T for c in clouds]),
                   np.concatenate([c.S for c in clouds]),
                   np.concatenate([c.sigma for c in clouds]),
                   np.concatenate([c.source for c in clouds]),
                   semantic,
                   np.concatenate([c.agent for c in clouds]),
                   np.concatenate([c.tick for c in clouds]),
                   frame)


def build_local_cloud(fused, detections, radar, pose, K, rig=None,
                      fire=None, params=None, radar_sigma=None, tick=None):
    """One robot's hazard cloud for one tick.

    Vision points come from every ``stride``-th valid pixel; radar points
    sit at the radar height with a fixed uncertainty and take T and S from
    the fire fields when ``fire`` is given.
    """
    rig = rig or SensorRig()
    params = params or CloudParams()
    if tick is not None and tick != fused.tick:
        raise GeometryError(
            f"tick mismatch: frame from tick {fused.tick}, expected {tick}")
    stride = params.stride
    lattice = np.zeros(fused.depth.shape, dtype=bool)
    lattice[::stride, ::stride] = True
    picked = lattice & (fused.depth != DEPTH_DROPOUT) & (fused.depth > 0)
    v, u = np.nonzero(picked)
    positions = camera_to_world(
        back_project_pixels(u, v, fused.depth[v, u], K), pose, rig)
    T = np.clip(fused.temperature[v, u], 0.0, 1.0)
    S = np.clip(fused.smoke_estimate[v, u], 0.0, 1.0)
    sigma = np.clip(1.0 - fused.reliability[v, u], 0.0, 1.0)
    semantic = [None] * len(u)
    for det in sorted(detections, key=lambda d: d.confidence):
        u0, v0, u1, v1 = det.box
        inside = np.flatnonzero((u >= u0) & (u <= u1) & (v >= v0)
                                & (v <= v1))
        for i in inside.tolist():
            semantic[i] = (det.category, det.instance_id, det.confidence)
    vision = HazardCloud(positions, T, S, sigma, None, semantic,
                         np.full(len(u), fused.agent),
                         np.full(len(u), fused.tick))

    radar = np.asarray(radar, dtype=float).reshape(-1, 2)
    n = len(radar)
    lifted = np.column_stack([radar, np.full(n, rig.radar_height)])
    if fire is not None and n:
        rT = np.clip(bilinear(fire.T, radar[:, 0], radar[:, 1],
                              fire.resolution), 0.0, 1.0)
        rS = np.clip(bilinear(fire.S, radar[:, 0], radar[:, 1],
                              fire.resolution), 0.0, 1.0)
    else:
        rT = rS = np.zeros(n)
    sigma_r = params.radar_sigma if radar_sigma is None else radar_sigma
    echoes = HazardCloud(lifted, rT, rS, np.full(n, sigma_r),
                         np.full(n, RADAR), None,
                         np.full(n, fused.agent), np.full(n, fused.tick))
    return HazardCloud.concatenate([vision, echoes], frame='local')


def merge_global(clouds):
    """Union of local clouds, ordered by (agent, tick, point index)."""
    merged = HazardCloud.concatenate(clouds, frame='global')
    if not len(merged):
        return merged
    order = np.lexsort((merged.tick, merged.agent))
    return merged.take(order, frame='global')


def outlier_mask(positions, eps=0.10, min_pts=4):
    """True for the positions DBSCAN labels as noise."""
    if not eps > 0:
        raise ConfigError(f"eps must be positive, got {eps}")
    if min_pts < 1:
        raise ConfigError(f"min_pts must be at least 1, got {min_pts}")
    positions = np.asarray(positions, dtype=float).reshape(-1, 3)
    if not len(positions):
        return np.zeros(0, dtype=bool)
    labels = DBSCAN(eps=eps, min_samples=min_pts).fit_predict(positions)
    return labels == -1


def filter_outliers(cloud, eps=0.10, min_pts=4):
    """Drop the points DBSCAN labels as noise."""
    kept = ~outlier_mask(cloud.positions, eps, min_pts)
    logger.debug("outlier filter kept %d of %d points", kept.sum(),
                 len(cloud))
    return cloud.take(kept)


def write_cloud(cloud, path):
    """Export a cloud as JSON lines, one point per line."""
    with open(path, 'w') as f:
        for point in cloud:
            f.write(json.dumps(point.to_dict(), sort_keys=True))
            f.write('\n')


def read_cloud(path):
    positions, T, S, sigma, source, semantic = [], [], [], [], [], []
    with open(path) as f:
        for lineno, line in enumerate(f, 1):
            if not line.strip():
                continue
            try:
                data = json.loads(line)
                positions.append((data['x'], data['y'], data['z']))
                T.append(data['T'])
                S.append(data['S'])
                sigma.append(data['sigma'])
                source.append(data['source'])
                sem = data.get('semantic')
                semantic.append(None if sem is None else
                                (sem['category'], sem['instance_id'],
                                 sem['confidence']))
            except (ValueError, KeyError, TypeError) as e:
                raise TraceError(f"{path}:{lineno}: bad cloud point: {e}")
    return HazardCloud(positions if positions else None,
                       T or None, S or None, sigma or None,
                       source or None, semantic or None, frame='global')
