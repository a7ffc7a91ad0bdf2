"""Synthetic sensors with smoke and heat degradation.

The world is 2.5D: walls are vertical slabs ``wall_height`` tall standing on
a floor at z = 0, and there is no ceiling, so rays that clear the wall tops
produce no return.  Every sensor works off a fan of horizontal rays marched
through the occupancy grid; a camera pixel reuses the horizontal ray of its
azimuth and resolves the floor and the wall slab height analytically.

Camera frame: x right, y down, z forward.  Depth images hold z-depth along
the optical axis, with ``DEPTH_DROPOUT`` where a pixel has no return.
"""

import logging
import math
from dataclasses import dataclass

import numpy as np

from vulcan.config import Params, check_non_negative, check_unit_interval
from vulcan.errors import ConfigError, GeometryError
from vulcan.world import bilinear, stream_rng


logger = logging.getLogger(__name__)

TAU = 2 * math.pi
TILT_STEP = math.radians(30)

DEPTH_DROPOUT = 0.0

# pixels whose azimuths agree to this many radians share one horizontal ray
AZIMUTH_QUANTUM = 1e-3

FALSE_POSITIVE_CONFIDENCE = (0.3, 0.8)


def wrap_angle(angle):
    """Wrap an angle to [0, 2pi)."""
    angle = math.fmod(angle, TAU)
    if angle < 0:
        angle += TAU
    if angle >= TAU:
        angle = 0.0
    return angle


@dataclass(frozen=True)
class CameraIntrinsics(Params):
    """Pinhole camera parameters, in pixels."""

    fx: float = 64.0
    fy: float = 64.0
    cx: float = 64.0
    cy: float = 64.0
    width: int = 128
    height: int = 128

    def __post_init__(self):
        if not (self.fx > 0 and self.fy > 0):
            raise ConfigError("CameraIntrinsics: focal lengths must be"
                              " positive")
        if self.width < 1 or self.height < 1:
            raise ConfigError("CameraIntrinsics: empty image")
        if not (0 <= self.cx < self.width and 0 <= self.cy < self.height):
            raise ConfigError("CameraIntrinsics: principal point is outside"
                              " the image")

    @property
    def K(self):
        return np.array([[self.fx, 0.0, self.cx],
                         [0.0, self.fy, self.cy],
                         [0.0, 0.0, 1.0]])

    @property
    def shape(self):
        return (self.height, self.width)

    def project(self, point):
        """Project a camera-frame point to continuous pixel coordinates."""
        x, y, z = point
        if not z > 0:
            raise GeometryError(f"point {point} is behind the camera")
        return (self.fx * x / z + self.cx, self.fy * y / z + self.cy)


@dataclass(frozen=True)
class Pose:
    """Robot position in meters, heading and camera tilt in radians.

    Heading is counterclockwise from +x; tilt is positive looking up and is
    snapped to -30, 0 or +30 degrees.
    """

    x: float
    y: float
    heading: float = 0.0
    tilt: float = 0.0

    def __post_init__(self):
        object.__setattr__(self, 'x', float(self.x))
        object.__setattr__(self, 'y', float(self.y))
        object.__setattr__(self, 'heading', wrap_angle(float(self.heading)))
        steps = max(-1, min(1, round(self.tilt / TILT_STEP)))
        object.__setattr__(self, 'tilt', steps * TILT_STEP)

    @property
    def position(self):
        return (self.x, self.y)

    def camera_axes(self):
        """World directions of the camera's right, down and forward axes."""
        ch, sh = math.cos(self.heading), math.sin(self.heading)
        ct, st = math.cos(self.tilt), math.sin(self.tilt)
        right = np.array([sh, -ch, 0.0])
        down = np.array([st * ch, st * sh, -ct])
        forward = np.array([ct * ch, ct * sh, st])
        return right, down, forward

    def to_dict(self):
        return {'x': self.x, 'y': self.y, 'heading': self.heading,
                'tilt': self.tilt}

    @classmethod
    def from_dict(cls, data):
        return cls(data['x'], data['y'], data.get('heading', 0.0),
                   data.get('tilt', 0.0))


@dataclass(frozen=True)
class DegradationParams(Params):
    """How smoke and heat degrade each modality."""

    kappa_conf: float = math.log(0.87 / 0.15)
    depth_dropout_gain: float = 0.5
    visibility_floor: float = 1.0
    false_positive_rate: float = 0.3
    thermal_saturation: float = 1.0
    radar_noise_base: float = 0.02
    radar_noise_smoke_gain: float = 0.05

    def __post_init__(self):
        check_non_negative(
            'DegradationParams',
            kappa_conf=self.kappa_conf,
            depth_dropout_gain=self.depth_dropout_gain,
            visibility_floor=self.visibility_floor,
            thermal_saturation=self.thermal_saturation,
            radar_noise_base=self.radar_noise_base,
            radar_noise_smoke_gain=self.radar_noise_smoke_gain)
        check_unit_interval('DegradationParams',
                            false_positive_rate=self.false_positive_rate)

    @classmethod
    def off(cls):
        """Parameters that make the sensors a noiseless oracle."""
        return cls(kappa_conf=0.0, depth_dropout_gain=0.0,
                   false_positive_rate=0.0, radar_noise_base=0.0,
                   radar_noise_smoke_gain=0.0)


@dataclass(frozen=True)
class SensorRig(Params):
    """Mounting heights, ranges and detector settings."""

    camera_height: float = 0.88
    max_depth: float = 10.0
    detection_range: float = 5.0
    object_height: float = 0.8
    radar_rays: int = 64
    radar_range: float = 6.0
    radar_height: float = 0.3
    detector_threshold: float = 0.25
    base_confidence: float = 0.87

    def __post_init__(self):
        check_non_negative('SensorRig', camera_height=self.camera_height,
                           object_height=self.object_height,
                           radar_height=self.radar_height)
        for name in ('max_depth', 'detection_range', 'radar_range'):
            if not getattr(self, name) > 0:
                raise ConfigError(f"SensorRig: {name} must be positive")
        if self.radar_rays < 1:
            raise ConfigError("SensorRig: radar_rays must be at least 1")
        check_unit_interval('SensorRig',
                            detector_threshold=self.detector_threshold,
                            base_confidence=self.base_confidence)


@dataclass(frozen=True)
class Detection:
    """One detector output.

    ``is_false_positive`` is simulator bookkeeping; planners never see it.
    ``box`` is ``(u0, v0, u1, v1)`` in pixels, inclusive.
    """

    category: str
    instance_id: object
    confidence: float
    box: tuple
    depth: float
    is_false_positive: bool = False

    def to_dict(self):
        return {'category': self.category, 'instance_id': self.instance_id,
                'confidence': self.confidence, 'box': list(self.box),
                'depth': self.depth,
                'is_false_positive': self.is_false_positive}

    @classmethod
    def from_dict(cls, data):
        return cls(data['category'], data['instance_id'],
                   float(data['confidence']), tuple(data['box']),
                   float(data['depth']), bool(data['is_false_positive']))


@dataclass(eq=False)
class Observation:
    """Everything one robot senses in one tick."""

    depth: np.ndarray
    thermal: np.ndarray
    detections: list
    radar: np.ndarray
    radar_sigma: np.ndarray
    pose: Pose
    tick: int
    smoke_integral: np.ndarray
    smoke_mean: np.ndarray
    footprint: np.ndarray = None
    agent: int = 0


def detection_confidence(smoke_integral, params=None, rig=None):
    """Detector confidence behind a given smoke integral."""
    params = params or DegradationParams()
    rig = rig or SensorRig()
    return rig.base_confidence * np.exp(-params.kappa_conf
                                        * np.asarray(smoke_integral))


def _slab(ox, oy, dx, dy, x_lo, x_hi, y_lo, y_hi, entering):
    with np.errstate(divide='ignore', invalid='ignore'):
        tx1 = (x_lo - ox) / dx
        tx2 = (x_hi - ox) / dx
        ty1 = (y_lo - oy) / dy
        ty2 = (y_hi - oy) / dy
    if entering:
        return np.fmax(np.fmin(tx1, tx2), np.fmin(ty1, ty2))
    return np.fmin(np.fmax(tx1, tx2), np.fmax(ty1, ty2))


class Fan:
    """Horizontal rays marched through the occupancy grid from one point.

    For every ray: ``wall`` is the distance at which it enters the first
    occupied cell (``inf`` when none within reach), ``end`` is where the
    ray stops (wall, grid edge or reach), and ``smoke_cum`` is the running
    smoke integral at sample boundaries.
    """

    def __init__(self, scene, origin, angles, reach, smoke=None):
        res = scene.resolution
        self.shape = scene.shape
        self.angles = np.atleast_1d(np.asarray(angles, dtype=float))
        self.step = step = res / 2.0
        reach = float(min(reach, math.hypot(scene.width, scene.height) * res))
        n = max(1, int(math.ceil(reach / step)))
        self.radii = (np.arange(n) + 0.5) * step
        ox, oy = origin
        dx = np.cos(self.angles)
        dy = np.sin(self.angles)
        xs = ox + dx[:, None] * self.radii
        ys = oy + dy[:, None] * self.radii
        rows = np.floor(ys / res).astype(int)
        cols = np.floor(xs / res).astype(int)
        inside = ((rows >= 0) & (rows < scene.height)
                  & (cols >= 0) & (cols < scene.width))
        blocked = ~inside
        blocked[inside] = scene.occupancy[rows[inside], cols[inside]]
        stop = np.where(blocked.any(axis=1), blocked.argmax(axis=1), n)
        ray = np.arange(len(self.angles))
        k = np.minimum(stop, n - 1)
        hit = (stop < n) & inside[ray, k]
        exited = (stop < n) & ~inside[ray, k]

        self.wall = np.full(len(ray), np.inf)
        self.wall_rows = np.full(len(ray), -1)
        self.wall_cols = np.full(len(ray), -1)
        self.end = np.full(len(ray), reach)
        if hit.any():
            r = rows[ray[hit], k[hit]]
            c = cols[ray[hit], k[hit]]
            enter = _slab(ox, oy, dx[hit], dy[hit], c * res, (c + 1) * res,
                          r * res, (r + 1) * res, entering=True)
            enter = np.clip(enter, 0.0, None)
            near = enter <= reach
            idx = ray[hit][near]
            self.wall[idx] = enter[near]
            self.wall_rows[idx] = r[near]
            self.wall_cols[idx] = c[near]
            self.end[idx] = enter[near]
        if exited.any():
            leave = _slab(ox, oy, dx[exited], dy[exited],
                          0.0, scene.width * res, 0.0, scene.height * res,
                          entering=False)
            self.end[exited] = np.clip(leave, 0.0, reach)

        self.rows = rows
        self.cols = cols
        self.inside = inside
        self.smoke_cum = np.zeros((len(ray), n + 1))
        if smoke is not None:
            values = bilinear(smoke, xs, ys, res)
            values[~inside] = 0.0
            self.smoke_cum[:, 1:] = np.cumsum(values * step, axis=1)

    def __len__(self):
        return len(self.angles)

    def smoke_integral(self, ray, distance):
        """Smoke integral along rays ``ray`` up to horizontal ``distance``."""
        n = len(self.radii)
        pos = np.clip(np.asarray(distance, dtype=float) / self.step, 0, n)
        k = np.minimum(np.floor(pos).astype(int), n - 1)
        frac = pos - k
        lo = self.smoke_cum[ray, k]
        return lo + frac * (self.smoke_cum[ray, k + 1] - lo)

    def covered(self, reach):
        """Grid mask of cells the rays traverse up to ``reach`` per ray."""
        reach = np.broadcast_to(np.asarray(reach, dtype=float), (len(self),))
        mask = np.zeros(self.shape, dtype=bool)
        along = self.inside & (self.radii[None, :] < reach[:, None])
        mask[self.rows[along], self.cols[along]] = True
        seen = np.isfinite(self.wall) & (self.wall <= reach + 1e-9)
        mask[self.wall_rows[seen], self.wall_cols[seen]] = True
        return mask


def check_pose(scene, pose):
    if not scene.is_free_at(pose.x, pose.y):
        raise GeometryError(
            f"{scene.scene_id}: pose ({pose.x:.3f}, {pose.y:.3f}) is inside"
            f" an obstacle or off the grid")


class CameraView:
    """Noise-free ray cast of every camera pixel.

    Holds the true z-depth (``inf`` without a return), the horizontal
    distance of each hit, the surface kind, and the smoke integral and mean
    along every pixel ray.  The degraded images derive from it.
    """

    FLOOR = 1
    WALL = 2

    def __init__(self, scene, fire, pose, K, rig):
        check_pose(scene, pose)
        self.scene = scene
        self.pose = pose
        self.K = K
        self.rig = rig
        right, down, forward = pose.camera_axes()
        u, v = np.meshgrid(np.arange(K.width, dtype=float),
                           np.arange(K.height, dtype=float))
        a = (u - K.cx) / K.fx
        b = (v - K.cy) / K.fy
        D = (a[..., None] * right + b[..., None] * down + forward)
        horizontal = np.hypot(D[..., 0], D[..., 1])
        length = np.linalg.norm(D, axis=-1)
        azimuth = np.arctan2(D[..., 1], D[..., 0])
        key = np.round(azimuth / AZIMUTH_QUANTUM).astype(np.int64)
        keys, inverse = np.unique(key.ravel(), return_inverse=True)
        self.inverse = inverse.reshape(key.shape)
        reach = rig.max_depth * float(horizontal.max())
        self.fan = fan = Fan(scene, pose.position, keys * AZIMUTH_QUANTUM,
                             reach, fire.S)

        flat = np.maximum(horizontal, 1e-12)
        rise = D[..., 2]
        wall = fan.wall[self.inverse]
        end = fan.end[self.inverse]
        with np.errstate(divide='ignore', invalid='ignore'):
            t_wall = wall / flat
            t_floor = np.where(rise < 0, rig.camera_height / -rise, np.inf)
            z_wall = rig.camera_height + t_wall * rise
            t_wall = np.where(np.isfinite(t_wall)
                              & (z_wall <= scene.wall_height), t_wall, np.inf)
        t_floor = np.where(t_floor * flat <= end, t_floor, np.inf)
        t = np.minimum(t_wall, t_floor)
        t = np.where(t <= rig.max_depth, t, np.inf)
        self.valid = np.isfinite(t)
        self.t = t
        self.surface = np.where(~self.valid, 0,
                                np.where(t_wall <= t_floor, self.WALL,
                                         self.FLOOR))
        self.reach = np.where(self.valid, t * flat, end)
        self.reach = np.minimum(self.reach, end)
        self.ratio = length / flat
        integral = fan.smoke_integral(self.inverse, self.reach)
        self.smoke_integral = integral * self.ratio
        with np.errstate(divide='ignore', invalid='ignore'):
            self.smoke_mean = np.where(self.reach > 0,
                                       integral / self.reach, 0.0)
        self.smoke_integral = np.clip(self.smoke_integral, 0.0, None)
        self.smoke_mean = np.clip(self.smoke_mean, 0.0, 1.0)

    def depth(self, params, rng):
        depth = np.where(self.valid, self.t, DEPTH_DROPOUT)
        draws = rng.random(self.t.shape)
        dropped = self.valid & (draws < params.depth_dropout_gain
                                * self.smoke_integral)
        depth[dropped] = DEPTH_DROPOUT
        return depth

    def thermal(self, fire, params):
        res = self.scene.resolution
        sample_at = np.where(self.surface == self.WALL,
                             np.maximum(self.reach - res / 2, 0.0),
                             self.reach)
        angles = self.fan.angles[self.inverse]
        xs = self.pose.x + np.cos(angles) * sample_at
        ys = self.pose.y + np.sin(angles) * sample_at
        T = bilinear(fire.T, xs, ys, res)
        T = np.where(self.valid, T, 0.0)
        return np.clip(T, 0.0, params.thermal_saturation)

    def footprint(self, depth):
        """Cells observed by the pixels that returned depth."""
        returned = depth != DEPTH_DROPOUT
        reach = np.zeros(len(self.fan))
        np.maximum.at(reach, self.inverse[returned], self.reach[returned])
        return self.fan.covered(reach)


def look(scene, fire, pose, K=None, rig=None):
    return CameraView(scene, fire, pose, K or CameraIntrinsics(),
                      rig or SensorRig())


def render_depth(scene, fire, pose, K=None, params=None, rng=None, rig=None):
    """Depth image with smoke-driven dropout."""
    params = params or DegradationParams()
    rng = rng if rng is not None else np.random.default_rng(0)
    return look(scene, fire, pose, K, rig).depth(params, rng)


def render_thermal(scene, fire, pose, K=None, params=None, rig=None):
    """Thermal image; smoke does not attenuate it."""
    params = params or DegradationParams()
    return look(scene, fire, pose, K, rig).thermal(fire, params)


def sense_radar(scene, fire, pose, params=None, rng=None, rig=None,
                with_fan=False):
    """Radar returns as an ``(n, 2)`` array of points plus per-point sigma.

    Rays that reach no wall within range return nothing; smoke only widens
    the range noise.
    """
    check_pose(scene, pose)
    params = params or DegradationParams()
    rig = rig or SensorRig()
    rng = rng if rng is not None else np.random.default_rng(0)
    angles = pose.heading + TAU * np.arange(rig.radar_rays) / rig.radar_rays
    fan = Fan(scene, pose.position, angles, rig.radar_range, fire.S)
    noise = rng.standard_normal(len(fan))
    hit = np.isfinite(fan.wall)
    ray = np.flatnonzero(hit)
    distance = fan.wall[hit]
    with np.errstate(divide='ignore', invalid='ignore'):
        mean = np.where(distance > 0,
                        fan.smoke_integral(ray, distance) / distance, 0.0)
    sigma = params.radar_noise_base + params.radar_noise_smoke_gain * mean
    measured = np.clip(distance + noise[hit] * sigma, 0.0, rig.radar_range)
    points = np.stack([pose.x + np.cos(fan.angles[hit]) * measured,
                       pose.y + np.sin(fan.angles[hit]) * measured], axis=1)
    if with_fan:
        return points, sigma, fan
    return points, sigma


def _object_points(obj, resolution, rig):
    cells = obj.cell_array
    xs = (cells[:, 1] + 0.5) * resolution
    ys = (cells[:, 0] + 0.5) * resolution
    heights = np.array([0.1, rig.object_height / 2, rig.object_height])
    return np.stack([np.repeat(xs, len(heights)),
                     np.repeat(ys, len(heights)),
                     np.tile(heights, len(xs))], axis=1)


def detect(view, params, rng):
    """Detections for a camera view; see ``simulate_detections``."""
    scene, pose, K, rig = view.scene, view.pose, view.K, view.rig
    right, down, forward = pose.camera_axes()
    eye = np.array([pose.x, pose.y, rig.camera_height])
    found = []
    for obj in scene.objects:
        rel = _object_points(obj, scene.resolution, rig) - eye
        z = rel @ forward
        rel, z = rel[z > 1e-6], z[z > 1e-6]
        if not len(z):
            continue
        u = np.round(K.fx * (rel @ right) / z + K.cx).astype(int)
        v = np.round(K.fy * (rel @ down) / z + K.cy).astype(int)
        framed = (u >= 0) & (u < K.width) & (v >= 0) & (v < K.height)
        if not framed.any():
            continue
        rel, z, u, v = rel[framed], z[framed], u[framed], v[framed]
        ray = view.inverse[v, u]
        distance = np.maximum(np.hypot(rel[:, 0], rel[:, 1]), 1e-9)
        unblocked = distance <= view.fan.wall[ray] + 1e-9
        flat_integral = view.fan.smoke_integral(ray, distance)
        integral = flat_integral * np.linalg.norm(rel, axis=1) / distance
        mean = np.clip(flat_integral / distance, 0.0, 1.0)
        visible_range = np.maximum(params.visibility_floor,
                                   rig.detection_range * (1.0 - mean))
        seen = unblocked & (distance <= visible_range)
        if not seen.any():
            continue
        confidence = float(detection_confidence(integral[seen].min(),
                                                params, rig))
        if confidence < rig.detector_threshold:
            logger.debug("missed %s #%d at confidence %.3f", obj.category,
                         obj.instance_id, confidence)
            continue
        box = (int(u[seen].min()), int(v[seen].min()),
               int(u[seen].max()), int(v[seen].max()))
        found.append(Detection(obj.category, obj.instance_id, confidence,
                               box, float(np.median(z[seen]))))

    chance = params.false_positive_rate * float(view.smoke_mean.mean())
    if rng.random() < min(chance, 1.0) and view.valid.any():
        category = scene.categories[int(rng.integers(len(scene.categories)))]
        confidence = float(rng.uniform(*FALSE_POSITIVE_CONFIDENCE))
        pixels = np.argwhere(view.valid)
        v, u = pixels[int(rng.integers(len(pixels)))].tolist()
        box = (max(u - 4, 0), max(v - 4, 0),
               min(u + 4, K.width - 1), min(v + 4, K.height - 1))
        if confidence >= rig.detector_threshold:
            found.append(Detection(category, None, confidence, box,
                                   float(view.t[v, u]), True))
    return found


def simulate_detections(scene, fire, pose, K=None, params=None, rng=None,
                        rig=None):
    """Detector output: visible objects with smoke-extinguished confidence.

    An object is seen when some point of it projects into the image, lies
    in front of the first wall along its pixel ray and within visibility
    range.  Confidence decays exponentially with the smoke integral of the
    clearest line of sight; objects below the detector threshold are
    missed.  Smoky frames may add one false positive.
    """
    params = params or DegradationParams()
    rng = rng if rng is not None else np.random.default_rng(0)
    return detect(look(scene, fire, pose, K, rig), params, rng)


def observe(scene, fire, pose, K=None, params=None, rig=None, seed=0,
            agent=0, tick=0):
    """Run every sensor of one robot for one tick.

    Each modality draws from its own random stream keyed by
    ``(seed, agent, tick)``.
    """
    params = params or DegradationParams()
    rig = rig or SensorRig()
    view = look(scene, fire, pose, K, rig)
    depth = view.depth(params, stream_rng(seed, 'depth', agent, tick))
    thermal = view.thermal(fire, params)
    detections = detect(view, params, stream_rng(seed, 'detect', agent, tick))
    radar, sigma, fan = sense_radar(scene, fire, pose, params,
                                    stream_rng(seed, 'radar', agent, tick),
                                    rig, with_fan=True)
    footprint = view.footprint(depth)
    footprint |= fan.covered(np.where(np.isfinite(fan.wall), fan.wall,
                                      fan.end))
    return Observation(depth=depth, thermal=thermal, detections=detections,
                       radar=radar, radar_sigma=sigma, pose=pose, tick=tick,
                       smoke_integral=view.smoke_integral,
                       smoke_mean=view.smoke_mean, footprint=footprint,
                       agent=agent)
