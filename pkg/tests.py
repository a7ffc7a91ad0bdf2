import contextlib
import heapq
import io
import json
import logging
import math
import os
import shutil
import tempfile
import unittest
from unittest import mock

import numpy as np
import requests

from vulcan.cli import (
    RunConfig,
    build_parser,
    layered_config,
    main,
    merge_rows,
    read_metrics_csv,
)
from vulcan.config import Params
from vulcan.episode import (
    ALL_AGENTS_LOST,
    BUDGET_EXHAUSTED,
    SUCCESS,
    Episode,
    EpisodeParams,
    EpisodeTrace,
    Job,
    Task,
    check_success,
    compute_metrics,
    read_trace,
    run_batch,
    run_episode,
    shortest_success_distance,
    spl_term,
    write_trace,
)
from vulcan.errors import (
    BackendError,
    ConfigError,
    GeometryError,
    PlanningError,
    SceneFormatError,
    SceneValidationError,
    TraceError,
    UnreachableError,
)
from vulcan.global_planning import (
    FRONTIER,
    PLANNERS,
    POINT,
    Assignment,
    Goal,
    HttpBackend,
    MockBackend,
    PlannerInput,
    PlannerParams,
    RobotState,
    build_prompt,
    check_assignment,
    make_planner,
    plan_cost_utility,
    plan_greedy,
    plan_vlm,
    robot_distances,
    validate_report,
)
from vulcan.local_planning import (
    Action,
    ArrivalField,
    LocalPlannerParams,
    SpeedField,
    execute_action,
    extract_path,
    hazard_speed,
    path_to_actions,
    solve_fmm,
)
from vulcan.mapping import (
    FREE,
    OCCUPIED,
    UNKNOWN,
    Frontier,
    HazardAccumulator,
    HazardWeights,
    MapParams,
    ObstacleHazardMap,
    classify_risk,
    extract_frontiers,
    project_to_2d,
    read_map,
    score_frontier_risk,
    write_map,
)
from vulcan.perception import (
    RADAR,
    HazardCloud,
    back_project,
    back_project_pixels,
    build_local_cloud,
    camera_to_world,
    fuse_modalities,
    locate_detection,
    merge_global,
    outlier_mask,
    read_cloud,
    write_cloud,
)
from vulcan.render import (
    arrival_image,
    layer_pixels,
    map_image,
    save_image,
    trajectories_image,
)
from vulcan.scenes import bundled_scene, generate_scene, scene_from_ascii
from vulcan.sensors import (
    DEPTH_DROPOUT,
    TILT_STEP,
    CameraIntrinsics,
    DegradationParams,
    Detection,
    Observation,
    Pose,
    detection_confidence,
    observe,
    render_depth,
    render_thermal,
    sense_radar,
    simulate_detections,
)
from vulcan.world import (
    DEFAULT_CATEGORIES,
    FireConfig,
    ObjectInstance,
    Scene,
    decode_occupancy,
    distance_field,
    ground_truth_distance,
    inject_fire,
    load_scene,
    no_fire,
    place_fire,
    sample_fields,
    save_scene,
    scene_from_dict,
    step_fire,
    true_hazard,
)


ROOM = """\
##########
#........#
#.S...cc.#
#.....cc.#
#........#
##########
"""

SPAWN = (0.625, 0.625)


def room():
    return scene_from_ascii('room', ROOM)


def smoky(scene, smoke=0.5, temperature=0.0):
    fire = no_fire(scene)
    fire.S = np.where(scene.free, smoke, 0.0)
    fire.T = np.where(scene.free, temperature, 0.0)
    return fire


def open_map(shape, resolution=0.05):
    hazard_map = ObstacleHazardMap.blank(shape, resolution)
    hazard_map.O[:] = FREE
    hazard_map.explored[:] = True
    return hazard_map


def half_explored_map():
    """Free explored left half, unknown right half."""
    hazard_map = ObstacleHazardMap.blank((20, 20))
    hazard_map.O[:, :10] = FREE
    hazard_map.explored[:, :10] = True
    return hazard_map


def dijkstra_oracle(free, resolution, start):
    """Textbook Dijkstra over 8 neighbours; diagonals need both sides."""
    height, width = free.shape
    dist = np.full(free.shape, np.inf)
    dist[start] = 0.0
    heap = [(0.0, start)]
    while heap:
        d, (r, c) = heapq.heappop(heap)
        if d > dist[r, c]:
            continue
        for dr in (-1, 0, 1):
            for dc in (-1, 0, 1):
                if not (dr or dc):
                    continue
                nr, nc = r + dr, c + dc
                if not (0 <= nr < height and 0 <= nc < width):
                    continue
                if not free[nr, nc]:
                    continue
                if dr and dc and not (free[r, nc] and free[nr, c]):
                    continue
                step = resolution * (math.sqrt(2) if dr and dc else 1.0)
                if d + step < dist[nr, nc]:
                    dist[nr, nc] = d + step
                    heapq.heappush(heap, (d + step, (nr, nc)))
    return dist


def four_neighbour_oracle(F, h, goals):
    """Dijkstra over 4 neighbours; entering a cell costs ``h / F``."""
    height, width = F.shape
    dist = np.full(F.shape, np.inf)
    heap = []
    for goal in goals:
        dist[goal] = 0.0
        heap.append((0.0, goal))
    heapq.heapify(heap)
    while heap:
        d, (r, c) = heapq.heappop(heap)
        if d > dist[r, c]:
            continue
        for nr, nc in ((r - 1, c), (r + 1, c), (r, c - 1), (r, c + 1)):
            if not (0 <= nr < height and 0 <= nc < width):
                continue
            if F[nr, nc] <= 0:
                continue
            step = d + h / F[nr, nc]
            if step < dist[nr, nc]:
                dist[nr, nc] = step
                heapq.heappush(heap, (step, (nr, nc)))
    return dist


class TempDirMixin:

    def setUp(self):
        super().setUp()
        self.tmpdir = tempfile.mkdtemp(prefix='test-vulcan-')
        self.addCleanup(shutil.rmtree, self.tmpdir)

    def path(self, *names):
        return os.path.join(self.tmpdir, *names)


class TestParams(unittest.TestCase):

    def test_from_dict_nested(self):
        params = EpisodeParams.from_dict({'local': {'alpha': 0},
                                          'lethal_hazard': 0.5})
        self.assertEqual(params.local.alpha, 0.0)
        self.assertIsInstance(params.local.alpha, float)
        self.assertEqual(params.lethal_hazard, 0.5)
        self.assertEqual(params.rig, EpisodeParams().rig)

    def test_from_dict_rejects_unknown_keys(self):
        with self.assertRaises(ConfigError):
            EpisodeParams.from_dict({'local': {'alpah': 1.0}})

    def test_from_dict_rejects_bool_for_int(self):
        with self.assertRaises(ConfigError):
            LocalPlannerParams.from_dict({'inflation': True})

    def test_from_dict_rejects_strings_for_numbers(self):
        with self.assertRaises(ConfigError):
            LocalPlannerParams.from_dict({'alpha': '5'})

    def test_to_dict_round_trips(self):
        params = EpisodeParams().replace(lethal_hazard=0.7)
        self.assertEqual(EpisodeParams.from_dict(params.to_dict()), params)

    def test_hazard_weights_normalized(self):
        weights = HazardWeights(2.0, 1.0, 1.0)
        self.assertAlmostEqual(weights.w_T, 0.5)
        self.assertAlmostEqual(weights.w_T + weights.w_S + weights.w_sigma,
                               1.0)

    def test_hazard_weights_all_zero(self):
        with self.assertRaises(ConfigError):
            HazardWeights(0.0, 0.0, 0.0)

    def test_thresholds_must_be_ordered(self):
        with self.assertRaises(ConfigError):
            MapParams(thresholds=(0.6, 0.5))

    def test_params_is_a_mixin(self):
        self.assertTrue(issubclass(EpisodeParams, Params))


class TestScene(unittest.TestCase):

    def test_decode_occupancy_wrong_count(self):
        with self.assertRaises(SceneFormatError):
            decode_occupancy('1 2', 2, 2)

    def test_decode_occupancy_garbage(self):
        with self.assertRaises(SceneFormatError):
            decode_occupancy('one two', 1, 3)

    def test_decode_occupancy(self):
        grid = decode_occupancy('0 2 3', 5, 1)
        self.assertEqual(grid.tolist(),
                         [[True, True, False, False, False]])

    def make_scene(self, objects, categories=DEFAULT_CATEGORIES):
        occupancy = np.zeros((4, 4), dtype=bool)
        occupancy[0, :] = True
        return Scene('tiny', 4, 4, occupancy, objects=tuple(objects),
                     categories=categories)

    def test_validate_object_on_wall(self):
        scene = self.make_scene([ObjectInstance('chair', ((0, 0),), 0)])
        with self.assertRaises(SceneValidationError):
            scene.validate()

    def test_validate_disconnected_footprint(self):
        scene = self.make_scene([ObjectInstance('chair',
                                                ((1, 1), (3, 3)), 0)])
        with self.assertRaises(SceneValidationError):
            scene.validate()

    def test_validate_undeclared_category(self):
        scene = self.make_scene([ObjectInstance('lamp', ((1, 1),), 0)])
        with self.assertRaises(SceneValidationError):
            scene.validate()

    def test_validate_duplicate_instance(self):
        scene = self.make_scene([ObjectInstance('chair', ((1, 1),), 0),
                                 ObjectInstance('sofa', ((3, 3),), 0)])
        with self.assertRaises(SceneValidationError):
            scene.validate()

    def test_diagonal_footprint_is_connected(self):
        scene = self.make_scene([ObjectInstance('chair',
                                                ((1, 1), (2, 2)), 0)])
        self.assertIs(scene.validate(), scene)

    def test_scene_from_dict_missing_field(self):
        with self.assertRaises(SceneFormatError):
            scene_from_dict({'format_version': 1, 'scene_id': 'x'})

    def test_scene_from_dict_wrong_version(self):
        with self.assertRaises(SceneFormatError):
            scene_from_dict({'format_version': 99})

    def test_ascii_rows_must_match(self):
        with self.assertRaises(ConfigError):
            scene_from_ascii('bad', '###\n##\n')

    def test_generate_scene(self):
        scene = generate_scene('gen', 3, 0)
        self.assertTrue(scene.objects)
        self.assertTrue(scene.starts)
        self.assertTrue({o.category for o in scene.objects}
                        <= set(DEFAULT_CATEGORIES))
        for x, y in scene.starts:
            self.assertTrue(scene.is_free_at(x, y))

    def test_generate_detour_scene(self):
        scene = generate_scene('detour', 3, 0, layout='detour')
        self.assertTrue(scene.fire_sources)
        self.assertEqual([o.category for o in scene.objects], ['toilet'])

    def test_generate_unknown_layout(self):
        with self.assertRaises(ConfigError):
            generate_scene('x', 1, 0, layout='maze')


class TestSceneFiles(TempDirMixin, unittest.TestCase):

    def assertSameScene(self, a, b):
        self.assertEqual(a.scene_id, b.scene_id)
        np.testing.assert_array_equal(a.occupancy, b.occupancy)
        self.assertEqual(a.objects, b.objects)
        self.assertEqual(a.starts, b.starts)
        self.assertEqual(a.fire_sources, b.fire_sources)

    def test_save_generated_scenes(self):
        for layout in ('rooms', 'detour'):
            scene = generate_scene(f'{layout}_1_000', 1, 0, layout=layout)
            path = self.path(f'{layout}.json')
            save_scene(scene, path)
            self.assertSameScene(load_scene(path), scene)

    def test_save_ascii_scene(self):
        scene = room()
        save_scene(scene, self.path('room.json'))
        self.assertSameScene(load_scene(self.path('room.json')), scene)

    def test_failed_save_leaves_no_file(self):
        path = self.path('broken.json')
        with mock.patch('vulcan.world.scene_to_dict',
                        return_value={'width': np.int64(4)}):
            with self.assertRaises(TypeError):
                save_scene(room(), path)
        self.assertEqual(os.listdir(self.path()), [])


class TestGroundTruthDistance(unittest.TestCase):

    def test_matches_dijkstra(self):
        rng = np.random.default_rng(42)
        occupancy = rng.random((14, 16)) < 0.25
        scene = Scene('random', 16, 14, occupancy, resolution=0.1)
        free = np.argwhere(~occupancy)
        start = tuple(free[0])
        expected = dijkstra_oracle(~occupancy, 0.1, start)
        a = scene.cell_center(*start)
        for row, col in free[::7].tolist():
            b = scene.cell_center(row, col)
            got = ground_truth_distance(scene, a, b)
            if math.isinf(expected[row, col]):
                self.assertEqual(got, math.inf)
            else:
                self.assertAlmostEqual(got, expected[row, col])

    def test_no_corner_cutting(self):
        occupancy = np.array([[False, True],
                              [True, False]])
        scene = Scene('corner', 2, 2, occupancy, resolution=1.0)
        self.assertEqual(ground_truth_distance(scene, (0.5, 0.5),
                                               (1.5, 1.5)), math.inf)

    def test_same_cell(self):
        self.assertEqual(ground_truth_distance(room(), SPAWN,
                                               (0.63, 0.63)), 0.0)

    def test_outside_grid(self):
        with self.assertRaises(GeometryError):
            ground_truth_distance(room(), SPAWN, (10.0, 10.0))

    def test_shortest_success_distance(self):
        self.assertAlmostEqual(
            shortest_success_distance(room(), SPAWN, 'chair'), 0.9)


class TestFire(unittest.TestCase):

    def test_fields_stay_in_unit_interval(self):
        scene = room()
        config = FireConfig(flame_sources=[(12, 20, 3.0)],
                            smoke_emission=0.5)
        fire = inject_fire(scene, config)
        for tick in range(60):
            fire = step_fire(fire, config)
        for field in (fire.T, fire.S):
            self.assertGreaterEqual(field.min(), 0.0)
            self.assertLessEqual(field.max(), 1.0)
        self.assertEqual(fire.S[scene.occupancy].max(), 0.0)

    def test_unstable_diffusivity(self):
        with self.assertRaises(ConfigError):
            FireConfig(smoke_diffusivity=0.3)

    def test_flame_off_grid(self):
        with self.assertRaises(ConfigError):
            inject_fire(room(), FireConfig(flame_sources=[(99, 0, 1.0)]))

    def test_sample_fields(self):
        scene = room()
        fire = smoky(scene, smoke=0.4, temperature=0.2)
        T, S = sample_fields(fire, SPAWN)
        self.assertAlmostEqual(T, 0.2)
        self.assertAlmostEqual(S, 0.4)
        with self.assertRaises(GeometryError):
            sample_fields(fire, (-1.0, 0.5))

    def test_true_hazard_at_a_flame(self):
        scene = room()
        fire = inject_fire(scene, FireConfig(flame_sources=[(12, 20, 1.0)]))
        truth = true_hazard(fire, HazardWeights())
        self.assertGreaterEqual(truth[12, 20], 0.5)
        self.assertEqual(truth[20, 40], 0.0)

    def test_place_fire_keeps_clear_of_spawn(self):
        scene = bundled_scene('apartment_small')
        spawn = scene.starts[0]
        config = place_fire(scene, 'heavy', 3, spawn)
        self.assertEqual(len(config.flame_sources), 3)
        dist = distance_field(scene, spawn)
        for row, col, intensity in config.flame_sources:
            self.assertGreaterEqual(dist[row, col], 1.5)
            self.assertTrue(np.isfinite(dist[row, col]))
        self.assertEqual(place_fire(scene, 'heavy', 3, spawn), config)

    def test_place_fire_unknown_level(self):
        with self.assertRaises(ConfigError):
            place_fire(room(), 'inferno', 1)


class TestSensors(unittest.TestCase):

    def test_pose_wraps_heading(self):
        self.assertAlmostEqual(Pose(0, 0, -math.pi / 2).heading,
                               3 * math.pi / 2)
        self.assertEqual(Pose(0, 0, 2 * math.pi).heading, 0.0)

    def test_pose_snaps_tilt(self):
        self.assertEqual(Pose(0, 0, 0, 0.1).tilt, 0.0)
        self.assertAlmostEqual(Pose(0, 0, 0, math.radians(50)).tilt,
                               TILT_STEP)
        self.assertAlmostEqual(Pose(0, 0, 0, -math.radians(80)).tilt,
                               -TILT_STEP)

    def test_detection_confidence(self):
        self.assertAlmostEqual(float(detection_confidence(0.0)), 0.87)
        self.assertAlmostEqual(float(detection_confidence(1.0)), 0.15)

    def test_depth_to_the_facing_wall(self):
        scene = room()
        depth = render_depth(scene, no_fire(scene), Pose(*SPAWN),
                             params=DegradationParams.off())
        self.assertEqual(depth.shape, (128, 128))
        self.assertAlmostEqual(depth[64, 64], 1.625)

    def test_open_horizon_raises_no_float_errors(self):
        scene = scene_from_ascii('open', ('.' * 12 + '\n') * 12)
        fire = no_fire(scene)
        with np.errstate(divide='raise', invalid='raise'):
            for heading in (0.0, 1.0, math.pi):
                for tilt in (-TILT_STEP, 0.0, TILT_STEP):
                    depth = render_depth(scene, fire,
                                         Pose(1.375, 1.375, heading, tilt),
                                         params=DegradationParams.off())
                    self.assertTrue(np.isfinite(depth).all())
        self.assertEqual(depth[64, 64], DEPTH_DROPOUT)

    def test_floor_pixel_lands_on_the_floor(self):
        scene = room()
        pose = Pose(*SPAWN)
        depth = render_depth(scene, no_fire(scene), pose,
                             params=DegradationParams.off())
        K = CameraIntrinsics()
        point = camera_to_world(
            back_project_pixels([64], [127], [depth[127, 64]], K), pose)[0]
        self.assertAlmostEqual(point[2], 0.0, places=6)

    def test_smoke_causes_dropout(self):
        scene = room()
        pose = Pose(*SPAWN)
        params = DegradationParams(depth_dropout_gain=5.0)
        clear = render_depth(scene, no_fire(scene), pose, params=params)
        hazy = render_depth(scene, smoky(scene), pose, params=params)
        self.assertGreater((hazy == 0).sum(), (clear == 0).sum())

    def test_thermal_ignores_smoke(self):
        scene = room()
        pose = Pose(*SPAWN)
        clear = render_thermal(scene, smoky(scene, 0.0, 0.5), pose)
        hazy = render_thermal(scene, smoky(scene, 0.8, 0.5), pose)
        np.testing.assert_array_equal(clear, hazy)
        self.assertGreater(clear.max(), 0.0)

    def test_radar_points_lie_on_walls(self):
        scene = room()
        pose = Pose(*SPAWN)
        points, sigma = sense_radar(scene, no_fire(scene), pose,
                                    DegradationParams.off())
        self.assertEqual(len(points), 64)
        self.assertEqual(sigma.max(), 0.0)
        for x, y in points:
            dx, dy = x - pose.x, y - pose.y
            norm = math.hypot(dx, dy)
            inside = (x + 1e-6 * dx / norm, y + 1e-6 * dy / norm)
            self.assertFalse(scene.is_free_at(*inside))

    def test_smoke_lowers_detection_confidence(self):
        scene = room()
        pose = Pose(*SPAWN)
        params = DegradationParams(false_positive_rate=0.0)

        def chair(fire):
            found = [d for d in simulate_detections(scene, fire, pose,
                                                    params=params)
                     if d.category == 'chair']
            self.assertEqual(len(found), 1)
            return found[0]

        clear = chair(no_fire(scene))
        hazy = chair(smoky(scene))
        self.assertAlmostEqual(clear.confidence, 0.87)
        self.assertLess(hazy.confidence, clear.confidence)
        self.assertFalse(hazy.is_false_positive)

    def test_nothing_detected_behind(self):
        scene = room()
        pose = Pose(*SPAWN, heading=math.pi)
        found = simulate_detections(scene, no_fire(scene), pose,
                                    params=DegradationParams.off())
        self.assertEqual(found, [])

    def test_observe_is_deterministic(self):
        scene = room()
        fire = smoky(scene, 0.3)
        a = observe(scene, fire, Pose(*SPAWN), seed=5, agent=1, tick=3)
        b = observe(scene, fire, Pose(*SPAWN), seed=5, agent=1, tick=3)
        np.testing.assert_array_equal(a.depth, b.depth)
        np.testing.assert_array_equal(a.radar, b.radar)
        np.testing.assert_array_equal(a.footprint, b.footprint)
        self.assertEqual(a.detections, b.detections)

    def test_pose_inside_wall(self):
        scene = room()
        with self.assertRaises(GeometryError):
            render_depth(scene, no_fire(scene), Pose(0.1, 0.1))


def manual_observation(depth, smoke_integral, tick=0):
    shape = depth.shape
    return Observation(depth=depth, thermal=np.zeros(shape), detections=[],
                       radar=np.zeros((0, 2)), radar_sigma=np.zeros(0),
                       pose=Pose(*SPAWN), tick=tick,
                       smoke_integral=smoke_integral,
                       smoke_mean=np.zeros(shape))


class TestPerception(unittest.TestCase):

    def test_fuser_repairs_isolated_dropouts(self):
        depth = np.full((16, 16), 2.0)
        smoke = np.zeros((16, 16))
        depth[8, 8] = 0.0
        depth[2, 2] = 0.0
        smoke[2, 2] = 0.5
        fused = fuse_modalities(manual_observation(depth, smoke))
        self.assertEqual(fused.depth[8, 8], 2.0)
        self.assertEqual(fused.reliability[8, 8], 1.0)
        self.assertEqual(fused.depth[2, 2], 2.0)
        self.assertGreater(fused.reliability[2, 2], 0.0)
        self.assertLess(fused.reliability[2, 2], 1.0)

    def test_fuser_leaves_large_holes(self):
        depth = np.full((32, 32), 2.0)
        depth[10:25, 10:25] = 0.0
        fused = fuse_modalities(manual_observation(depth,
                                                   np.zeros((32, 32))))
        self.assertEqual(fused.depth[10, 10], 2.0)
        self.assertEqual(fused.depth[17, 17], 0.0)
        self.assertEqual(fused.reliability[17, 17], 0.0)

    def test_fuser_all_dropout(self):
        fused = fuse_modalities(manual_observation(np.zeros((8, 8)),
                                                   np.zeros((8, 8))))
        self.assertFalse(fused.depth.any())
        self.assertFalse(fused.reliability.any())

    def test_fuser_shape_mismatch(self):
        obs = manual_observation(np.ones((8, 8)), np.zeros((8, 8)))
        obs.thermal = np.zeros((4, 4))
        with self.assertRaises(GeometryError):
            fuse_modalities(obs)

    def test_back_project_inverts_projection(self):
        K = CameraIntrinsics(fx=80, fy=70, cx=60, cy=50, width=120,
                             height=100)
        for pixel, depth in [((0, 0), 1.0), ((119, 99), 3.5),
                             ((33.5, 71.25), 0.2)]:
            point = back_project(pixel, depth, K)
            self.assertAlmostEqual(point[2], depth)
            u, v = K.project(point)
            self.assertAlmostEqual(u, pixel[0])
            self.assertAlmostEqual(v, pixel[1])

    def test_back_project_random_cameras(self):
        rng = np.random.default_rng(21)
        for trial in range(5):
            width, height = (int(n) for n in rng.integers(16, 640, 2))
            K = CameraIntrinsics(fx=rng.uniform(20, 800),
                                 fy=rng.uniform(20, 800),
                                 cx=rng.uniform(0, width - 1),
                                 cy=rng.uniform(0, height - 1),
                                 width=width, height=height)
            u = rng.uniform(0, width, 2000)
            v = rng.uniform(0, height, 2000)
            depth = rng.uniform(0.05, 10.0, 2000)
            points = back_project_pixels(u, v, depth, K)
            rays = np.linalg.inv(K.K) @ np.stack([u, v, np.ones_like(u)])
            np.testing.assert_allclose(points, (rays * depth).T,
                                       rtol=1e-9, atol=1e-12)
            for point, pu, pv in zip(points[:50], u, v):
                pu2, pv2 = K.project(point)
                self.assertAlmostEqual(pu2, pu, places=7)
                self.assertAlmostEqual(pv2, pv, places=7)

    def test_back_project_rejects_bad_depth(self):
        with self.assertRaises(GeometryError):
            back_project((1, 1), 0.0, CameraIntrinsics())
        with self.assertRaises(GeometryError):
            back_project((500, 1), 1.0, CameraIntrinsics())

    def test_locate_detection(self):
        det = Detection('chair', 0, 0.9, (60, 60, 68, 68), 1.5)
        x, y = locate_detection(det, Pose(1.0, 1.0, math.pi / 2),
                                CameraIntrinsics())
        self.assertAlmostEqual(x, 1.0)
        self.assertAlmostEqual(y, 2.5)

    def test_local_cloud(self):
        scene = room()
        fire = smoky(scene, 0.3, 0.2)
        pose = Pose(*SPAWN)
        obs = observe(scene, fire, pose,
                      params=DegradationParams(false_positive_rate=0.0))
        fused = fuse_modalities(obs)
        cloud = build_local_cloud(fused, obs.detections, obs.radar, pose,
                                  CameraIntrinsics(), fire=fire, tick=0)
        self.assertGreater(len(cloud), 0)
        for column in (cloud.T, cloud.S, cloud.sigma):
            self.assertGreaterEqual(column.min(), 0.0)
            self.assertLessEqual(column.max(), 1.0)
        radar = cloud.source == RADAR
        self.assertEqual(radar.sum(), len(obs.radar))
        np.testing.assert_allclose(cloud.positions[radar, 2], 0.3)
        np.testing.assert_allclose(cloud.sigma[radar], 0.3)
        labelled = [s for s in cloud.semantic if s is not None]
        self.assertTrue(labelled)
        self.assertEqual({s[0] for s in labelled}, {'chair'})

    def test_local_cloud_tick_mismatch(self):
        fused = fuse_modalities(manual_observation(np.ones((8, 8)),
                                                   np.zeros((8, 8))))
        with self.assertRaises(GeometryError):
            build_local_cloud(fused, [], np.zeros((0, 2)), Pose(*SPAWN),
                              CameraIntrinsics(), tick=5)

    def test_merge_global_order(self):
        a = HazardCloud(np.zeros((2, 3)), agent=[1, 1], tick=[0, 0])
        b = HazardCloud(np.ones((3, 3)), agent=[0, 0, 0], tick=[2, 1, 1])
        merged = merge_global([a, b])
        self.assertEqual(merged.frame, 'global')
        self.assertEqual(merged.agent.tolist(), [0, 0, 0, 1, 1])
        self.assertEqual(merged.tick.tolist(), [1, 1, 2, 0, 0])

    def test_outlier_mask_matches_definition(self):
        rng = np.random.default_rng(7)
        clusters = np.concatenate([rng.normal(0.0, 0.03, (40, 3)),
                                   rng.normal(1.0, 0.03, (40, 3))])
        scattered = rng.uniform(-1.0, 2.0, (20, 3))
        points = np.concatenate([clusters, scattered])
        eps, min_pts = 0.1, 4
        dist = np.linalg.norm(points[:, None] - points[None, :], axis=-1)
        neighbours = dist <= eps
        core = neighbours.sum(axis=1) >= min_pts
        expected = ~core & ~(neighbours & core[None, :]).any(axis=1)
        np.testing.assert_array_equal(outlier_mask(points, eps, min_pts),
                                      expected)
        self.assertTrue(expected[-20:].any())

    def test_outlier_mask_empty(self):
        self.assertEqual(len(outlier_mask(np.zeros((0, 3)))), 0)

    def test_outlier_mask_bad_eps(self):
        with self.assertRaises(ConfigError):
            outlier_mask(np.zeros((3, 3)), eps=0)


class TestCloudFiles(TempDirMixin, unittest.TestCase):

    def test_write_then_read(self):
        cloud = HazardCloud([(0.5, 0.25, 1.0), (1.0, 2.0, 0.0)],
                            T=[120.0, 30.0], S=[0.2, 0.0], sigma=[0.1, 0.3],
                            source=['vision', RADAR],
                            semantic=[('chair', 3, 0.75), None])
        write_cloud(cloud, self.path('cloud.jsonl'))
        again = read_cloud(self.path('cloud.jsonl'))
        self.assertEqual(again.frame, 'global')
        self.assertEqual(list(again), list(cloud))

    def test_read_cloud_corrupt(self):
        with open(self.path('cloud.jsonl'), 'w') as f:
            f.write('{"x": 1}\n')
        with self.assertRaises(TraceError):
            read_cloud(self.path('cloud.jsonl'))


class TestMapping(unittest.TestCase):

    def test_project_to_2d(self):
        cloud = HazardCloud([(0.125, 0.125, 1.0), (0.325, 0.125, 0.0)],
                            T=[0.0, 0.9], S=[0.0, 0.6], sigma=[0.0, 0.3])
        hazard_map = project_to_2d(cloud, explored=np.ones((10, 10),
                                                           dtype=bool))
        self.assertEqual(hazard_map.O[2, 2], OCCUPIED)
        self.assertEqual(hazard_map.O[2, 6], FREE)
        self.assertAlmostEqual(hazard_map.H[2, 6], 0.6)
        self.assertEqual(hazard_map.H[5, 5], 0.0)

    def test_unexplored_cells_stay_unknown(self):
        cloud = HazardCloud([(0.325, 0.125, 0.0)], T=[1.0])
        hazard_map = project_to_2d(cloud, shape=(5, 10))
        self.assertEqual(hazard_map.O[2, 6], UNKNOWN)
        self.assertGreater(hazard_map.H[2, 6], 0.0)

    def test_density_threshold(self):
        cloud = HazardCloud([(0.125, 0.125, 1.0)])
        hazard_map = project_to_2d(cloud, density_threshold=2,
                                   shape=(5, 5))
        self.assertNotEqual(hazard_map.O[2, 2], OCCUPIED)

    def test_accumulator_matches_union(self):
        rng = np.random.default_rng(3)

        def random_cloud(n):
            return HazardCloud(rng.uniform(0, 1.0, (n, 3)),
                               T=rng.random(n), S=rng.random(n),
                               sigma=rng.random(n))

        clouds = [random_cloud(50), random_cloud(80)]
        explored = rng.random((20, 20)) < 0.5
        acc = HazardAccumulator((20, 20))
        for cloud in clouds:
            acc.add(cloud)
        acc.mark_explored(explored)
        incremental = acc.snapshot()
        union = project_to_2d(HazardCloud.concatenate(clouds),
                              explored=explored)
        np.testing.assert_array_equal(incremental.O, union.O)
        np.testing.assert_allclose(incremental.H, union.H)

    def test_mark_blocked(self):
        acc = HazardAccumulator((5, 5))
        acc.mark_blocked(2, 3)
        acc.mark_blocked(9, 9)
        self.assertEqual(acc.snapshot().O[2, 3], OCCUPIED)

    def assertFrontiersMatchDefinition(self, hazard_map):
        O = hazard_map.O
        frontiers = extract_frontiers(hazard_map, min_size=1)
        found = {cell for f in frontiers for cell in f.cells}
        expected = set()
        height, width = O.shape
        for r in range(height):
            for c in range(width):
                if O[r, c] != FREE:
                    continue
                around = [O[r + dr, c + dc] for dr, dc in
                          ((-1, 0), (1, 0), (0, -1), (0, 1))
                          if 0 <= r + dr < height and 0 <= c + dc < width]
                if UNKNOWN in around and OCCUPIED not in around:
                    expected.add((r, c))
        self.assertEqual(found, expected)
        self.assertEqual([f.id for f in frontiers],
                         list(range(len(frontiers))))
        for f in frontiers:
            self.assertEqual(f.size, len(f.cells))
            mean = np.mean([hazard_map.H[r, c] for r, c in f.cells])
            self.assertLess(abs(f.risk - mean), 1e-12)
            self.assertEqual(f.level, classify_risk(f.risk))
            self.assertAlmostEqual(f.risk,
                                   score_frontier_risk(hazard_map, f))

    def test_frontiers_match_definition(self):
        rng = np.random.default_rng(11)
        O = rng.choice([UNKNOWN, FREE, OCCUPIED], size=(25, 30),
                       p=[0.3, 0.6, 0.1]).astype(np.int8)
        self.assertFrontiersMatchDefinition(
            ObstacleHazardMap(O, rng.random(O.shape), O != UNKNOWN))

    def test_frontiers_on_small_random_maps(self):
        rng = np.random.default_rng(12)
        for trial in range(100):
            O = rng.choice([UNKNOWN, FREE, OCCUPIED], size=(12, 12),
                           p=rng.dirichlet([2, 3, 1])).astype(np.int8)
            self.assertFrontiersMatchDefinition(
                ObstacleHazardMap(O, rng.random(O.shape), O != UNKNOWN))

    def test_min_size_drops_small_frontiers(self):
        hazard_map = half_explored_map()
        self.assertEqual(len(extract_frontiers(hazard_map, min_size=20)), 1)
        self.assertEqual(extract_frontiers(hazard_map, min_size=21), [])

    def test_classify_risk(self):
        self.assertEqual(classify_risk(0.2), 'safe')
        self.assertEqual(classify_risk(0.3), 'moderate')
        self.assertEqual(classify_risk(0.9), 'dangerous')
        self.assertEqual(classify_risk(0.3, (0.4, 0.8)), 'safe')
        with self.assertRaises(ConfigError):
            classify_risk(0.3, (0.5, 0.4))

    def test_score_empty_frontier(self):
        with self.assertRaises(GeometryError):
            score_frontier_risk(half_explored_map(), [])


class TestMapFiles(TempDirMixin, unittest.TestCase):

    def test_write_and_read(self):
        hazard_map = half_explored_map()
        hazard_map.O[3, 3] = OCCUPIED
        hazard_map.H[:, :10] = np.linspace(0, 0.7, 10)
        frontiers = extract_frontiers(hazard_map, min_size=1)
        write_map(hazard_map, frontiers, self.path('dump'))
        loaded, loaded_frontiers = read_map(self.path('dump'))
        np.testing.assert_array_equal(loaded.O, hazard_map.O)
        np.testing.assert_array_equal(loaded.explored, hazard_map.explored)
        np.testing.assert_allclose(loaded.H, hazard_map.H, atol=1e-4)
        self.assertEqual(loaded_frontiers, frontiers)
        self.assertEqual(loaded.resolution, hazard_map.resolution)


class TestFastMarching(unittest.TestCase):

    def test_diagonal_close_to_euclidean(self):
        field = solve_fmm(SpeedField(np.ones((41, 41)), 1.0), [(20, 20)])
        exact = math.hypot(20, 20)
        self.assertLess(abs(field.time[40, 40] - exact) / exact, 0.1)
        self.assertAlmostEqual(field.time[20, 40], 20.0)

    def test_point_source_matches_euclidean_distance(self):
        field = solve_fmm(SpeedField(np.ones((200, 200)), 1.0), [(100, 100)])
        rows, cols = np.indices(field.shape)
        exact = np.hypot(rows - 100, cols - 100)
        far = exact > 10
        error = np.abs(field.time[far] - exact[far]) / exact[far]
        self.assertLess(error.max(), 0.02)

    def test_random_fields_bounded_by_four_neighbour_graph(self):
        rng = np.random.default_rng(11)
        for trial in range(20):
            F = rng.uniform(0.1, 1.0, (50, 50))
            F[rng.random((50, 50)) < 0.1] = 0.0
            open_cells = np.flatnonzero(F > 0)
            goals = [divmod(int(i), 50)
                     for i in rng.choice(open_cells, 5, replace=False)]
            field = solve_fmm(SpeedField(F, 0.05), goals)
            graph = four_neighbour_oracle(F, 0.05, goals)
            finite = np.isfinite(graph)
            np.testing.assert_array_equal(np.isfinite(field.time), finite)
            time, bound = field.time[finite], graph[finite]
            self.assertTrue((time <= bound * (1 + 1e-9)).all())
            self.assertTrue((time >= bound / math.sqrt(2) * (1 - 1e-9))
                            .all())

    def test_arrival_grows_with_alpha(self):
        rng = np.random.default_rng(5)
        for trial in range(5):
            hazard_map = open_map((30, 30))
            hazard_map.H[:] = rng.uniform(0.0, 1.0, (30, 30))
            previous = None
            for alpha in (0.0, 1.0, 5.0, 20.0):
                speed = hazard_speed(hazard_map, alpha, inflation=0)
                time = solve_fmm(speed, [(0, 0), (29, 29), (0, 29),
                                         (29, 0), (15, 15)]).time
                if previous is not None:
                    self.assertTrue((time >= previous).all())
                previous = time

    def test_acceptance_order(self):
        rng = np.random.default_rng(1)
        speed = SpeedField(rng.uniform(0.2, 1.0, (15, 15)), 0.5)
        order = []
        solve_fmm(speed, [(0, 0), (14, 3)], order=order)
        values = [t for t, cell in order]
        self.assertEqual(len(values), 15 * 15)
        self.assertEqual(values, sorted(values))

    def test_goal_off_grid(self):
        with self.assertRaises(GeometryError):
            solve_fmm(SpeedField(np.ones((3, 3)), 1.0), [(5, 5)])

    def test_untraversable_goals(self):
        F = np.ones((3, 3))
        F[1, 1] = 0
        with self.assertRaises(UnreachableError):
            solve_fmm(SpeedField(F, 1.0), [(1, 1)])

    def test_limit(self):
        field = solve_fmm(SpeedField(np.ones((30, 30)), 0.1), [(0, 0)],
                          limit=1.0)
        self.assertTrue(np.isfinite(field.time[0, 5]))
        self.assertEqual(field.time[29, 29], math.inf)

    def test_hazard_speed(self):
        hazard_map = open_map((4, 4))
        hazard_map.H[0, 0] = 1.0
        hazard_map.O[3, 3] = OCCUPIED
        hazard_map.O[0, 3] = UNKNOWN
        speed = hazard_speed(hazard_map, alpha=5.0, inflation=0)
        self.assertAlmostEqual(speed.F[0, 0], 1 / 6)
        self.assertEqual(speed.F[3, 3], 0.0)
        self.assertEqual(speed.F[0, 3], 0.5)
        self.assertEqual(speed.F[1, 1], 1.0)
        with self.assertRaises(ConfigError):
            hazard_speed(hazard_map, alpha=-1)

    def test_hazard_speed_law(self):
        rng = np.random.default_rng(8)
        hazard_map = open_map((100, 1000))
        hazard_map.H[:] = rng.uniform(0.0, 1.0, hazard_map.shape)
        for alpha in rng.uniform(0.0, 50.0, 100):
            F = hazard_speed(hazard_map, alpha, inflation=0).F
            expected = 1.0 / (1.0 + alpha * hazard_map.H)
            self.assertLess(np.abs(F - expected).max(), 1e-12)

    def test_path_detours_through_gap(self):
        F = np.ones((21, 21))
        F[:16, 10] = 0
        field = solve_fmm(SpeedField(F, 0.1), [(2, 18)])
        path = extract_path(field, (0.25, 0.25))
        self.assertGreaterEqual(max(y for x, y in path), 1.6)
        self.assertAlmostEqual(path[-1][0], 1.85)
        self.assertAlmostEqual(path[-1][1], 0.25)

    def test_path_avoids_hazard(self):
        hazard_map = open_map((30, 30))
        hazard_map.H[10:20, 12:18] = 1.0

        def blob_vertices(alpha):
            speed = hazard_speed(hazard_map, alpha, inflation=0)
            field = solve_fmm(speed, [(15, 28)])
            path = extract_path(field, (0.075, 0.775))
            return sum(1 for x, y in path
                       if hazard_map.H[hazard_map.cell_of(x, y)] > 0)

        self.assertLess(blob_vertices(5.0), blob_vertices(0.0))

    def test_detour_scenes_trade_length_for_safety(self):
        for index in range(3):
            scene = generate_scene('detour', 5, index, layout='detour')
            hazard_map = open_map(scene.shape, scene.resolution)
            hazard_map.O[scene.occupancy] = OCCUPIED
            (row, col, intensity), = scene.fire_sources
            hazard_map.H[row - 2:row + 8, col - 15:col + 16] = 1.0
            hazard_map.H[scene.occupancy] = 0.0
            goals = [cell for obj in scene.objects_of('toilet')
                     for cell in obj.cells]

            def walk(alpha):
                speed = hazard_speed(hazard_map, alpha)
                path = extract_path(solve_fmm(speed, goals),
                                    scene.starts[0])
                exposure = sum(hazard_map.H[hazard_map.cell_of(x, y)]
                               for x, y in path)
                length = sum(math.dist(a, b) for a, b in zip(path, path[1:]))
                return path, exposure, length

            aware, aware_exposure, aware_length = walk(5.0)
            blind, blind_exposure, blind_length = walk(0.0)
            self.assertEqual(aware_exposure, 0.0)
            self.assertGreater(blind_exposure, 0.0)
            self.assertGreater(aware_length, blind_length)
            for path in (aware, blind):
                r, c = hazard_map.cell_of(*path[-1])
                self.assertLessEqual(min(max(abs(r - gr), abs(c - gc))
                                         for gr, gc in goals), 1)

    def test_start_at_goal(self):
        field = solve_fmm(SpeedField(np.ones((5, 5)), 1.0), [(2, 2)])
        self.assertEqual(extract_path(field, (2.5, 2.5)), [(2.5, 2.5)])


class TestActions(unittest.TestCase):

    def test_straight_ahead(self):
        actions = path_to_actions([(0.5, 0.5), (1.5, 0.5)],
                                  Pose(0.5, 0.5, 0.0))
        self.assertEqual(actions, [Action.MOVE_FORWARD] * 4 + [Action.STOP])

    def test_turn_first(self):
        actions = path_to_actions([(0.5, 0.5), (1.5, 0.5)],
                                  Pose(0.5, 0.5, math.pi / 2))
        self.assertEqual(actions, [Action.TURN_RIGHT] * 3
                         + [Action.MOVE_FORWARD] * 4 + [Action.STOP])

    def follow(self, actions, pose):
        x, y, heading = pose.x, pose.y, pose.heading
        for action in actions:
            if action is Action.TURN_LEFT:
                heading += math.radians(30)
            elif action is Action.TURN_RIGHT:
                heading -= math.radians(30)
            elif action is Action.MOVE_FORWARD:
                x += 0.25 * math.cos(heading)
                y += 0.25 * math.sin(heading)
        return x, y

    def test_short_goal_is_approached(self):
        pose = Pose(0.5, 0.5, 0.0)
        actions = path_to_actions([(0.62, 0.5)], pose)
        self.assertNotEqual(actions, [Action.STOP])
        self.assertEqual(actions[-1], Action.STOP)
        x, y = self.follow(actions, pose)
        self.assertLessEqual(math.hypot(x - 0.62, y - 0.5), 0.1)

    def test_quarter_turn_left(self):
        actions = path_to_actions([(0.5, 0.75)], Pose(0.5, 0.5, 0.0))
        self.assertEqual(actions, [Action.TURN_LEFT] * 3
                         + [Action.MOVE_FORWARD, Action.STOP])

    def test_bearing_rounds_to_one_turn(self):
        bearing = math.radians(-44)
        goal = (0.5 + 0.25 * math.cos(bearing), 0.5 + 0.25 * math.sin(bearing))
        actions = path_to_actions([goal], Pose(0.5, 0.5, 0.0))
        self.assertEqual(actions, [Action.TURN_RIGHT, Action.MOVE_FORWARD,
                                   Action.STOP])

    def test_ends_within_tolerance(self):
        rng = np.random.default_rng(3)
        for trial in range(50):
            pose = Pose(0.0, 0.0, float(rng.uniform(-math.pi, math.pi)))
            goal = tuple(rng.uniform(-1.5, 1.5, 2))
            actions = path_to_actions([(0.0, 0.0), goal], pose)
            self.assertEqual(actions.count(Action.STOP), 1)
            x, y = self.follow(actions, pose)
            self.assertLessEqual(math.hypot(x - goal[0], y - goal[1]),
                                 0.1 + 1e-9)

    def test_already_there(self):
        self.assertEqual(path_to_actions([(0.5, 0.5)], Pose(0.52, 0.5)),
                         [Action.STOP])

    def test_empty_path(self):
        with self.assertRaises(GeometryError):
            path_to_actions([], Pose(0, 0))

    def test_execute_forward(self):
        pose, moved = execute_action(room(), Pose(*SPAWN),
                                     Action.MOVE_FORWARD)
        self.assertEqual(moved, 0.25)
        self.assertAlmostEqual(pose.x, 0.875)
        self.assertAlmostEqual(pose.y, 0.625)

    def test_execute_blocked(self):
        start = Pose(0.3, 0.625, math.pi)
        pose, moved = execute_action(room(), start, Action.MOVE_FORWARD)
        self.assertEqual(moved, 0.0)
        self.assertEqual(pose, start)

    def test_execute_turn_and_tilt(self):
        scene = room()
        pose, moved = execute_action(scene, Pose(*SPAWN), Action.TURN_LEFT)
        self.assertAlmostEqual(pose.heading, math.radians(30))
        pose, moved = execute_action(scene, pose, Action.LOOK_UP)
        pose, moved = execute_action(scene, pose, Action.LOOK_UP)
        self.assertAlmostEqual(pose.tilt, TILT_STEP)
        self.assertEqual(moved, 0.0)
        self.assertEqual(str(Action.LOOK_UP), 'look_up')


def planner_input(levels=('safe', 'safe', 'safe'), hazard_map=None):
    hazard_map = hazard_map if hazard_map is not None else \
        ObstacleHazardMap.blank((20, 20))
    frontiers = [Frontier(i, ((i, 19),), (0.975, 0.05 * i + 0.025), size,
                          0.1, level)
                 for i, (size, level) in enumerate(zip((10, 20, 30),
                                                       levels))]
    robots = [RobotState(0, Pose(0.5, 0.5)), RobotState(1, Pose(0.6, 0.5))]
    distances = {0: {0: 1.0, 1: 2.0, 2: 3.0},
                 1: {0: 1.5, 1: 4.0, 2: 2.5}}
    return PlannerInput(hazard_map, frontiers, robots, 'chair', distances)


def frontier_goals(assignment):
    return {rid: goal.frontier for rid, goal in assignment.goals.items()}


class ScriptedBackend:

    def __init__(self, *replies):
        self.replies = list(replies)
        self.prompts = []

    def complete(self, prompt):
        self.prompts.append(prompt)
        reply = self.replies.pop(0) if len(self.replies) > 1 \
            else self.replies[0]
        if isinstance(reply, Exception):
            raise reply
        return reply


class TestPlanners(unittest.TestCase):

    def test_greedy(self):
        self.assertEqual(frontier_goals(plan_greedy(planner_input())),
                         {0: 0, 1: 2})

    def test_cost_utility(self):
        assignment = plan_cost_utility(planner_input(), 0.5)
        self.assertEqual(frontier_goals(assignment), {0: 2, 1: 1})
        self.assertFalse(assignment.fallback)

    def test_unreachable_frontiers_are_skipped(self):
        inp = planner_input()
        inp.distances[1] = {0: math.inf, 1: math.inf, 2: math.inf}
        assignment = plan_greedy(inp)
        self.assertEqual(assignment.goals[0].frontier, 0)
        self.assertEqual(assignment.goals[1].kind, 'hold')

    def test_mock_model_avoids_danger(self):
        inp = planner_input(('safe', 'moderate', 'dangerous'))
        assignment = make_planner('vlm_mock')(inp)
        self.assertEqual(frontier_goals(assignment), {0: 0, 1: 1})
        self.assertEqual(assignment.planner, 'vlm_mock')

    def test_blind_mock_model(self):
        inp = planner_input(('safe', 'moderate', 'dangerous'))
        assignment = make_planner('vlm_mock_blind')(inp)
        self.assertEqual(frontier_goals(assignment), {0: 2, 1: 1})

    def test_mock_model_stranded_robot(self):
        inp = planner_input(('dangerous', 'safe', 'moderate'))
        inp.distances[1] = {0: math.inf, 1: math.inf, 2: math.inf}
        assignment = make_planner('vlm_mock')(inp)
        self.assertEqual(frontier_goals(assignment), {0: 1, 1: 1})
        self.assertEqual(assignment.planner, 'vlm_mock')

    def test_random_planner_needs_rng(self):
        with self.assertRaises(ConfigError):
            make_planner('random')(planner_input())
        rng = np.random.default_rng(0)
        assignment = make_planner('random')(planner_input(), rng)
        self.assertEqual(set(assignment.goals), {0, 1})

    def test_check_assignment(self):
        inp = planner_input()
        ok = Assignment({0: Goal.to_frontier(1), 1: Goal.hold()})
        self.assertIs(check_assignment(ok, inp), ok)
        with self.assertRaises(PlanningError):
            check_assignment(Assignment({0: Goal.to_frontier(1)}), inp)
        with self.assertRaises(PlanningError):
            check_assignment(Assignment({0: Goal.to_frontier(7),
                                         1: Goal.hold()}), inp)

    def test_unknown_planner(self):
        with self.assertRaises(ConfigError):
            make_planner('oracle')

    def test_retry_then_accept(self):
        backend = ScriptedBackend('no idea', '{"0": 1, "1": 0}')
        with self.assertLogs('vulcan.global_planning', 'WARNING'):
            assignment = plan_vlm(planner_input(), backend,
                                  PlannerParams(retries=1))
        self.assertEqual(len(backend.prompts), 2)
        self.assertEqual(frontier_goals(assignment), {0: 1, 1: 0})
        self.assertFalse(assignment.fallback)

    def test_fallback_after_retries(self):
        inp = planner_input(('safe', 'moderate', 'dangerous'))
        backend = ScriptedBackend(BackendError('down'))
        with self.assertLogs('vulcan.global_planning', 'WARNING'):
            assignment = plan_vlm(inp, backend, PlannerParams(retries=2))
        self.assertEqual(len(backend.prompts), 3)
        self.assertTrue(assignment.fallback)
        self.assertEqual(frontier_goals(assignment), {0: 1, 1: 0})

    def test_all_dangerous_falls_back_to_points(self):
        hazard_map = open_map((20, 20))
        hazard_map.H[:] = 0.5
        hazard_map.H[10, 10] = 0.0
        inp = planner_input(('dangerous',) * 3, hazard_map)
        backend = ScriptedBackend('{"0": 0, "1": 1}')
        assignment = plan_vlm(inp, backend)
        self.assertEqual(backend.prompts, [])
        self.assertTrue(assignment.fallback)
        for goal in assignment.goals.values():
            self.assertEqual(goal.kind, POINT)
            self.assertAlmostEqual(goal.point[0], 0.525)
            self.assertAlmostEqual(goal.point[1], 0.525)

    def test_blind_planner_ignores_danger(self):
        inp = planner_input(('dangerous',) * 3)
        backend = ScriptedBackend('{"0": 0, "1": 1}')
        assignment = plan_vlm(inp, backend, hazard_aware=False)
        self.assertEqual(len(backend.prompts), 1)
        self.assertEqual(assignment.goals[0].kind, FRONTIER)

    def test_robot_distances(self):
        hazard_map = half_explored_map()
        frontiers = extract_frontiers(hazard_map, min_size=1)
        self.assertEqual(len(frontiers), 1)
        distances = robot_distances(
            hazard_map, frontiers,
            [RobotState(0, Pose(0.125, 0.525)),
             RobotState(1, Pose(0.3, 0.3), alive=False)])
        self.assertEqual(set(distances), {0})
        self.assertAlmostEqual(distances[0][0], 0.35, places=6)

    def test_report_schema(self):
        prompt = build_prompt(planner_input())
        self.assertIs(validate_report(prompt.hazard_report),
                      prompt.hazard_report)
        self.assertEqual(prompt.hazard_report['robots'][0]['distances'],
                         {'0': 1.0, '1': 2.0, '2': 3.0})
        with self.assertRaises(ConfigError):
            validate_report({'schema_version': 1})


class StubResponse:

    def __init__(self, status=200, body=None, text=''):
        self.status_code = status
        self.body = body
        self.text = text

    def raise_for_status(self):
        if self.status_code >= 400:
            raise requests.HTTPError(f'{self.status_code} Server Error')

    def json(self):
        if self.body is None:
            raise ValueError('not JSON')
        return self.body


class StubSession:

    def __init__(self, response=None, error=None):
        self.response = response
        self.error = error
        self.calls = []

    def post(self, url, json=None, headers=None, timeout=None):
        self.calls.append({'url': url, 'json': json, 'headers': headers,
                           'timeout': timeout})
        if self.error is not None:
            raise self.error
        return self.response


class TestHttpBackend(unittest.TestCase):

    def setUp(self):
        self.prompt = build_prompt(planner_input())

    def backend(self, session, token=None):
        return HttpBackend('http://model.invalid/plan', token=token,
                           timeout=2.0, session=session)

    def test_posts_prompt(self):
        session = StubSession(StubResponse(body={'text': '{"0": 1}'}))
        reply = self.backend(session, token='s3cret').complete(self.prompt)
        self.assertEqual(reply, '{"0": 1}')
        call, = session.calls
        self.assertEqual(call['headers'], {'Authorization': 'Bearer s3cret'})
        self.assertEqual(call['timeout'], 2.0)
        self.assertEqual(sorted(call['json']),
                         ['hazard_report', 'image', 'schema_version',
                          'system'])

    def test_plain_text_reply(self):
        session = StubSession(StubResponse(text='{"0": 2, "1": 0}'))
        self.assertEqual(self.backend(session).complete(self.prompt),
                         '{"0": 2, "1": 0}')

    def test_timeout(self):
        session = StubSession(error=requests.Timeout('too slow'))
        with self.assertRaises(BackendError):
            self.backend(session).complete(self.prompt)

    def test_server_error(self):
        session = StubSession(StubResponse(status=500))
        with self.assertRaises(BackendError):
            self.backend(session).complete(self.prompt)

    def test_needs_an_endpoint(self):
        with mock.patch.dict(os.environ, clear=True):
            with self.assertRaises(ConfigError):
                HttpBackend()

    def test_endpoint_from_environment(self):
        with mock.patch.dict(os.environ,
                             {'VULCAN_VLM_URL': 'http://env.invalid/',
                              'VULCAN_VLM_TOKEN': 'tok'}):
            backend = HttpBackend(session=StubSession())
        self.assertEqual(backend.url, 'http://env.invalid/')
        self.assertEqual(backend.token, 'tok')


def synthetic_trace(episode_id, steps, success, path, exposure):
    task = Task('room', 'chair', max_steps=100, episode_id=episode_id)
    records = [{'type': 'step', 'tick': i, 'coverage': 0.1, 'robots': []}
               for i in range(steps)]
    if success:
        for kind in ('detection', 'approach'):
            records.append({'type': kind, 'tick': steps - 1, 'agent': 0,
                            'category': 'chair', 'instance_id': 0,
                            'is_false_positive': False})
    return EpisodeTrace(task, records,
                        SUCCESS if success else BUDGET_EXHAUSTED,
                        {0: path, 1: path + 1.0}, SPAWN,
                        hazard_exposure=exposure)


class TestMetrics(unittest.TestCase):

    def test_spl_term(self):
        self.assertEqual(spl_term(False, 2.0, 4.0), 0.0)
        self.assertEqual(spl_term(True, 2.0, 4.0), 0.5)
        self.assertEqual(spl_term(True, 3.0, 2.0), 1.0)
        self.assertEqual(spl_term(True, 0.0, 0.0), 1.0)

    def test_compute_metrics(self):
        traces = [synthetic_trace('b', 20, False, 3.0, 0.5),
                  synthetic_trace('a', 10, True, 4.0, 1.0)]
        metrics = compute_metrics(traces, lambda trace: 2.0)
        self.assertEqual(metrics.episodes, 2)
        self.assertEqual(metrics.excluded, 0)
        self.assertAlmostEqual(metrics.NS, 15.0)
        self.assertAlmostEqual(metrics.SR, 0.5)
        self.assertAlmostEqual(metrics.SPL, 0.25)
        self.assertAlmostEqual(metrics.CHE, 1.5)

    def test_unreachable_success_is_excluded(self):
        traces = [synthetic_trace('a', 10, True, 4.0, 1.0),
                  synthetic_trace('b', 20, False, 3.0, 0.5)]
        with self.assertLogs('vulcan.episode', 'WARNING'):
            metrics = compute_metrics(traces, lambda trace: math.inf)
        self.assertEqual(metrics.excluded, 1)
        self.assertEqual(metrics.episodes, 1)
        self.assertEqual(metrics.SR, 0.0)

    def test_no_traces(self):
        with self.assertRaises(TraceError):
            compute_metrics([], lambda trace: 1.0)

    def test_false_positive_does_not_count(self):
        trace = synthetic_trace('a', 5, False, 1.0, 0.0)
        trace.records.append({'type': 'approach', 'tick': 4, 'agent': 0,
                              'category': 'chair', 'instance_id': None,
                              'is_false_positive': True})
        self.assertEqual(check_success(trace), 0)

    def test_exploration_counts_as_success(self):
        trace = synthetic_trace('a', 5, False, 1.0, 0.0)
        trace.records[-1]['coverage'] = 0.96
        self.assertEqual(check_success(trace), 1)

    def test_too_many_steps(self):
        trace = synthetic_trace('a', 5, False, 1.0, 0.0)
        with self.assertRaises(TraceError):
            check_success(trace, Task('room', 'chair', max_steps=3))


class TestTraceFiles(TempDirMixin, unittest.TestCase):

    def test_write_and_read(self):
        trace = synthetic_trace('room-000', 3, True, 1.5, 0.25)
        write_trace(trace, self.path('t.jsonl'))
        loaded = read_trace(self.path('t.jsonl'))
        self.assertEqual(loaded.records, trace.records)
        self.assertEqual(loaded.summary(), trace.summary())
        self.assertEqual(check_success(loaded), 1)

    def test_missing_summary(self):
        with open(self.path('t.jsonl'), 'w') as f:
            f.write(json.dumps({'type': 'step', 'tick': 0}) + '\n')
        with self.assertRaises(TraceError):
            read_trace(self.path('t.jsonl'))

    def test_step_count_mismatch(self):
        trace = synthetic_trace('room-000', 3, False, 1.5, 0.25)
        summary = trace.summary()
        summary['steps'] = 7
        with open(self.path('t.jsonl'), 'w') as f:
            for record in trace.records + [summary]:
                f.write(json.dumps(record) + '\n')
        with self.assertRaises(TraceError):
            read_trace(self.path('t.jsonl'))

    def test_not_json(self):
        with open(self.path('t.jsonl'), 'w') as f:
            f.write('step 0\n')
        with self.assertRaises(TraceError):
            read_trace(self.path('t.jsonl'))


class TestEpisode(unittest.TestCase):

    def test_zero_budget(self):
        trace = run_episode(Task('room', 'chair', max_steps=0), room())
        self.assertEqual(trace.termination, BUDGET_EXHAUSTED)
        self.assertEqual(trace.num_steps, 0)
        self.assertEqual(check_success(trace), 0)

    def test_finds_the_chair(self):
        task = Task('room', 'chair', agents=2, max_steps=60, seed=1)
        trace = run_episode(task, room(), planner='greedy')
        self.assertEqual(trace.termination, SUCCESS)
        self.assertLessEqual(trace.num_steps, 60)
        self.assertEqual(check_success(trace), 1)
        self.assertEqual(trace.hazard_exposure, 0.0)
        self.assertEqual(trace.condition, 'normal')

    def test_robots_die_in_flames(self):
        scene = room()
        flames = [(r, c, 1.0) for r in range(5, 20) for c in range(5, 20)]
        task = Task('room', 'chair', agents=1, max_steps=10)
        with self.assertLogs('vulcan.episode', 'INFO'):
            trace = run_episode(task, scene,
                                FireConfig(flame_sources=flames),
                                params=EpisodeParams(lethal_hazard=0.4))
        self.assertEqual(trace.termination, ALL_AGENTS_LOST)
        self.assertEqual(trace.num_steps, 1)
        self.assertEqual(len(trace.events('lost')), 1)
        self.assertGreater(trace.hazard_exposure, 0.0)
        self.assertEqual(trace.condition, 'fire')

    def test_deterministic(self):
        scene = room()
        task = Task('room', 'sofa', agents=2, max_steps=4, seed=9)
        fire = FireConfig(flame_sources=[(20, 40, 1.0)])
        a = run_episode(task, scene, fire, planner='vlm_mock')
        b = run_episode(task, scene, fire, planner='vlm_mock')
        self.assertEqual(a.records, b.records)
        self.assertEqual(a.summary(), b.summary())

    def test_no_exposure_without_fire(self):
        task = Task('room', 'sofa', agents=2, max_steps=15, seed=4)
        for name in PLANNERS:
            if name == 'vlm_http':
                planner = make_planner(name, backend=MockBackend())
            else:
                planner = name
            trace = run_episode(task, room(), planner=planner)
            self.assertEqual(trace.hazard_exposure, 0.0, name)
            self.assertEqual(trace.condition, 'normal')
            steps = trace.steps
            self.assertTrue(steps)
            self.assertTrue(all(robot['hazard'] == 0.0 for step in steps
                                for robot in step['robots']))

    def test_dead_backend_falls_back(self):
        backend = ScriptedBackend(BackendError('connection refused'))
        planner = make_planner('vlm_http', backend=backend)
        task = Task('room', 'chair', agents=2, max_steps=20, seed=1)
        with self.assertLogs('vulcan.global_planning', 'WARNING'):
            trace = run_episode(task, room(), planner=planner)
        assignments = trace.events('assignment')
        self.assertTrue(assignments)
        self.assertTrue(all(a['fallback'] for a in assignments))
        self.assertTrue(backend.prompts)
        self.assertIn(trace.termination, (SUCCESS, BUDGET_EXHAUSTED))
        self.assertEqual(trace.hazard_exposure, 0.0)

    def test_unknown_target(self):
        with self.assertRaises(ConfigError):
            Episode(Task('room', 'piano'), room())

    def test_spawn_in_wall(self):
        with self.assertRaises(ConfigError):
            Episode(Task('room', 'chair', spawn=(0.1, 0.1)), room())

    def test_task_validation(self):
        with self.assertRaises(ConfigError):
            Task('room', 'chair', agents=0)
        with self.assertRaises(ConfigError):
            Task('room', 'chair', max_steps=-1)

    def test_batch_does_not_depend_on_workers(self):
        scene = room()
        jobs = [Job(Task('room', target, max_steps=3, seed=i,
                         episode_id=f'room-{i:03d}'), scene,
                    planner='cost_utility')
                for i, target in enumerate(['chair', 'sofa', 'tv'])]
        serial = run_batch(jobs, 1)
        threaded = run_batch(reversed(jobs), 3)
        self.assertEqual([t.episode_id for t in threaded],
                         ['room-000', 'room-001', 'room-002'])
        for a, b in zip(serial, threaded):
            self.assertEqual(a.records, b.records)


class TestRender(TempDirMixin, unittest.TestCase):

    def test_layer_colours(self):
        hazard_map = ObstacleHazardMap(
            np.array([[FREE, OCCUPIED], [UNKNOWN, FREE]], dtype=np.int8),
            np.array([[0.0, 0.0], [0.0, 1.0]]),
            np.ones((2, 2), dtype=bool))
        pixels = layer_pixels(hazard_map)
        self.assertEqual(pixels[0, 0].tolist(), [255, 255, 255])
        self.assertEqual(pixels[0, 1].tolist(), [0, 0, 0])
        self.assertEqual(pixels[1, 0].tolist(), [128, 128, 128])
        self.assertEqual(pixels[1, 1].tolist(), [255, 0, 0])
        self.assertEqual(map_image(hazard_map).size, (8, 8))

    def test_arrival_image(self):
        field = ArrivalField(np.array([[0.0, np.inf]]), ((0, 0),), 1.0)
        image = arrival_image(field)
        self.assertEqual(image.size, (8, 4))
        self.assertEqual(image.getpixel((0, 0)), 255)
        self.assertEqual(image.getpixel((4, 0)), 0)

    def test_trajectories(self):
        hazard_map = half_explored_map()
        image = trajectories_image(hazard_map, {0: [(1, 1), (1, 2)],
                                                1: [(5, 5)]})
        self.assertEqual(image.size, (80, 80))
        self.assertNotEqual(image.getpixel((6, 6)), (255, 255, 255))

    def test_save_image_makes_directories(self):
        image = map_image(half_explored_map())
        path = save_image(image, self.path('a', 'b', 'map.png'))
        self.assertTrue(os.path.exists(path))


class TestCommandLine(TempDirMixin, unittest.TestCase):

    def setUp(self):
        super().setUp()
        root = logging.getLogger()
        handlers = list(root.handlers)
        level = root.level

        def restore():
            for handler in list(root.handlers):
                if handler not in handlers:
                    root.removeHandler(handler)
            root.setLevel(level)

        self.addCleanup(restore)

    def main(self, *args):
        out = io.StringIO()
        with contextlib.redirect_stdout(out), \
                contextlib.redirect_stderr(io.StringIO()):
            code = main(['vulcan', *args])
        return code, out.getvalue()

    def test_gen_scenes_is_reproducible(self):
        for name in ('a', 'b'):
            code, out = self.main('gen-scenes', '--count', '2', '--seed',
                                  '8', '--out', self.path(name))
            self.assertEqual(code, 0)
        names = sorted(os.listdir(self.path('a')))
        self.assertEqual(names, ['manifest.json', 'rooms_8_000.json',
                                 'rooms_8_001.json'])
        for name in names:
            with open(self.path('a', name), 'rb') as a, \
                    open(self.path('b', name), 'rb') as b:
                self.assertEqual(a.read(), b.read())

    def test_run_is_reproducible(self):
        for name in ('a', 'b'):
            code, out = self.main(
                '-q', 'run', '--scenes', 'apartment_small', '--planner',
                'vlm_mock', '--episodes', '1', '--agents', '2',
                '--max-steps', '5', '--seed', '3', '--workers', '1',
                '--out', self.path(name))
            self.assertEqual(code, 0)
        with open(self.path('a', 'aggregate.csv'), 'rb') as a, \
                open(self.path('b', 'aggregate.csv'), 'rb') as b:
            self.assertEqual(a.read(), b.read())
        with open(self.path('a', 'manifest.json')) as f:
            manifest = json.load(f)
        self.assertIn('requests', manifest['versions'])
        self.assertIn('jsonschema', manifest['versions'])

    def test_layered_config(self):
        with open(self.path('run.json'), 'w') as f:
            json.dump({'agents': 1, 'episodes': 4, 'planner': 'greedy'}, f)
        args = build_parser('vulcan').parse_args(
            ['run', '--config', self.path('run.json'), '--agents', '3',
             '--set', 'local.alpha=0', '--set', 'lethal_hazard=0.5'])
        config = layered_config(args, {'VULCAN_EPISODES': '7',
                                       'VULCAN_AGENTS': '5'})
        self.assertEqual(config.agents, 3)
        self.assertEqual(config.episodes, 7)
        self.assertEqual(config.planner, 'greedy')
        self.assertEqual(config.params.local.alpha, 0.0)
        self.assertEqual(config.params.lethal_hazard, 0.5)

    def test_bad_planner_from_environment(self):
        args = build_parser('vulcan').parse_args(['run'])
        with self.assertRaises(ConfigError):
            layered_config(args, {'VULCAN_PLANNER': 'oracle'})

    def test_config_digest(self):
        self.assertEqual(RunConfig(seed=1).digest(), RunConfig(seed=1)
                         .digest())
        self.assertNotEqual(RunConfig(seed=1).digest(),
                            RunConfig(seed=2).digest())

    def test_merge_rows(self):
        rows = [{'method': 'vlm_mock', 'condition': 'fire', 'episodes': 2,
                 'excluded': 0, 'NS': 10.0, 'SR': 0.5, 'SPL': 0.25,
                 'CHE': 1.0},
                {'method': 'vlm_mock', 'condition': 'fire', 'episodes': 6,
                 'excluded': 1, 'NS': 20.0, 'SR': 1.0, 'SPL': 0.5,
                 'CHE': 3.0}]
        merged, = merge_rows(rows)
        self.assertEqual(merged['episodes'], 8)
        self.assertEqual(merged['excluded'], 1)
        self.assertAlmostEqual(merged['NS'], 17.5)
        self.assertAlmostEqual(merged['SR'], 0.875)
        self.assertAlmostEqual(merged['SPL'], 0.4375)
        self.assertAlmostEqual(merged['CHE'], 4.0)

    def test_bad_metrics_row(self):
        with open(self.path('aggregate.csv'), 'w') as f:
            f.write('method,condition,episodes\ngreedy,normal,many\n')
        with self.assertRaises(TraceError):
            read_metrics_csv(self.path('aggregate.csv'))

    def test_report_without_results(self):
        os.makedirs(self.path('empty'))
        with open(self.path('empty', 'manifest.json'), 'w') as f:
            json.dump({'config': {}}, f)
        code, out = self.main('report', self.path('empty'))
        self.assertEqual(code, 3)

    def test_corrupt_manifest(self):
        with open(self.path('manifest.json'), 'w') as f:
            f.write('{not json')
        code, out = self.main('run', '--manifest',
                              self.path('manifest.json'))
        self.assertEqual(code, 3)

    def test_bad_override(self):
        code, out = self.main('run', '--set', 'local.alpha')
        self.assertEqual(code, 2)

    def test_unknown_scene(self):
        code, out = self.main('run', '--scenes', self.path('missing.json'),
                              '--seed', '1')
        self.assertEqual(code, 3)

    def test_version(self):
        code, out = self.main('--version')
        self.assertEqual(code, 0)

    def test_render(self):
        hazard_map = half_explored_map()
        hazard_map.H[:, 5:10] = 0.4
        write_map(hazard_map, extract_frontiers(hazard_map, min_size=1),
                  self.path('dump'))
        trace = EpisodeTrace(
            Task('half', 'chair', episode_id='half-000'),
            [{'type': 'step', 'tick': 0, 'coverage': 0.5,
              'robots': [{'id': 0, 'x': 0.125, 'y': 0.525}]}])
        write_trace(trace, self.path('half-000.jsonl'))
        code, out = self.main('render', '--map', self.path('dump'),
                              '--trace', self.path('half-000.jsonl'),
                              '--out', self.path('pictures'))
        self.assertEqual(code, 0)
        self.assertEqual(sorted(os.listdir(self.path('pictures'))),
                         ['arrival.png', 'frontiers.png', 'layers.png',
                          'paths.json', 'trajectories.png'])
        with open(self.path('pictures', 'paths.json')) as f:
            paths = json.load(f)
        self.assertEqual(list(paths), ['0'])
        self.assertAlmostEqual(paths['0'][-1][0], 0.475)

    def test_render_missing_dump(self):
        code, out = self.main('render', '--map', self.path('nowhere'),
                              '--out', self.path('pictures'))
        self.assertEqual(code, 3)


def test_suite():
    return unittest.defaultTestLoader.loadTestsFromName(__name__)


if __name__ == '__main__':
    unittest.main(defaultTest='test_suite')
