"""Command-line entry point.

    vulcan gen-scenes --count 6 --seed 1 --out scenes/
    vulcan run --scenes scenes/ --planner vlm_mock --fire --out results/
    vulcan report results/ --csv table.csv
    vulcan render --map results/maps/scene-000 --out pictures/

Exit codes: 0 on success, 2 for configuration errors, 3 for I/O errors.
"""

import argparse
import csv
import glob
import hashlib
import json
import logging
import os
import sys
from dataclasses import dataclass
from importlib import metadata

import numpy as np

import vulcan
from vulcan.config import Params
from vulcan.episode import (
    DistanceOracle,
    EpisodeParams,
    Job,
    Task,
    compute_metrics,
    read_trace,
    run_batch,
    write_trace,
)
from vulcan.errors import ConfigError, TraceError, VulcanError
from vulcan.global_planning import PLANNERS
from vulcan.local_planning import extract_path, hazard_speed, solve_fmm
from vulcan.mapping import read_map
from vulcan.render import (
    arrival_image,
    frontiers_image,
    map_image,
    save_image,
    trajectories_image,
)
from vulcan.scenes import BUNDLED_SCENES, generate_scene
from vulcan.world import (
    FIRE_PRESETS,
    load_fire_config,
    load_scene,
    place_fire,
    save_scene,
    stream_rng,
)


logger = logging.getLogger(__name__)

CONFIG_ERROR = 2
IO_ERROR = 3

METRIC_COLUMNS = ('method', 'condition', 'episodes', 'excluded', 'NS', 'SR',
                  'SPL', 'CHE')

ENVIRONMENT = {
    'VULCAN_SEED': 'seed',
    'VULCAN_PLANNER': 'planner',
    'VULCAN_EPISODES': 'episodes',
    'VULCAN_AGENTS': 'agents',
    'VULCAN_WORKERS': 'workers',
}


@dataclass(frozen=True)
class RunConfig(Params):
    """Everything ``vulcan run`` needs; the manifest stores it whole."""

    scenes: str = ''
    planner: str = 'vlm_mock'
    episodes: int = 10
    agents: int = 2
    max_steps: int = 500
    target: str = ''
    fire: bool = False
    fire_config: str = ''
    fire_level: str = 'moderate'
    seed: int = None
    workers: int = 0
    out: str = 'results'
    dump_maps: bool = False
    params: EpisodeParams = EpisodeParams()

    def __post_init__(self):
        if self.planner not in PLANNERS:
            raise ConfigError(f"unknown planner {self.planner!r}; choose"
                              f" from {', '.join(PLANNERS)}")
        if self.episodes < 1:
            raise ConfigError("episodes must be at least 1")
        if self.agents < 1:
            raise ConfigError("agents must be at least 1")
        if self.max_steps < 0:
            raise ConfigError("max_steps must be non-negative")
        if self.fire_level not in FIRE_PRESETS:
            raise ConfigError(f"unknown fire level {self.fire_level!r}")
        if self.workers < 0:
            raise ConfigError("workers must be non-negative")
        if self.seed is not None and (isinstance(self.seed, bool)
                                      or not isinstance(self.seed, int)
                                      or self.seed < 0):
            raise ConfigError(f"seed must be a non-negative integer, got"
                              f" {self.seed!r}")

    def digest(self):
        text = json.dumps(self.to_dict(), sort_keys=True)
        return hashlib.sha256(text.encode()).hexdigest()


def parse_literal(text):
    """A JSON literal, or the text itself when it is not one."""
    try:
        return json.loads(text)
    except json.JSONDecodeError:
        return text


def apply_override(data, assignment):
    """Apply one ``group.key=value`` override to a config dict."""
    if '=' not in assignment:
        raise ConfigError(f"--set expects group.key=value, got"
                          f" {assignment!r}")
    path, value = assignment.split('=', 1)
    keys = path.strip().split('.')
    if not all(keys):
        raise ConfigError(f"bad override name {path!r}")
    target = data.setdefault('params', {})
    for key in keys[:-1]:
        target = target.setdefault(key, {})
        if not isinstance(target, dict):
            raise ConfigError(f"{path}: {key} is not a parameter group")
    target[keys[-1]] = parse_literal(value)
    return data


def _merge(base, extra):
    for key, value in extra.items():
        if isinstance(value, dict) and isinstance(base.get(key), dict):
            _merge(base[key], value)
        else:
            base[key] = value
    return base


def layered_config(args, environ=None):
    """File < environment < flags < ``--set`` overrides."""
    environ = os.environ if environ is None else environ
    data = RunConfig().to_dict()
    if args.manifest:
        _merge(data, read_manifest(args.manifest)['config'])
    if args.config:
        with open(args.config) as f:
            try:
                loaded = json.load(f)
            except json.JSONDecodeError as e:
                raise ConfigError(f"{args.config}: {e}")
        if not isinstance(loaded, dict):
            raise ConfigError(f"{args.config}: expected a JSON object")
        _merge(data, loaded)
    for variable, key in ENVIRONMENT.items():
        if environ.get(variable):
            value = environ[variable]
            data[key] = value if key == 'planner' else parse_literal(value)
    for key in ('scenes', 'planner', 'episodes', 'agents', 'max_steps',
                'target', 'fire', 'fire_config', 'fire_level', 'seed',
                'workers', 'out', 'dump_maps'):
        value = getattr(args, key, None)
        if value is not None:
            data[key] = value
    for assignment in args.set or ():
        apply_override(data, assignment)
    return RunConfig.from_dict(data)


def entropy_seed():
    return int(np.random.SeedSequence().entropy % (2 ** 32))


def resolve_scenes(names, seed):
    """Scenes named by ``--scenes``: a directory, files or bundled names.

    An empty value generates the default set of six scenes.
    """
    if not names:
        return [generate_scene(f'rooms_{seed}_{i:03d}', seed, i)
                for i in range(6)]
    scenes = []
    for item in names.split(','):
        item = item.strip()
        if os.path.isdir(item):
            paths = sorted(p for p in glob.glob(os.path.join(item, '*.json'))
                           if os.path.basename(p) != 'manifest.json')
            if not paths:
                raise ConfigError(f"{item}: no scene files")
            scenes.extend(load_scene(path) for path in paths)
        else:
            scenes.append(load_scene(item))
    ids = [s.scene_id for s in scenes]
    if len(set(ids)) != len(ids):
        raise ConfigError(f"duplicate scene ids in {ids}")
    return scenes


def episode_fire(config, scene, seed, spawn):
    if not config.fire:
        return None
    placed = place_fire(scene, config.fire_level, seed, spawn)
    if not config.fire_config:
        return placed
    loaded = load_fire_config(config.fire_config)
    if loaded.flame_sources:
        return loaded
    return loaded.replace(flame_sources=placed.flame_sources)


def plan_jobs(config, scenes):
    jobs = []
    condition = 'fire' if config.fire else 'normal'
    for index, scene in enumerate(scenes):
        present = sorted({obj.category for obj in scene.objects})
        if config.target and config.target not in present:
            raise ConfigError(f"{scene.scene_id}: no {config.target!r} to"
                              f" search for")
        if not present:
            raise ConfigError(f"{scene.scene_id}: scene has no objects")
        for e in range(config.episodes):
            rng = stream_rng(config.seed, 'episode', index, e)
            target = config.target or present[int(rng.integers(
                len(present)))]
            spawn = None
            if scene.starts:
                spawn = scene.starts[int(rng.integers(len(scene.starts)))]
            seed = int(rng.integers(2 ** 31))
            task = Task(scene.scene_id, target, config.agents, spawn,
                        max_steps=config.max_steps, seed=seed,
                        episode_id=f'{scene.scene_id}-{e:03d}')
            dump = None
            if config.dump_maps:
                dump = os.path.join(config.out, 'maps', task.episode_id)
            jobs.append(Job(task, scene,
                            episode_fire(config, scene, seed,
                                         spawn),
                            config.planner, config.params, config.planner,
                            condition, dump))
    return jobs


RUNTIME_PACKAGES = ('numpy', 'scipy', 'scikit-learn', 'Pillow', 'requests',
                    'jsonschema')


def versions():
    found = {'vulcan': vulcan.__version__}
    for name in RUNTIME_PACKAGES:
        try:
            found[name.lower()] = metadata.version(name)
        except metadata.PackageNotFoundError:
            found[name.lower()] = None
    return found


def write_metrics_csv(rows, path):
    with open(path, 'w', newline='') as f:
        writer = csv.DictWriter(f, fieldnames=METRIC_COLUMNS,
                                lineterminator='\n')
        writer.writeheader()
        for row in rows:
            writer.writerow({key: _cell(row[key]) for key in METRIC_COLUMNS})


def _cell(value):
    return f'{value:.6f}' if isinstance(value, float) else value


def read_metrics_csv(path):
    rows = []
    with open(path, newline='') as f:
        for row in csv.DictReader(f):
            try:
                rows.append({'method': row['method'],
                             'condition': row['condition'],
                             'episodes': int(row['episodes']),
                             'excluded': int(row['excluded']),
                             'NS': float(row['NS']), 'SR': float(row['SR']),
                             'SPL': float(row['SPL']),
                             'CHE': float(row['CHE'])})
            except (KeyError, TypeError, ValueError) as e:
                raise TraceError(f"{path}: bad metrics row: {e}")
    return rows


def read_manifest(path):
    if os.path.isdir(path):
        path = os.path.join(path, 'manifest.json')
    try:
        with open(path) as f:
            manifest = json.load(f)
    except json.JSONDecodeError as e:
        raise TraceError(f"{path}: corrupt manifest: {e}")
    if not isinstance(manifest, dict) or 'config' not in manifest:
        raise TraceError(f"{path}: corrupt manifest: no config")
    return manifest


def cmd_gen_scenes(args):
    seed = entropy_seed() if args.seed is None else args.seed
    if args.count < 1:
        raise ConfigError("count must be at least 1")
    os.makedirs(args.out, exist_ok=True)
    names = []
    for i in range(args.count):
        scene_id = f'{args.layout}_{seed}_{i:03d}'
        scene = generate_scene(scene_id, seed, i, args.layout,
                               (args.size_min, args.size_max),
                               args.density)
        path = os.path.join(args.out, scene_id + '.json')
        save_scene(scene, path)
        names.append(os.path.basename(path))
        logger.info("wrote %s (%dx%d cells, %d objects)", path,
                    scene.width, scene.height, len(scene.objects))
    with open(os.path.join(args.out, 'manifest.json'), 'w') as f:
        json.dump({'seed': seed, 'layout': args.layout,
                   'size_range': [args.size_min, args.size_max],
                   'density': args.density, 'scenes': names}, f,
                  sort_keys=True, indent=1)
        f.write('\n')
    return 0


def cmd_run(args):
    config = layered_config(args)
    if config.seed is None:
        config = config.replace(seed=entropy_seed())
        logger.info("no seed given, using %d", config.seed)
    scenes = resolve_scenes(config.scenes, config.seed)
    jobs = plan_jobs(config, scenes)
    workers = config.workers or os.cpu_count() or 1
    traces = run_batch(jobs, workers)

    os.makedirs(os.path.join(config.out, 'traces'), exist_ok=True)
    for trace in traces:
        write_trace(trace, os.path.join(config.out, 'traces',
                                        trace.episode_id + '.jsonl'))
    oracle = DistanceOracle({s.scene_id: s for s in scenes})
    metrics = compute_metrics(traces, oracle)
    row = {'method': config.planner,
           'condition': 'fire' if config.fire else 'normal',
           **metrics.to_dict()}
    write_metrics_csv([row], os.path.join(config.out, 'aggregate.csv'))
    manifest = {'config': config.to_dict(), 'config_hash': config.digest(),
                'seed': config.seed, 'versions': versions(),
                'scenes': [s.scene_id for s in scenes],
                'episodes': [t.episode_id for t in traces]}
    with open(os.path.join(config.out, 'manifest.json'), 'w') as f:
        json.dump(manifest, f, sort_keys=True, indent=1)
        f.write('\n')
    print(format_table([row]))
    return 0


def merge_rows(rows):
    """One row per (method, condition); rates weighted by episodes.

    Hazard exposure is a total, so it adds up across runs.
    """
    groups = {}
    for row in rows:
        groups.setdefault((row['method'], row['condition']), []).append(row)
    merged = []
    for (method, condition), group in sorted(groups.items()):
        n = sum(r['episodes'] for r in group)
        out = {'method': method, 'condition': condition, 'episodes': n,
               'excluded': sum(r['excluded'] for r in group),
               'CHE': sum(r['CHE'] for r in group)}
        for key in ('NS', 'SR', 'SPL'):
            out[key] = (sum(r[key] * r['episodes'] for r in group) / n
                        if n else 0.0)
        merged.append(out)
    return merged


def format_table(rows):
    header = list(METRIC_COLUMNS)
    body = [[str(_cell(row[key])) for key in header] for row in rows]
    widths = [max(len(line[i]) for line in [header] + body)
              for i in range(len(header))]
    lines = []
    for line in [header] + body:
        lines.append('  '.join(cell.ljust(width) if i < 2
                               else cell.rjust(width)
                               for i, (cell, width)
                               in enumerate(zip(line, widths))).rstrip())
    return '\n'.join(lines)


def cmd_report(args):
    rows = []
    for directory in args.dirs:
        read_manifest(directory)
        path = os.path.join(directory, 'aggregate.csv')
        if not os.path.exists(path):
            raise TraceError(f"{directory}: no aggregate.csv")
        rows.extend(read_metrics_csv(path))
    if not rows:
        raise TraceError("no results to report")
    merged = merge_rows(rows)
    if args.csv:
        write_metrics_csv(merged, args.csv)
    print(format_table(merged))
    return 0


def trace_tracks(trace, hazard_map):
    """Visited cells per robot, in step order."""
    tracks = {}
    for step in trace.steps:
        for robot in step['robots']:
            cell = hazard_map.cell_of(robot['x'], robot['y'])
            cells = tracks.setdefault(robot['id'], [])
            if not cells or cells[-1] != cell:
                cells.append(cell)
    return tracks


def cmd_render(args):
    hazard_map, frontiers = read_map(args.map)
    params = EpisodeParams()
    if args.alpha is not None:
        params = params.replace(local=params.local.replace(alpha=args.alpha))
    written = [save_image(map_image(hazard_map),
                          os.path.join(args.out, 'layers.png')),
               save_image(frontiers_image(hazard_map, frontiers),
                          os.path.join(args.out, 'frontiers.png'))]
    trace = read_trace(args.trace) if args.trace else None
    if trace is not None:
        written.append(save_image(
            trajectories_image(hazard_map, trace_tracks(trace, hazard_map)),
            os.path.join(args.out, 'trajectories.png')))
    if frontiers:
        lp = params.local
        goals = [cell for f in frontiers for cell in f.cells]
        speed = hazard_speed(hazard_map, lp.alpha, lp.unknown_factor,
                             lp.inflation).reopen(goals)
        field = solve_fmm(speed, goals)
        written.append(save_image(arrival_image(field),
                                  os.path.join(args.out, 'arrival.png')))
        if trace is not None and trace.steps:
            paths = {}
            for robot in trace.steps[-1]['robots']:
                try:
                    path = extract_path(field, (robot['x'], robot['y']),
                                        lp.path_step, lp.max_iterations)
                except VulcanError as e:
                    logger.warning("no path for robot %d: %s", robot['id'],
                                   e)
                    continue
                paths[str(robot['id'])] = [list(v) for v in path]
            path_file = os.path.join(args.out, 'paths.json')
            with open(path_file, 'w') as f:
                json.dump(paths, f, sort_keys=True, indent=1)
                f.write('\n')
            written.append(path_file)
    for path in written:
        logger.info("wrote %s", path)
    return 0


def build_parser(progname=None):
    description = __doc__.strip().split('\n\n')[0]
    parser = argparse.ArgumentParser(prog=progname, description=description)
    parser.add_argument('--version', action='version',
                        version='%(prog)s ' + vulcan.__version__)
    parser.add_argument('-v', '--verbose', action='count', default=0,
                        help='more logging (-vv for debug output)')
    parser.add_argument('-q', '--quiet', action='store_true',
                        help='log errors only')
    commands = parser.add_subparsers(dest='command', metavar='command')
    commands.required = True

    gen = commands.add_parser('gen-scenes', help='generate scene files')
    gen.add_argument('--count', type=int, default=6)
    gen.add_argument('--layout', choices=('rooms', 'detour'),
                     default='rooms')
    gen.add_argument('--size-min', type=float, default=6.0,
                     help='smallest side in meters (default: 6)')
    gen.add_argument('--size-max', type=float, default=10.0,
                     help='largest side in meters (default: 10)')
    gen.add_argument('--density', type=float, default=1.0,
                     help='extra objects per 10 square meters')
    gen.add_argument('--seed', type=int)
    gen.add_argument('--out', required=True, metavar='DIR')
    gen.set_defaults(func=cmd_gen_scenes)

    run = commands.add_parser('run', help='run a batch of episodes')
    run.add_argument('--scenes', metavar='DIR|FILE|NAME',
                     help='scene directory, files or bundled names ('
                          + ', '.join(sorted(BUNDLED_SCENES)) + '),'
                          ' comma separated; default: six generated scenes')
    run.add_argument('--planner', choices=PLANNERS)
    run.add_argument('--episodes', type=int, help='episodes per scene')
    run.add_argument('--agents', type=int)
    run.add_argument('--max-steps', type=int, dest='max_steps')
    run.add_argument('--target', help='target category (default: drawn'
                                      ' per episode)')
    run.add_argument('--fire', action='store_true', default=None)
    run.add_argument('--no-fire', action='store_false', dest='fire')
    run.add_argument('--fire-config', dest='fire_config', metavar='FILE')
    run.add_argument('--fire-level', dest='fire_level',
                     choices=sorted(FIRE_PRESETS))
    run.add_argument('--seed', type=int)
    run.add_argument('--workers', type=int,
                     help='worker threads (default: logical cores)')
    run.add_argument('--out', metavar='DIR')
    run.add_argument('--dump-maps', action='store_true', default=None,
                     dest='dump_maps')
    run.add_argument('--set', action='append', metavar='GROUP.KEY=VALUE',
                     help='override a parameter, e.g. local.alpha=0;'
                          ' can be repeated')
    run.add_argument('--config', metavar='FILE', help='JSON run config')
    run.add_argument('--manifest', metavar='FILE',
                     help='replay the config of an earlier run')
    run.set_defaults(func=cmd_run)

    report = commands.add_parser('report', help='compare result directories')
    report.add_argument('dirs', nargs='+', metavar='DIR')
    report.add_argument('--csv', metavar='FILE')
    report.set_defaults(func=cmd_report)

    render = commands.add_parser('render', help='draw maps and traces')
    render.add_argument('--map', required=True, metavar='DIR',
                        help='map dump written with --dump-maps')
    render.add_argument('--trace', metavar='FILE')
    render.add_argument('--alpha', type=float,
                        help='hazard weight of the arrival field')
    render.add_argument('--out', required=True, metavar='DIR')
    render.set_defaults(func=cmd_render)
    return parser


def configure_logging(verbose, quiet):
    if quiet:
        level = logging.ERROR
    elif verbose >= 2:
        level = logging.DEBUG
    elif verbose == 1:
        level = logging.INFO
    else:
        level = logging.WARNING
    logging.basicConfig(level=level, stream=sys.stderr,
                        format='%(levelname)s %(name)s: %(message)s',
                        force=True)


def main(argv=None):
    progname = os.path.basename(argv[0]) if argv else None
    parser = build_parser(progname)
    try:
        args = parser.parse_args(args=argv[1:] if argv else None)
    except SystemExit as e:
        return e.code
    configure_logging(args.verbose, args.quiet)
    prog = parser.prog
    try:
        return args.func(args)
    except ConfigError as e:
        print(f"{prog}: error: {e}", file=sys.stderr)
        return CONFIG_ERROR
    except (OSError, TraceError) as e:
        print(f"{prog}: error: {e}", file=sys.stderr)
        return IO_ERROR


if __name__ == '__main__':
    sys.exit(main())
