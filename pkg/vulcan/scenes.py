"""Bundled scenes and the procedural scene generator.

Scenes are drawn as character maps where every character is a square block
of ``block`` cells.  The legend:

    #   wall              S   start position
    .   free floor        F   flame source (crafted fire scenes)
    c   chair             s   sofa
    p   plant             b   bed
    t   toilet            v   tv

Adjacent blocks with the same object letter form one object instance.
"""

import numpy as np
from scipy import ndimage

from vulcan.errors import ConfigError
from vulcan.world import (
    DEFAULT_CATEGORIES,
    DEFAULT_RESOLUTION,
    EIGHT_CONNECTED,
    ObjectInstance,
    Scene,
    stream_rng,
)


LEGEND = {
    'c': 'chair',
    's': 'sofa',
    'p': 'plant',
    'b': 'bed',
    't': 'toilet',
    'v': 'tv',
}
LETTERS = {category: letter for letter, category in LEGEND.items()}

BLOCK = 5

APARTMENT_SMALL = """\
########################
#......#.......#.......#
#.cc...#..bbb..#...tt..#
#......#..bbb..#...tt..#
#..............#.......#
#......#...............#
###.######...#######.###
#......................#
#..ss..................#
#..ss...........pp.....#
#...............pp.....#
#.vv...................#
#.....S..........#.....#
#................#.....#
#................#.....#
########################
"""


def detour_map(length=16, fire_at=None, room=6):
    """Draw a start room and a target room joined by two corridors.

    The direct corridor is ``length`` blocks long and has a flame source in
    it; the detour corridor runs around the top and is always longer.
    """
    if fire_at is None:
        fire_at = length // 3
    if not 0 <= fire_at < length:
        raise ConfigError(f"fire_at must lie inside the corridor: {fire_at}")
    width = 2 * room + length + 2
    solid = '#' * width
    open_row = '#' + '.' * (width - 2) + '#'
    connector = '#..' + '#' * (width - 6) + '..#'
    rooms = '#' + '.' * room + '#' * length + '.' * room + '#'
    corridor = list(open_row)
    corridor[2] = 'S'
    corridor[1 + room + fire_at] = 'F'
    corridor[width - 5:width - 3] = ['t', 't']
    lower = list(open_row)
    lower[width - 5:width - 3] = ['t', 't']
    rows = [solid, open_row, open_row, connector, connector,
            rooms, rooms, rooms, ''.join(corridor), ''.join(lower),
            rooms, rooms, rooms, solid]
    return '\n'.join(rows) + '\n'


BUNDLED_SCENES = {
    'apartment_small': APARTMENT_SMALL,
    'detour_small': detour_map(),
}


def scene_from_ascii(scene_id, text, block=BLOCK,
                     resolution=DEFAULT_RESOLUTION,
                     categories=DEFAULT_CATEGORIES):
    """Build a validated Scene from a character map."""
    lines = [line for line in text.splitlines() if line]
    if not lines or len({len(line) for line in lines}) != 1:
        raise ConfigError(f"{scene_id}: map rows must have equal length")
    chars = np.array([list(line) for line in lines])
    unknown = set(chars.ravel()) - set('#.SF') - set(LEGEND)
    if unknown:
        raise ConfigError(
            f"{scene_id}: unknown map characters {''.join(sorted(unknown))}")

    def expand(mask):
        return np.repeat(np.repeat(mask, block, axis=0), block, axis=1)

    def block_cells(rows, cols):
        cells = []
        for r, c in zip(rows, cols):
            for dr in range(block):
                for dc in range(block):
                    cells.append((r * block + dr, c * block + dc))
        return tuple(sorted(cells))

    occupancy = expand(chars == '#')
    found = []
    for letter, category in LEGEND.items():
        labels, count = ndimage.label(chars == letter,
                                      structure=EIGHT_CONNECTED)
        for n in range(1, count + 1):
            rows, cols = np.nonzero(labels == n)
            found.append((block_cells(rows.tolist(), cols.tolist()),
                          category))
    found.sort()
    objects = tuple(ObjectInstance(category, cells, instance_id)
                    for instance_id, (cells, category) in enumerate(found))
    middle = block // 2
    starts = tuple(((c * block + middle + 0.5) * resolution,
                    (r * block + middle + 0.5) * resolution)
                   for r, c in np.argwhere(chars == 'S').tolist())
    fire = tuple((r * block + middle, c * block + middle, 1.0)
                 for r, c in np.argwhere(chars == 'F').tolist())
    height, width = occupancy.shape
    return Scene(scene_id=scene_id, width=width, height=height,
                 occupancy=occupancy, resolution=resolution,
                 objects=objects, starts=starts, categories=categories,
                 fire_sources=fire).validate()


def bundled_scene(name):
    try:
        text = BUNDLED_SCENES[name]
    except KeyError:
        raise ConfigError(f"no bundled scene named {name!r}")
    return scene_from_ascii(name, text)


MIN_ROOM = 6


def _divide(grid, rng, r0, c0, r1, c1):
    """Recursively split the interior rectangle with walls that have doors.

    ``(r0, c0)`` .. ``(r1, c1)`` are inclusive interior block bounds.
    """
    tall = r1 - r0 + 1
    wide = c1 - c0 + 1
    if tall < 2 * MIN_ROOM + 1 and wide < 2 * MIN_ROOM + 1:
        return
    horizontal = tall > wide or (tall == wide and rng.random() < 0.5)
    if horizontal and tall < 2 * MIN_ROOM + 1:
        horizontal = False
    if not horizontal and wide < 2 * MIN_ROOM + 1:
        horizontal = True
    if horizontal:
        # a wall must end on walls, never in front of a door
        spots = [p for p in range(r0 + MIN_ROOM, r1 - MIN_ROOM + 1)
                 if grid[p, c0 - 1] == '#' and grid[p, c1 + 1] == '#']
        if not spots:
            return
        p = spots[int(rng.integers(len(spots)))]
        grid[p, c0:c1 + 1] = '#'
        door = c0 + int(rng.integers(wide - 1))
        grid[p, door:door + 2] = '.'
        _divide(grid, rng, r0, c0, p - 1, c1)
        _divide(grid, rng, p + 1, c0, r1, c1)
    else:
        spots = [p for p in range(c0 + MIN_ROOM, c1 - MIN_ROOM + 1)
                 if grid[r0 - 1, p] == '#' and grid[r1 + 1, p] == '#']
        if not spots:
            return
        p = spots[int(rng.integers(len(spots)))]
        grid[r0:r1 + 1, p] = '#'
        door = r0 + int(rng.integers(tall - 1))
        grid[door:door + 2, p] = '.'
        _divide(grid, rng, r0, c0, r1, p - 1)
        _divide(grid, rng, r0, p + 1, r1, c1)


def _object_spots(grid):
    """Top-left blocks of 2x2 footprints clear of walls by one block."""
    floor = grid == '.'
    clear = ndimage.binary_erosion(floor, structure=EIGHT_CONNECTED,
                                   border_value=0)
    spots = clear[:-1, :-1] & clear[1:, :-1] & clear[:-1, 1:] & clear[1:, 1:]
    return [tuple(spot) for spot in np.argwhere(spots).tolist()]


def rooms_map(rng, size_range=(6.0, 10.0), density=1.0, block=BLOCK,
              resolution=DEFAULT_RESOLUTION, categories=DEFAULT_CATEGORIES,
              starts=3):
    """Draw a rectangular apartment of rooms joined by doors.

    Every category gets one object; ``density`` adds that many extra
    objects per 10 square meters of floor.
    """
    low, high = size_range
    if not 0 < low <= high:
        raise ConfigError(f"bad size range {size_range}")
    block_m = block * resolution
    lo = max(2 * MIN_ROOM + 3, int(round(low / block_m)))
    hi = max(lo, int(round(high / block_m)))
    wide = int(rng.integers(lo, hi + 1))
    tall = int(rng.integers(lo, hi + 1))
    grid = np.full((tall, wide), '.', dtype='<U1')
    grid[0, :] = grid[-1, :] = '#'
    grid[:, 0] = grid[:, -1] = '#'
    _divide(grid, rng, 1, 1, tall - 2, wide - 2)

    spots = _object_spots(grid)
    taken = np.zeros(grid.shape, dtype=bool)
    area = (grid == '.').sum() * block_m ** 2
    wanted = list(categories)
    extra = int(round(density * area / 10.0))
    wanted += [categories[int(rng.integers(len(categories)))]
               for _ in range(extra)]
    for category in wanted:
        free_spots = [(r, c) for r, c in spots
                      if not taken[max(r - 1, 0):r + 3, max(c - 1, 0):c + 3]
                      .any()]
        if not free_spots:
            break
        r, c = free_spots[int(rng.integers(len(free_spots)))]
        grid[r:r + 2, c:c + 2] = LETTERS[category]
        taken[r:r + 2, c:c + 2] = True

    floor = np.argwhere(grid == '.').tolist()
    picks = rng.choice(len(floor), size=min(starts, len(floor)),
                       replace=False)
    for i in sorted(picks):
        r, c = floor[i]
        grid[r, c] = 'S'
    return '\n'.join(''.join(row) for row in grid) + '\n'


def generate_scene(scene_id, seed, index=0, layout='rooms',
                   size_range=(6.0, 10.0), density=1.0):
    """Generate one scene deterministically from ``(seed, index)``."""
    rng = stream_rng(seed, 'scene-' + layout, index)
    if layout == 'rooms':
        text = rooms_map(rng, size_range=size_range, density=density)
    elif layout == 'detour':
        length = int(rng.integers(14, 21))
        fire_at = int(rng.integers(length // 4, length // 2))
        text = detour_map(length=length, fire_at=fire_at)
    else:
        raise ConfigError(f"unknown layout {layout!r}")
    return scene_from_ascii(scene_id, text)
