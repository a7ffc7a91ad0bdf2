"""Top-down pictures of maps, frontiers, trajectories and arrival fields.

Image row 0 is grid row 0, so world ``y`` grows downwards in every
picture.  Each cell is drawn as a ``scale`` x ``scale`` block.
"""

import logging
import os

import numpy as np
from PIL import Image, ImageDraw

from vulcan.mapping import FREE, OCCUPIED


logger = logging.getLogger(__name__)

PIXELS_PER_CELL = 4

UNKNOWN_GRAY = 128
HAZARD_RED = np.array([255.0, 0.0, 0.0])
ROBOT_BLUE = (0, 64, 255)
FRONTIER_GREEN = (0, 170, 0)
TRAIL_COLORS = [(0, 64, 255), (255, 140, 0), (150, 0, 200), (0, 150, 150),
                (200, 0, 100), (90, 90, 0)]


def upscale(pixels, scale=PIXELS_PER_CELL):
    return np.repeat(np.repeat(pixels, scale, axis=0), scale, axis=1)


def cell_box(row, col, scale=PIXELS_PER_CELL):
    """Inclusive pixel box ``(x0, y0, x1, y1)`` of one cell."""
    return (col * scale, row * scale, (col + 1) * scale - 1,
            (row + 1) * scale - 1)


def world_to_pixel(hazard_map, x, y, scale=PIXELS_PER_CELL):
    ox, oy = hazard_map.origin
    return ((x - ox) / hazard_map.resolution * scale,
            (y - oy) / hazard_map.resolution * scale)


def layer_pixels(hazard_map):
    """RGB cell colours: obstacle, free and unknown with a hazard tint.

    The tint blends towards red with opacity ``clip(H, 0, 1)``, so the
    green and blue channels of a free cell fall as H rises.
    """
    shade = np.full(hazard_map.shape, UNKNOWN_GRAY, dtype=float)
    shade[hazard_map.O == FREE] = 255
    shade[hazard_map.O == OCCUPIED] = 0
    rgb = np.repeat(shade[:, :, None], 3, axis=2)
    alpha = np.clip(hazard_map.H, 0.0, 1.0)[:, :, None]
    rgb = (1 - alpha) * rgb + alpha * HAZARD_RED
    return np.round(rgb).astype(np.uint8)


def map_image(hazard_map, scale=PIXELS_PER_CELL):
    return Image.fromarray(upscale(layer_pixels(hazard_map), scale))


def _cross(draw, cx, cy, size, fill):
    draw.line([(cx - size, cy - size), (cx + size, cy + size)], fill=fill,
              width=2)
    draw.line([(cx - size, cy + size), (cx + size, cy - size)], fill=fill,
              width=2)


def draw_frontiers(image, hazard_map, frontiers, scale=PIXELS_PER_CELL,
                   cells=False):
    draw = ImageDraw.Draw(image)
    for frontier in frontiers:
        if cells:
            for row, col in frontier.cells:
                draw.rectangle(cell_box(row, col, scale), fill=FRONTIER_GREEN)
        cx, cy = world_to_pixel(hazard_map, *frontier.centroid, scale=scale)
        _cross(draw, cx, cy, scale + 2, FRONTIER_GREEN)
        draw.text((cx + scale + 3, cy - scale - 6), str(frontier.id),
                  fill=FRONTIER_GREEN)
    return image


def draw_robots(image, hazard_map, robots, scale=PIXELS_PER_CELL):
    """Mark ``(robot_id, x, y)`` triples as numbered circles."""
    draw = ImageDraw.Draw(image)
    radius = scale + 2
    for robot_id, x, y in robots:
        cx, cy = world_to_pixel(hazard_map, x, y, scale=scale)
        draw.ellipse([cx - radius, cy - radius, cx + radius, cy + radius],
                     outline=ROBOT_BLUE, width=2)
        draw.text((cx + radius + 1, cy - radius - 6), str(robot_id),
                  fill=ROBOT_BLUE)
    return image


def prompt_image(hazard_map, robots, frontiers, scale=PIXELS_PER_CELL):
    """The planning picture: map layers, labelled frontiers and robots."""
    image = map_image(hazard_map, scale)
    draw_frontiers(image, hazard_map, frontiers, scale)
    draw_robots(image, hazard_map, robots, scale)
    return image


def frontiers_image(hazard_map, frontiers, scale=PIXELS_PER_CELL):
    image = map_image(hazard_map, scale)
    return draw_frontiers(image, hazard_map, frontiers, scale, cells=True)


def trajectories_image(hazard_map, tracks, scale=PIXELS_PER_CELL):
    """Draw robot tracks; ``tracks`` maps robot id to visited cells.

    Every visited cell is filled, so the picture touches each recorded
    pose.
    """
    image = map_image(hazard_map, scale)
    draw = ImageDraw.Draw(image)
    for robot_id, cells in sorted(tracks.items()):
        color = TRAIL_COLORS[robot_id % len(TRAIL_COLORS)]
        centres = []
        for row, col in cells:
            draw.rectangle(cell_box(row, col, scale), fill=color)
            centres.append(((col + 0.5) * scale, (row + 0.5) * scale))
        if len(centres) > 1:
            draw.line(centres, fill=color, width=1)
    return image


def arrival_image(field, scale=PIXELS_PER_CELL):
    """Grayscale arrival values: bright near the goal, black if unreachable."""
    time = field.time
    finite = np.isfinite(time)
    shade = np.zeros(time.shape)
    if finite.any():
        top = time[finite].max()
        span = top if top > 0 else 1.0
        shade[finite] = 255 - 223 * time[finite] / span
    return Image.fromarray(upscale(np.round(shade).astype(np.uint8), scale))


def save_image(image, path):
    directory = os.path.dirname(path)
    if directory:
        os.makedirs(directory, exist_ok=True)
    image.save(path, format='PNG')
    logger.debug("wrote %s (%dx%d)", path, *image.size)
    return path
