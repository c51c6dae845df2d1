'''
scene_generator.py - procedural toy rooms
=========================================

Generates small furnished rooms as :class:`~scenemap.scene_model.Scene`
objects: a rectangular room whose eight box corners are the scene
corners, and between three and eight pieces of furniture, each a point
cloud sampled on the surface of a box or a cylinder standing on the
floor.

Furniture comes in groups that share spatial context:

=========  ===================================
group      members
=========  ===================================
dining     table, two chairs
bedroom    bed, two cabinets
living     sofa, table, lamp
study      desk, chair, shelf
=========  ===================================

Groups are rotated by multiples of 90 degrees and placed at random
free locations.  A voxel occupancy grid keeps objects apart.
'''

from dataclasses import dataclass

import numpy as np

import cgatcore.experiment as E

from scenemap.errors import ValidationError
from scenemap.scene_model import (ObjectInstance, Scene, build_occupancy_grid,
                                  rotation_z)


CLASS_NAMES = {1: "bed", 2: "table", 3: "chair", 4: "sofa",
               5: "cabinet", 6: "shelf", 7: "lamp", 8: "desk"}
NUM_CLASSES = len(CLASS_NAMES)

# label -> (shape, (min size), (max size)); cylinders use (radius, radius, height)
SHAPES = {
    1: ("box", (1.9, 1.4, 0.5), (2.1, 1.8, 0.6)),
    2: ("box", (0.9, 0.7, 0.72), (1.3, 0.9, 0.78)),
    3: ("box", (0.42, 0.42, 0.85), (0.5, 0.5, 0.95)),
    4: ("box", (1.8, 0.8, 0.75), (2.2, 0.95, 0.85)),
    5: ("box", (0.4, 0.4, 0.55), (0.5, 0.5, 0.65)),
    6: ("box", (0.8, 0.3, 1.6), (1.0, 0.4, 1.9)),
    7: ("cylinder", (0.15, 0.15, 1.3), (0.2, 0.2, 1.6)),
    8: ("box", (1.1, 0.6, 0.72), (1.4, 0.7, 0.78)),
}

# anchor label and (label, side) members placed around the anchor
GROUPS = {
    "dining": (2, [(3, "-y"), (3, "+y")]),
    "bedroom": (1, [(5, "-y"), (5, "+y")]),
    "living": (4, [(2, "+y"), (7, "+x")]),
    "study": (8, [(3, "-y"), (6, "+x")]),
}

SIDES = {"+x": np.array([1.0, 0.0]), "-x": np.array([-1.0, 0.0]),
         "+y": np.array([0.0, 1.0]), "-y": np.array([0.0, -1.0])}

SINGLES = (5, 6, 7)


@dataclass(frozen=True)
class GeneratorSettings:
    '''knobs of the room generator.'''

    room_min: float = 4.0
    room_max: float = 6.0
    height: float = 2.5
    min_objects: int = 3
    max_objects: int = 8
    points_per_object: int = 600
    cell_size: float = 0.1
    clearance: float = 0.1
    gap: float = 0.1
    max_attempts: int = 100


def sample_box_surface(size, n, rng):
    '''*n* points on the surface of an axis aligned box of *size*,
    centred in x and y and standing on z = 0.'''
    sx, sy, sz = size
    areas = np.array([sy * sz, sy * sz, sx * sz, sx * sz, sx * sy, sx * sy])
    face = rng.choice(6, size=n, p=areas / areas.sum())
    uv = rng.uniform(size=(n, 2))
    pts = np.empty((n, 3))
    half = np.array([sx, sy]) / 2.0
    for f in range(6):
        sel = face == f
        a, b = uv[sel, 0], uv[sel, 1]
        axis, high = divmod(f, 2)
        if axis == 0:
            pts[sel] = np.column_stack([np.full(len(a), half[0] if high else -half[0]),
                                        (a - 0.5) * sy, b * sz])
        elif axis == 1:
            pts[sel] = np.column_stack([(a - 0.5) * sx,
                                        np.full(len(a), half[1] if high else -half[1]),
                                        b * sz])
        else:
            pts[sel] = np.column_stack([(a - 0.5) * sx, (b - 0.5) * sy,
                                        np.full(len(a), sz if high else 0.0)])
    return pts


def sample_cylinder_surface(radius, height, n, rng):
    '''*n* points on a closed vertical cylinder standing on z = 0.'''
    side = 2.0 * np.pi * radius * height
    cap = np.pi * radius ** 2
    part = rng.choice(3, size=n, p=np.array([side, cap, cap]) / (side + 2 * cap))
    theta = rng.uniform(0.0, 2.0 * np.pi, size=n)
    rad = np.where(part == 0, radius, radius * np.sqrt(rng.uniform(size=n)))
    z = np.where(part == 0, rng.uniform(0.0, height, size=n),
                 np.where(part == 1, 0.0, height))
    return np.column_stack([rad * np.cos(theta), rad * np.sin(theta), z])


def make_object(label, object_id, rng, points_per_object):
    '''a piece of furniture of *label* centred on the origin.'''
    if label not in SHAPES:
        raise ValidationError("unknown furniture label {}".format(label))
    shape, low, high = SHAPES[label]
    size = rng.uniform(low, high)
    if shape == "box":
        pts = sample_box_surface(size, points_per_object, rng)
    else:
        pts = sample_cylinder_surface(size[0], size[2], points_per_object, rng)
    return ObjectInstance(object_id, label, pts)


def room_corners(width, depth, height):
    return np.array([[x, y, z] for x in (0.0, width) for y in (0.0, depth)
                     for z in (0.0, height)])


def _layout_group(name, rng, settings):
    '''objects of group *name* around the origin, in group frame.'''
    anchor_label, members = GROUPS[name]
    anchor = make_object(anchor_label, 0, rng, settings.points_per_object)
    objects = [anchor.with_points(anchor.points - [anchor.centroid[0],
                                                   anchor.centroid[1], 0.0])]
    half = objects[0].extent[:2] / 2.0
    for label, side in members:
        obj = make_object(label, 0, rng, settings.points_per_object)
        direction = SIDES[side]
        offset = np.abs(direction) @ (half + obj.extent[:2] / 2.0 + settings.gap)
        shift = np.append(direction * offset, 0.0) - [obj.centroid[0],
                                                      obj.centroid[1], 0.0]
        objects.append(obj.with_points(obj.points + shift))
    return objects


def _place(objects, grid, width, depth, rng, settings):
    '''rotate *objects* by a random multiple of 90 degrees and move them
    to a random free spot; None when no spot was found.'''
    rot = rotation_z(0.5 * np.pi * rng.integers(4))
    moved = [o.transformed(rot, np.zeros(3)) for o in objects]
    lo = np.min([o.bbox_min for o in moved], axis=0)
    hi = np.max([o.bbox_max for o in moved], axis=0)
    pad = np.array([settings.clearance, settings.clearance, 0.0])
    for _ in range(settings.max_attempts):
        target = rng.uniform([settings.clearance - lo[0],
                              settings.clearance - lo[1]],
                             [width - settings.clearance - hi[0],
                              depth - settings.clearance - hi[1]])
        shift = np.append(target, 0.0)
        if grid.box_free(lo + shift - pad, hi + shift + pad):
            return [o.transformed(np.eye(3), shift) for o in moved]
    return None


def generate_scene(rng, settings=GeneratorSettings()):
    '''a random furnished room.'''
    for attempt in range(settings.max_attempts):
        width, depth = rng.uniform(settings.room_min, settings.room_max, size=2)
        corners = room_corners(width, depth, settings.height)
        grid = build_occupancy_grid(Scene((), corners), settings.cell_size)
        placed = []

        names = sorted(GROUPS)
        n_groups = int(rng.integers(1, 3))
        for name in rng.choice(names, size=n_groups, replace=False):
            if len(placed) + 1 + len(GROUPS[name][1]) > settings.max_objects:
                continue
            group = _place(_layout_group(name, rng, settings), grid,
                           width, depth, rng, settings)
            if group is None:
                continue
            for obj in group:
                grid = grid.with_points(obj.points)
            placed.extend(group)

        n_singles = int(rng.integers(0, 3))
        for _ in range(n_singles):
            if len(placed) >= settings.max_objects:
                break
            label = int(rng.choice(SINGLES))
            single = _place([make_object(label, 0, rng,
                                         settings.points_per_object)],
                            grid, width, depth, rng, settings)
            if single is not None:
                grid = grid.with_points(single[0].points)
                placed.extend(single)

        if len(placed) >= settings.min_objects:
            objects = [o.with_points(o.points, object_id=i)
                       for i, o in enumerate(placed)]
            E.debug("generated room {:.2f} x {:.2f} with {} objects after "
                    "{} attempts".format(width, depth, len(objects),
                                         attempt + 1))
            return Scene(tuple(objects), corners)

    raise ValidationError(
        "could not furnish a room with {} objects in {} attempts".format(
            settings.min_objects, settings.max_attempts))


def generate_dataset(n_scenes, seed, settings=GeneratorSettings()):
    '''*n_scenes* rooms, room i drawn from the i-th child of *seed*.'''
    children = np.random.SeedSequence(seed).spawn(n_scenes)
    scenes = [generate_scene(np.random.default_rng(child), settings)
              for child in children]
    E.info("generated {} rooms".format(len(scenes)))
    return scenes
