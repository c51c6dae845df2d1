'''
scene_model.py - scenes, objects, regions of interest and occupancy grids
========================================================================

A scene is a set of labelled object point clouds plus the corner
points enclosing it.  Everything the descriptor field, the map
estimation and the applications see of a scene goes through this
module: the sparse keypoint representation (farthest point samples
per object plus the corners), radius neighbourhoods, region of
interest sampling and voxel occupancy.

All positions are in meters.  Scenes and objects are immutable once
built and can be shared between threads.

Corner points carry the reserved label :data:`CORNER_LABEL` (0), which
lies outside the object label range ``[1, L]``.
'''

import functools
from dataclasses import dataclass

import numpy as np
from scipy.spatial import ConvexHull, QhullError, cKDTree

import cgatcore.experiment as E

from scenemap.errors import ValidationError


CORNER_LABEL = 0
CORNER_OWNER = -1
KEYPOINTS_PER_OBJECT = 50
ROI_POINTS_PER_OBJECT = 400
SCENE_MARGIN = 0.25


def as_points(points):
    '''return *points* as a float64 array of shape (n, 3).'''
    arr = np.asarray(points, dtype=np.float64)
    if arr.size == 0:
        return arr.reshape(0, 3)
    if arr.ndim == 1:
        arr = arr.reshape(1, -1)
    if arr.ndim != 2 or arr.shape[1] != 3:
        raise ValidationError(
            "expected points of shape (n, 3), got {}".format(arr.shape))
    return arr


def rotation_z(theta):
    '''rotation matrix about the z axis by *theta* radians.'''
    c, s = np.cos(theta), np.sin(theta)
    return np.array([[c, -s, 0.0], [s, c, 0.0], [0.0, 0.0, 1.0]])


def farthest_point_sample_indices(points, k, start_index=0):
    '''indices of *k* farthest point samples of *points*.

    The first index is *start_index*; every further index is the point
    whose distance to the already selected set is largest.  Ties go to
    the lowest index, so the result is deterministic.
    '''
    pts = as_points(points)
    n = len(pts)
    if not 1 <= k <= n:
        raise ValidationError(
            "farthest point sampling needs 1 <= k <= {}, got k={}".format(n, k))
    if not 0 <= start_index < n:
        raise ValidationError("start index {} out of range".format(start_index))

    selected = np.empty(k, dtype=np.int64)
    selected[0] = start_index
    dists = np.linalg.norm(pts - pts[start_index], axis=1)
    dists[start_index] = -1.0
    for i in range(1, k):
        idx = int(np.argmax(dists))
        selected[i] = idx
        dists = np.minimum(dists, np.linalg.norm(pts - pts[idx], axis=1))
        dists[selected[:i + 1]] = -1.0
    return selected


def farthest_point_sample(points, k, start_index=0):
    '''*k* points of *points* chosen by farthest point sampling.'''
    pts = as_points(points)
    return pts[farthest_point_sample_indices(pts, k, start_index)]


def convex_hull_corners(points):
    '''vertices of the convex hull of *points*.

    Coplanar or lower-dimensional inputs fall back to the 2D hull of the
    xy projection, lifted to the minimum and maximum z of the input.
    '''
    pts = as_points(points)
    if len(pts) < 3:
        raise ValidationError(
            "a convex hull needs at least 3 points, got {}".format(len(pts)))
    try:
        hull = ConvexHull(pts)
        return pts[hull.vertices]
    except QhullError:
        E.debug("3D hull degenerate, using the ground plane projection")

    try:
        hull = ConvexHull(pts[:, :2])
    except QhullError as exc:
        raise ValidationError("points span no area in the ground plane") from exc
    ring = pts[hull.vertices, :2]
    zmin, zmax = pts[:, 2].min(), pts[:, 2].max()
    low = np.column_stack([ring, np.full(len(ring), zmin)])
    if zmax - zmin <= 1e-12:
        return low
    high = np.column_stack([ring, np.full(len(ring), zmax)])
    return np.vstack([low, high])


def hull_halfspaces(corners):
    '''outward unit normals and offsets of conv(*corners*).

    A point x is inside when ``normals @ x + offsets <= 0``.  Flat
    corner sets get the xy hull plus two horizontal caps.
    '''
    pts = convex_hull_corners(corners)
    try:
        hull = ConvexHull(pts)
        return hull.equations[:, :3], hull.equations[:, 3]
    except QhullError:
        pass
    hull = ConvexHull(pts[:, :2])
    normals = np.column_stack([hull.equations[:, :2],
                               np.zeros(len(hull.equations))])
    offsets = hull.equations[:, 2]
    zmin, zmax = pts[:, 2].min(), pts[:, 2].max()
    normals = np.vstack([normals, [[0.0, 0.0, 1.0], [0.0, 0.0, -1.0]]])
    offsets = np.concatenate([offsets, [-zmax, zmin]])
    return normals, offsets


def inside_hull(points, corners, margin=0.0):
    '''boolean mask of *points* inside conv(*corners*) grown by *margin*.'''
    pts = as_points(points)
    normals, offsets = hull_halfspaces(corners)
    return np.all(pts @ normals.T + offsets <= margin + 1e-12, axis=1)


@dataclass(frozen=True, eq=False)
class ObjectInstance:
    '''one labelled object point cloud.'''

    id: int
    label: int
    points: np.ndarray

    def __post_init__(self):
        pts = as_points(self.points).copy()
        if len(pts) == 0:
            raise ValidationError("object {} has no points".format(self.id))
        if int(self.label) < 1:
            raise ValidationError(
                "object {} has label {}; labels start at 1".format(
                    self.id, self.label))
        pts.flags.writeable = False
        object.__setattr__(self, "points", pts)
        object.__setattr__(self, "id", int(self.id))
        object.__setattr__(self, "label", int(self.label))

    @functools.cached_property
    def centroid(self):
        return self.points.mean(axis=0)

    @property
    def bbox_min(self):
        return self.points.min(axis=0)

    @property
    def bbox_max(self):
        return self.points.max(axis=0)

    @property
    def extent(self):
        return self.bbox_max - self.bbox_min

    @property
    def diagonal(self):
        return float(np.linalg.norm(self.extent))

    @property
    def aspect_ratio(self):
        '''log extent ratios (x/z, y/z) of the axis aligned bounding box.'''
        ext = np.maximum(self.extent, 1e-6)
        return np.log(ext[:2] / ext[2])

    def with_points(self, points, object_id=None):
        return ObjectInstance(self.id if object_id is None else object_id,
                              self.label, points)

    def transformed(self, rotation, translation):
        '''apply x -> R x + t to every point.'''
        return self.with_points(self.points @ np.asarray(rotation).T +
                                np.asarray(translation))

    def rotated_about_centroid(self, theta, shift=(0.0, 0.0, 0.0)):
        '''rotate by *theta* about the vertical axis through the
        centroid, then move by *shift*.'''
        c = self.centroid
        rot = rotation_z(theta)
        return self.with_points((self.points - c) @ rot.T + c +
                                np.asarray(shift, dtype=np.float64))


@dataclass(frozen=True, eq=False)
class Keypoints:
    '''sparse scene representation used by the descriptor field.'''

    positions: np.ndarray
    labels: np.ndarray
    owners: np.ndarray
    tree: cKDTree


@dataclass(frozen=True, eq=False)
class Scene:
    '''a tuple of labelled objects and the corner points enclosing them.'''

    objects: tuple
    corners: np.ndarray

    def __post_init__(self):
        objects = tuple(self.objects)
        corners = as_points(self.corners).copy()
        if len(corners) < 3:
            raise ValidationError(
                "a scene needs at least 3 corner points, got {}".format(
                    len(corners)))
        ids = [o.id for o in objects]
        if len(set(ids)) != len(ids):
            raise ValidationError("object ids are not unique: {}".format(ids))
        corners.flags.writeable = False
        object.__setattr__(self, "objects", objects)
        object.__setattr__(self, "corners", corners)

    @property
    def object_ids(self):
        return [o.id for o in self.objects]

    @property
    def labels(self):
        return [o.label for o in self.objects]

    def object(self, object_id):
        for obj in self.objects:
            if obj.id == object_id:
                return obj
        raise ValidationError("unknown object id {}".format(object_id))

    def centroids(self):
        if not self.objects:
            return np.zeros((0, 3))
        return np.array([o.centroid for o in self.objects])

    def all_points(self):
        if not self.objects:
            return np.zeros((0, 3))
        return np.vstack([o.points for o in self.objects])

    def label_histogram(self, num_classes):
        counts = np.bincount(np.asarray(self.labels, dtype=np.int64),
                             minlength=num_classes + 1)
        return counts[1:num_classes + 1]

    def with_objects(self, objects):
        return Scene(tuple(objects), self.corners)

    def enclosed(self, margin=SCENE_MARGIN):
        '''this scene, or a copy whose corners are the hull of the old
        corners and every object point when objects leave the grown
        hull.'''
        if not self.objects or inside_hull(self.all_points(), self.corners,
                                           margin).all():
            return self
        E.debug("objects leave the scene hull, growing the corners")
        return Scene(self.objects, convex_hull_corners(
            np.vstack([self.corners, self.all_points()])))

    def transformed(self, rotation, translation):
        rotation = np.asarray(rotation, dtype=np.float64)
        translation = np.asarray(translation, dtype=np.float64)
        return Scene(tuple(o.transformed(rotation, translation)
                           for o in self.objects),
                     self.corners @ rotation.T + translation)

    def keypoints(self, per_object=KEYPOINTS_PER_OBJECT):
        '''farthest point samples of every object plus the corners.'''
        cache = self.__dict__.setdefault("_keypoint_cache", {})
        if per_object not in cache:
            positions, labels, owners = [], [], []
            for obj in self.objects:
                k = min(per_object, len(obj.points))
                positions.append(farthest_point_sample(obj.points, k))
                labels.append(np.full(k, obj.label, dtype=np.int64))
                owners.append(np.full(k, obj.id, dtype=np.int64))
            positions.append(self.corners)
            labels.append(np.full(len(self.corners), CORNER_LABEL,
                                  dtype=np.int64))
            owners.append(np.full(len(self.corners), CORNER_OWNER,
                                  dtype=np.int64))
            positions = np.vstack(positions)
            cache[per_object] = Keypoints(positions,
                                          np.concatenate(labels),
                                          np.concatenate(owners),
                                          cKDTree(positions))
        return cache[per_object]

    def validate(self, num_classes=None, margin=SCENE_MARGIN):
        '''check labels and containment in the grown corner hull.'''
        if num_classes is not None:
            bad = [o.id for o in self.objects
                   if not 1 <= o.label <= num_classes]
            if bad:
                raise ValidationError(
                    "objects {} have labels outside [1, {}]".format(
                        bad, num_classes))
        if self.objects:
            outside = ~inside_hull(self.all_points(), self.corners, margin)
            if outside.any():
                raise ValidationError(
                    "{} object points lie outside the scene hull".format(
                        int(outside.sum())))
        return self


@dataclass(frozen=True, eq=False)
class RegionOfInterest:
    '''points sampled from the surfaces of an object group.'''

    object_ids: tuple
    points: np.ndarray
    point_object_ids: np.ndarray

    def __post_init__(self):
        pts = as_points(self.points)
        if len(pts) == 0:
            raise ValidationError("a region of interest needs points")
        owners = np.asarray(self.point_object_ids, dtype=np.int64)
        if owners.shape != (len(pts),):
            raise ValidationError("every region point needs an owner id")
        if not set(owners.tolist()) <= set(self.object_ids):
            raise ValidationError("region points owned by unlisted objects")
        object.__setattr__(self, "object_ids", tuple(int(i) for i in self.object_ids))
        object.__setattr__(self, "points", pts)
        object.__setattr__(self, "point_object_ids", owners)

    def object_points(self, object_id):
        return self.points[self.point_object_ids == object_id]


@dataclass(frozen=True, eq=False)
class OccupancyGrid:
    '''voxel occupancy over the bounding box of a scene's corners.'''

    origin: np.ndarray
    cell_size: float
    dims: tuple
    occupied: np.ndarray

    def cell_of(self, points, clip=True):
        cells = np.floor((as_points(points) - self.origin) /
                         self.cell_size).astype(np.int64)
        if clip:
            cells = np.clip(cells, 0, np.asarray(self.dims) - 1)
        return cells

    def center_of(self, cells):
        cells = np.asarray(cells, dtype=np.float64).reshape(-1, 3)
        return self.origin + (cells + 0.5) * self.cell_size

    def in_bounds(self, cell):
        cell = np.asarray(cell)
        return bool(np.all(cell >= 0) and np.all(cell < np.asarray(self.dims)))

    def is_free(self, cell):
        return self.in_bounds(cell) and not self.occupied[tuple(cell)]

    def box_free(self, lo, hi):
        '''True when every cell touching the box [lo, hi] is free and
        inside the grid.'''
        start = np.floor((np.asarray(lo) - self.origin) /
                         self.cell_size).astype(np.int64)
        stop = np.floor((np.asarray(hi) - self.origin) /
                        self.cell_size).astype(np.int64) + 1
        if np.any(start < 0) or np.any(stop > np.asarray(self.dims)):
            return False
        block = self.occupied[start[0]:stop[0], start[1]:stop[1],
                              start[2]:stop[2]]
        return not block.any()

    def with_points(self, points):
        occupied = self.occupied.copy()
        pts = as_points(points)
        if len(pts):
            occupied[tuple(self.cell_of(pts).T)] = True
        return OccupancyGrid(self.origin, self.cell_size, self.dims, occupied)


def gather_neighborhood(q, scene, r, per_object=KEYPOINTS_PER_OBJECT):
    '''scene keypoints within distance *r* of *q* as (position, label)
    pairs, in keypoint order.'''
    if r <= 0:
        raise ValidationError("radius must be positive, got {}".format(r))
    kp = scene.keypoints(per_object)
    idx = sorted(kp.tree.query_ball_point(np.asarray(q, dtype=np.float64), r))
    return [(kp.positions[i], int(kp.labels[i])) for i in idx]


def neighborhood_indices(queries, scene, r, per_object=KEYPOINTS_PER_OBJECT):
    '''sorted keypoint indices within *r* of every query.'''
    if r <= 0:
        raise ValidationError("radius must be positive, got {}".format(r))
    kp = scene.keypoints(per_object)
    found = kp.tree.query_ball_point(as_points(queries), r)
    return [np.asarray(sorted(idx), dtype=np.int64) for idx in found]


def build_occupancy_grid(scene, cell_size):
    '''mark every cell of the corner bounding box holding an object point.'''
    if cell_size <= 0:
        raise ValidationError(
            "cell size must be positive, got {}".format(cell_size))
    lo = scene.corners.min(axis=0)
    hi = scene.corners.max(axis=0)
    extent = hi - lo
    if np.any(extent <= 0):
        raise ValidationError(
            "degenerate scene bounding box with extent {}".format(extent))
    dims = tuple(int(d) for d in np.maximum(np.ceil(extent / cell_size), 1))
    grid = OccupancyGrid(lo, float(cell_size), dims, np.zeros(dims, dtype=bool))
    return grid.with_points(scene.all_points())


def sample_roi(scene, object_ids, points_per_object=ROI_POINTS_PER_OBJECT):
    '''farthest point samples from each listed object, unioned.'''
    points, owners = [], []
    for object_id in object_ids:
        obj = scene.object(object_id)
        if points_per_object > len(obj.points):
            raise ValidationError(
                "object {} has {} points, {} requested".format(
                    object_id, len(obj.points), points_per_object))
        points.append(farthest_point_sample(obj.points, points_per_object))
        owners.append(np.full(points_per_object, obj.id, dtype=np.int64))
    if not points:
        raise ValidationError("a region of interest needs at least one object")
    return RegionOfInterest(tuple(object_ids), np.vstack(points),
                            np.concatenate(owners))


def nearest_object_group(scene, seed_id, k):
    '''*seed_id* followed by the ids of its *k* nearest objects by
    centroid distance.'''
    seed = scene.object(seed_id)
    others = [o for o in scene.objects if o.id != seed_id]
    dists = [np.linalg.norm(o.centroid - seed.centroid) for o in others]
    order = np.argsort(dists, kind="stable")[:k]
    return [seed_id] + [others[i].id for i in order]
