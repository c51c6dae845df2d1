'''
transfer.py - moving trajectories and objects through scene maps
================================================================

Applications of estimated scene maps:

* short trajectories: every step of a rigid box (or a bare point) is
  warped through the map; boxes are snapped back to the closest rigid
  motion of the original box,
* long trajectories: sparse waypoints are warped through the map of
  the region they belong to and joined by collision-free A* paths on
  the reference occupancy grid, falling back to warping the original
  segment where no path exists,
* multiple regions: one candidate map per region is chosen so the
  combined maps best preserve pairwise distances,
* object placement: items resting on a region move rigidly with the
  map.
'''

import heapq
import itertools
from dataclasses import dataclass

import numpy as np
from scipy.spatial import cKDTree
from scipy.spatial.distance import cdist

import cgatcore.experiment as E

from scenemap.errors import ValidationError
from scenemap.scene_model import as_points


ISOMETRY_SAMPLES = 256
ALIGN_ITERATIONS = 10


@dataclass(frozen=True, eq=False)
class RigidTransform:
    R: np.ndarray
    t: np.ndarray

    def __post_init__(self):
        R = np.array(self.R, dtype=np.float64).reshape(3, 3)
        t = np.array(self.t, dtype=np.float64).reshape(3)
        if (not np.allclose(R.T @ R, np.eye(3), atol=1e-9) or
                np.linalg.det(R) <= 0):
            raise ValidationError("R is not a rotation")
        object.__setattr__(self, "R", R)
        object.__setattr__(self, "t", t)

    def apply(self, points):
        return as_points(points) @ self.R.T + self.t


@dataclass(frozen=True, eq=False)
class Trajectory:
    '''timestamped steps of a rigid box (8 corners) or of a point.

    ``boxes`` has shape (steps, corners, 3); bare points use one corner.
    '''

    timestamps: np.ndarray
    boxes: np.ndarray

    def __post_init__(self):
        ts = np.asarray(self.timestamps, dtype=np.float64).reshape(-1)
        boxes = np.asarray(self.boxes, dtype=np.float64)
        if boxes.ndim == 2:
            boxes = boxes[:, None, :]
        if boxes.ndim != 3 or boxes.shape[2] != 3 or len(boxes) != len(ts):
            raise ValidationError(
                "trajectory needs one box per timestamp, got {} boxes for "
                "{} timestamps".format(boxes.shape, len(ts)))
        if np.any(np.diff(ts) <= 0):
            raise ValidationError("timestamps must be strictly increasing")
        object.__setattr__(self, "timestamps", ts)
        object.__setattr__(self, "boxes", boxes)

    @property
    def is_points(self):
        return self.boxes.shape[1] == 1

    @property
    def points(self):
        return self.boxes.mean(axis=1)

    def is_rigid(self, tol=1e-6):
        if self.is_points or len(self.boxes) == 0:
            return True
        first = cdist(self.boxes[0], self.boxes[0])
        return all(np.abs(cdist(b, b) - first).max() <= tol
                   for b in self.boxes[1:])


def umeyama_fit(src, dst):
    '''least squares rotation and translation taking *src* onto *dst*.'''
    src, dst = as_points(src), as_points(dst)
    if src.shape != dst.shape or len(src) < 3:
        raise ValidationError(
            "need two equally sized sets of at least 3 points, got {} and {}"
            .format(src.shape, dst.shape))
    mu_src, mu_dst = src.mean(axis=0), dst.mean(axis=0)
    dsrc, ddst = src - mu_src, dst - mu_dst
    spread = np.linalg.svd(dsrc, compute_uv=False)
    if spread[0] <= 1e-12 or spread[1] <= 1e-9 * spread[0]:
        raise ValidationError("degenerate (collinear) point configuration")

    sigma = ddst.T @ dsrc / len(src)
    U, _, Vt = np.linalg.svd(sigma)
    S = np.eye(3)
    if np.linalg.det(U) * np.linalg.det(Vt) < 0:
        S[2, 2] = -1.0
    R = U @ S @ Vt
    return RigidTransform(R, mu_dst - R @ mu_src)


def short_trajectory_transfer(scene_map, trajectory):
    '''warp every step of *trajectory* through *scene_map*.'''
    if trajectory.is_points:
        warped = scene_map.apply(trajectory.boxes[:, 0, :])
        return Trajectory(trajectory.timestamps, warped[:, None, :])
    boxes = []
    for box in trajectory.boxes:
        motion = umeyama_fit(box, scene_map.apply(box))
        boxes.append(motion.apply(box))
    return Trajectory(trajectory.timestamps, np.array(boxes))


NEIGHBOURS = [d for d in itertools.product((-1, 0, 1), repeat=3) if any(d)]


def astar(grid, start, goal):
    '''shortest 26-connected path of free cells from *start* to *goal*
    under Euclidean step costs; None when none exists.'''
    start, goal = tuple(int(c) for c in start), tuple(int(c) for c in goal)
    for name, cell in (("start", start), ("goal", goal)):
        if not grid.in_bounds(cell):
            raise ValidationError("{} cell {} outside the grid".format(name, cell))
        if grid.occupied[cell]:
            raise ValidationError("{} cell {} is occupied".format(name, cell))

    goal_arr = np.asarray(goal, dtype=np.float64)

    def heuristic(cell):
        return float(np.linalg.norm(np.asarray(cell, dtype=np.float64) - goal_arr))

    dims = grid.dims
    counter = itertools.count()
    frontier = [(heuristic(start), next(counter), start)]
    came_from = {start: None}
    cost_so_far = {start: 0.0}
    closed = set()
    while frontier:
        _, _, current = heapq.heappop(frontier)
        if current in closed:
            continue
        if current == goal:
            path = [goal]
            while came_from[path[-1]] is not None:
                path.append(came_from[path[-1]])
            return path[::-1]
        closed.add(current)
        for d in NEIGHBOURS:
            nxt = (current[0] + d[0], current[1] + d[1], current[2] + d[2])
            if not (0 <= nxt[0] < dims[0] and 0 <= nxt[1] < dims[1] and
                    0 <= nxt[2] < dims[2]):
                continue
            if grid.occupied[nxt] or nxt in closed:
                continue
            new_cost = cost_so_far[current] + float(np.sqrt(
                d[0] * d[0] + d[1] * d[1] + d[2] * d[2]))
            if nxt not in cost_so_far or new_cost < cost_so_far[nxt]:
                cost_so_far[nxt] = new_cost
                came_from[nxt] = current
                heapq.heappush(frontier,
                               (new_cost + heuristic(nxt), next(counter), nxt))
    return None


def path_length(path):
    cells = np.asarray(path, dtype=np.float64)
    return float(np.linalg.norm(np.diff(cells, axis=0), axis=1).sum())


def assign_waypoints(waypoints, rois):
    '''index of the region closest to every waypoint.'''
    pts = as_points(waypoints)
    dists = np.column_stack([cKDTree(r.points).query(pts)[0] for r in rois])
    return np.argmin(dists, axis=1)


def long_trajectory_transfer(maps, waypoints, grid_ref, assignment=None,
                             rois=None, samples_per_segment=10):
    '''warp waypoints region by region and join them with A* paths.

    Returns the transferred trajectory (bare points, unit time steps)
    and the planner status of every segment, ``"astar"`` or
    ``"fallback"``.
    '''
    pts = as_points(waypoints)
    if assignment is None:
        if rois is None:
            if len(maps) != 1:
                raise ValidationError(
                    "waypoints need a region assignment or regions")
            assignment = np.zeros(len(pts), dtype=np.int64)
        else:
            assignment = assign_waypoints(pts, rois)
    assignment = np.asarray(assignment, dtype=np.int64)
    warped = np.array([maps[a].apply(p[None])[0]
                       for p, a in zip(pts, assignment)])

    route = [warped[0]] if len(warped) else []
    status = []
    for i in range(len(warped) - 1):
        start = grid_ref.cell_of(warped[i])[0]
        goal = grid_ref.cell_of(warped[i + 1])[0]
        try:
            path = astar(grid_ref, start, goal)
        except ValidationError:
            path = None
        if path is not None:
            status.append("astar")
            route.extend(grid_ref.center_of(path[1:-1]))
        else:
            status.append("fallback")
            E.debug("no path for segment {}, warping it directly".format(i))
            fractions = np.linspace(0.0, 1.0, samples_per_segment + 2)[1:-1]
            dense = pts[i] + fractions[:, None] * (pts[i + 1] - pts[i])
            route.extend(maps[assignment[i]].apply(dense))
        route.append(warped[i + 1])
    route = np.array(route).reshape(-1, 3)
    return Trajectory(np.arange(len(route), dtype=np.float64), route), status


def isometry_cost(maps, sample_points):
    '''Frobenius norm between the distance matrices of the sample points
    before and after mapping each region's samples by its map.'''
    src = np.vstack([as_points(p) for p in sample_points])
    dst = np.vstack([m.apply(p) for m, p in zip(maps, sample_points)])
    return float(np.linalg.norm(cdist(src, src) - cdist(dst, dst)))


def sample_isometry_points(rois, rng, n_rand=ISOMETRY_SAMPLES):
    '''up to *n_rand* random points of every region.'''
    out = []
    for roi in rois:
        k = min(n_rand, len(roi.points))
        out.append(roi.points[np.sort(rng.choice(len(roi.points), size=k,
                                                 replace=False))])
    return out


def multi_roi_align(candidate_maps, sample_points, rng,
                    iterations=ALIGN_ITERATIONS):
    '''choose one candidate map per region by greedy coordinate descent
    on the isometry cost, starting from a random combination.

    Returns the chosen indices, the chosen maps and their cost.
    '''
    if any(len(c) == 0 for c in candidate_maps):
        raise ValidationError("every region needs at least one candidate map")
    choice = [int(rng.integers(len(c))) for c in candidate_maps]

    def cost_of(indices):
        return isometry_cost([c[i] for c, i in zip(candidate_maps, indices)],
                             sample_points)

    best = cost_of(choice)
    for sweep in range(iterations):
        changed = False
        for region, cands in enumerate(candidate_maps):
            for option in range(len(cands)):
                if option == choice[region]:
                    continue
                trial = list(choice)
                trial[region] = option
                cost = cost_of(trial)
                if cost < best:
                    best, choice, changed = cost, trial, True
        if not changed:
            break
    E.debug("multi region alignment cost {:.4f} after {} sweeps".format(
        best, sweep + 1 if iterations else 0))
    return choice, [c[i] for c, i in zip(candidate_maps, choice)], best


def bbox_corners(points):
    lo, hi = points.min(axis=0), points.max(axis=0)
    return np.array([[x, y, z] for x in (lo[0], hi[0]) for y in (lo[1], hi[1])
                     for z in (lo[2], hi[2])])


def object_placement_transfer(scene_map, items):
    '''move every item rigidly along with the map of its bounding box.'''
    out = []
    for item in items:
        corners = bbox_corners(item.points)
        motion = umeyama_fit(corners, scene_map.apply(corners))
        out.append(item.transformed(motion.R, motion.t))
    return out
