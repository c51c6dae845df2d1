'''
map_estimation.py - coarse-to-fine scene maps
=============================================

A scene map sends a region of interest of a target scene into a
reference scene::

    F(x) = A x + b + sum_k w_k phi(|x - p_k|),   phi(r) = r^2 ln r

The affine part is found first.  Every pair of target and reference
objects, combined with each of the planar orthogonal transforms
(four rotations about z, each with or without reflections along x and
y), gives one candidate that moves the target centroid onto the
reference centroid.  Candidates are ranked by the mean descriptor
distance between region points and their images, the best
``k_coarse`` go through outlier object rejection, and the survivors
with the most inlier objects are refined with Adam.  Adam only sees
the ``refine_points`` farthest point samples of the inlier points;
every reported cost is taken over all of them.

The local displacement part is then fitted per candidate: Adam moves
every sampled point independently and a damped thin-plate spline over
the sampled points interpolates the optimised displacements.

The map with the lowest final cost is returned if its cost is below
``rho_valid``; otherwise the region is declared :class:`Unmappable`.

Costs are means over region points so the validity threshold does not
depend on the region size.
'''

import contextlib
from dataclasses import dataclass, field as dataclass_field

import numpy as np
import scipy.linalg
import torch
from scipy.optimize import linear_sum_assignment
from scipy.spatial import cKDTree
from scipy.spatial.distance import cdist

import cgatcore.experiment as E

from scenemap.errors import NumericError, ValidationError
from scenemap.numeric_core import (DTYPE, AdamState, adam_step, check_finite,
                                   safe_norm)
from scenemap.scene_model import (RegionOfInterest, as_points,
                                  farthest_point_sample_indices, rotation_z)


@dataclass(frozen=True)
class MapConfig:
    '''constants of map estimation.'''

    n_rotations: int = 4
    reflections: bool = True
    k_coarse: int = 5
    rho_valid: float = 1.5
    outlier_threshold: float = 2.0
    affine_steps: int = 200
    displacement_steps: int = 300
    lr: float = 1e-3
    tps_lambda: float = 0.5
    use_displacement: bool = True
    coarse_points: int = 256
    refine_points: int = 64
    pool_from_roi: bool = True
    merge_tol: float = 1e-6
    top_k: int = 5

    def __post_init__(self):
        for name in ("n_rotations", "k_coarse", "rho_valid",
                     "outlier_threshold", "lr", "coarse_points", "refine_points",
                     "merge_tol", "top_k"):
            if getattr(self, name) <= 0:
                raise ValidationError(
                    "{} must be positive, got {}".format(
                        name, getattr(self, name)))
        for name in ("affine_steps", "displacement_steps", "tps_lambda"):
            if getattr(self, name) < 0:
                raise ValidationError(
                    "{} must not be negative, got {}".format(
                        name, getattr(self, name)))

    @property
    def n_ortho(self):
        return self.n_rotations * (4 if self.reflections else 1)


def tps_kernel(r):
    '''phi(r) = r^2 ln r with phi(0) = 0.'''
    r = np.asarray(r, dtype=np.float64)
    with np.errstate(divide="ignore", invalid="ignore"):
        k = r ** 2 * np.log(r)
    return np.where(r > 0, k, 0.0)


@dataclass(frozen=True, eq=False)
class AffineMap:
    A: np.ndarray
    b: np.ndarray

    def __post_init__(self):
        A = np.array(self.A, dtype=np.float64).reshape(3, 3)
        b = np.array(self.b, dtype=np.float64).reshape(3)
        if not (np.isfinite(A).all() and np.isfinite(b).all()):
            raise NumericError("affine map has non-finite entries")
        object.__setattr__(self, "A", A)
        object.__setattr__(self, "b", b)

    @classmethod
    def identity(cls):
        return cls(np.eye(3), np.zeros(3))

    def apply(self, points):
        return as_points(points) @ self.A.T + self.b


@dataclass(frozen=True, eq=False)
class DisplacementMap:
    control_points: np.ndarray
    weights: np.ndarray

    def __post_init__(self):
        ctrl = as_points(self.control_points)
        weights = np.asarray(self.weights, dtype=np.float64).reshape(-1, 3)
        if len(ctrl) != len(weights):
            raise ValidationError(
                "{} weights for {} control points".format(
                    len(weights), len(ctrl)))
        object.__setattr__(self, "control_points", ctrl)
        object.__setattr__(self, "weights", weights)

    @classmethod
    def zero(cls, control_points=()):
        ctrl = as_points(control_points)
        return cls(ctrl, np.zeros((len(ctrl), 3)))

    def apply(self, points):
        pts = as_points(points)
        if len(self.control_points) == 0:
            return np.zeros_like(pts)
        return tps_kernel(cdist(pts, self.control_points)) @ self.weights


@dataclass(frozen=True, eq=False)
class SceneMap:
    '''affine map plus thin-plate-spline displacements.

    ``coarse_cost`` and ``affine_cost`` record the cost of the selected
    candidate before and after affine refinement; ``cost`` is the cost
    of the final map.
    '''

    affine: AffineMap
    displacement: DisplacementMap
    cost: float = 0.0
    inlier_object_ids: tuple = ()
    coarse_cost: float = None
    affine_cost: float = None

    def __post_init__(self):
        if self.cost < 0:
            raise ValidationError("map cost must not be negative")
        object.__setattr__(self, "inlier_object_ids",
                           tuple(int(i) for i in self.inlier_object_ids))

    @classmethod
    def identity(cls):
        return cls(AffineMap.identity(), DisplacementMap.zero())

    def apply(self, points):
        pts = as_points(points)
        return self.affine.apply(pts) + self.displacement.apply(pts)


@dataclass(frozen=True)
class Unmappable:
    '''no map of the region reached the validity threshold.'''

    cost: float = float("inf")
    reason: str = ""


def apply_map(scene_map, x):
    '''F(x) for one point or an (n, 3) array.'''
    x = np.asarray(x, dtype=np.float64)
    out = scene_map.apply(x)
    return out[0] if x.ndim == 1 else out


def orthogonal_transforms(n_rotations=4, reflections=True):
    '''planar orthogonal 3x3 matrices: rotations about z by multiples of
    2 pi / n_rotations, each composed with no reflection, a reflection of
    x, of y and of both.'''
    flips = [(1, 1), (-1, 1), (1, -1), (-1, -1)] if reflections else [(1, 1)]
    out = []
    for k in range(n_rotations):
        rot = rotation_z(2.0 * np.pi * k / n_rotations)
        rot[np.abs(rot) < 1e-12] = 0.0
        rot[np.abs(np.abs(rot) - 1.0) < 1e-12] = np.sign(
            rot[np.abs(np.abs(rot) - 1.0) < 1e-12])
        for fx, fy in flips:
            out.append(rot @ np.diag([fx, fy, 1.0]))
    return out


def affine_pool(scene_tgt, scene_ref, cfg=MapConfig(), object_ids=None):
    '''candidate affine maps (T, c_ref - T c_tgt) for every target and
    reference object pair and every planar orthogonal T.

    *object_ids* restricts the target side to those objects.
    '''
    targets = (scene_tgt.objects if object_ids is None
               else [scene_tgt.object(i) for i in object_ids])
    if not targets or not scene_ref.objects:
        raise ValidationError("affine pool needs objects in both scenes")
    transforms = orthogonal_transforms(cfg.n_rotations, cfg.reflections)
    pool = []
    for obj_tgt in targets:
        for obj_ref in scene_ref.objects:
            c_tgt, c_ref = obj_tgt.centroid, obj_ref.centroid
            for T in transforms:
                pool.append(AffineMap(T, c_ref - T @ c_tgt))
    return pool


@contextlib.contextmanager
def frozen(field):
    '''switch off gradients of the field weights.'''
    flags = [p.requires_grad for p in field.parameters()]
    for p in field.parameters():
        p.requires_grad_(False)
    try:
        yield field
    finally:
        for p, flag in zip(field.parameters(), flags):
            p.requires_grad_(flag)


def map_cost(field, points, tgt_desc, scene_ref, A, b, delta=None,
             neighborhoods=None, normaliser=None):
    '''mean |D(p; S_tgt) - D(A p + b + delta_p; S_ref)| as a
    differentiable tensor.

    *tgt_desc* holds the target descriptors of *points*.  Neighbourhoods
    are taken at the current warped points unless given.
    '''
    pts = torch.as_tensor(as_points(points), dtype=DTYPE)
    warped = pts @ A.T + b
    if delta is not None:
        warped = warped + delta
    desc = field.describe(warped, scene_ref, neighborhoods=neighborhoods)
    dist = safe_norm(desc - torch.as_tensor(tgt_desc, dtype=DTYPE))
    return dist.sum() / (len(pts) if normaliser is None else normaliser)


def _cost_and_grads(field, points, tgt_desc, scene_ref, A, b, delta=None):
    '''cost and gradients with respect to (A, b) or delta, evaluated in
    chunks of the field's chunk size.'''
    n = len(points)
    chunk = field.cfg.chunk_size
    total = 0.0
    wrt = [A, b] if delta is None else [delta]
    grads = [torch.zeros_like(t) for t in wrt]
    for start in range(0, n, chunk):
        sl = slice(start, start + chunk)
        with torch.enable_grad():
            part = map_cost(field, points[sl], tgt_desc[sl], scene_ref, A, b,
                            None if delta is None else delta[sl],
                            normaliser=n)
            part_grads = torch.autograd.grad(part, wrt)
        total += float(part)
        for g, pg in zip(grads, part_grads):
            g += pg
    if not np.isfinite(total):
        raise NumericError("map cost is not finite")
    for g in grads:
        check_finite(g, "map cost gradient")
    return total, grads


def coarse_cost(affine, points, field, scene_tgt, scene_ref, tgt_desc=None):
    '''mean descriptor distance between region points and their affine
    images.'''
    pts = as_points(points)
    if tgt_desc is None:
        tgt_desc = field.descriptors(pts, scene_tgt)
    ref_desc = field.descriptors(affine.apply(pts), scene_ref)
    return float(safe_norm(ref_desc - torch.as_tensor(tgt_desc)).mean())


def hungarian_with_gaps(cost):
    '''minimum cost assignment of a matrix that may contain +inf.

    Returns (rows, cols) of the finite matches only.
    '''
    cost = np.asarray(cost, dtype=np.float64)
    finite = np.isfinite(cost)
    if not finite.any():
        return np.zeros(0, dtype=np.int64), np.zeros(0, dtype=np.int64)
    big = (np.abs(cost[finite]).max() + 1.0) * (cost.shape[0] + 1)
    rows, cols = linear_sum_assignment(np.where(finite, cost, big))
    keep = finite[rows, cols]
    return rows[keep], cols[keep]


def reject_outliers(affine, objects, scene_ref, threshold=2.0):
    '''ids of the region *objects* that match a same-label reference
    object within *threshold* after warping by *affine*.'''
    objects = list(objects)
    if not objects or not scene_ref.objects:
        return ()
    warped = affine.apply(np.array([o.centroid for o in objects]))
    dist = np.linalg.norm(warped[:, None, :] -
                          scene_ref.centroids()[None, :, :], axis=2)
    same = (np.array([o.label for o in objects])[:, None] ==
            np.array(scene_ref.labels)[None, :])
    dist = np.where(same, dist, np.inf)
    rows, cols = hungarian_with_gaps(dist)
    inliers = sorted(objects[r].id for r, c in zip(rows, cols)
                     if dist[r, c] <= threshold)
    return tuple(inliers)


def optimize_affine(affine, points, field, scene_tgt, scene_ref, steps,
                    lr=1e-3, tgt_desc=None, history=None):
    '''Adam on (A, b) for the mean descriptor cost.

    Returns the best observed map and its cost; with ``steps == 0`` the
    input map and its cost.  The cost of every evaluated iterate is
    appended to *history* when given.
    '''
    if steps < 0:
        raise ValidationError("steps must not be negative")
    pts = as_points(points)
    if tgt_desc is None:
        tgt_desc = field.descriptors(pts, scene_tgt)
    A = torch.tensor(affine.A, dtype=DTYPE, requires_grad=True)
    b = torch.tensor(affine.b, dtype=DTYPE, requires_grad=True)
    adam = AdamState([A, b], lr=lr)

    best, best_cost = affine, None
    with frozen(field):
        for step in range(steps + 1):
            cost, grads = _cost_and_grads(field, pts, tgt_desc, scene_ref, A, b)
            if history is not None:
                history.append(cost)
            if best_cost is None or cost < best_cost:
                best_cost = cost
                best = AffineMap(A.detach().numpy().copy(),
                                 b.detach().numpy().copy())
            if step < steps:
                adam_step(adam, [A, b], grads)
    return best, best_cost


def optimize_displacements(affine, points, field, scene_tgt, scene_ref, steps,
                           lr=1e-3, tgt_desc=None, history=None):
    '''Adam on one free displacement per region point, affine frozen.

    Returns the best observed (n, 3) displacements and their cost.
    '''
    if steps < 0:
        raise ValidationError("steps must not be negative")
    pts = as_points(points)
    if tgt_desc is None:
        tgt_desc = field.descriptors(pts, scene_tgt)
    A = torch.as_tensor(affine.A, dtype=DTYPE)
    b = torch.as_tensor(affine.b, dtype=DTYPE)
    delta = torch.zeros((len(pts), 3), dtype=DTYPE, requires_grad=True)
    adam = AdamState([delta], lr=lr)

    best, best_cost = np.zeros((len(pts), 3)), None
    with frozen(field):
        for step in range(steps + 1):
            cost, grads = _cost_and_grads(field, pts, tgt_desc, scene_ref,
                                          A, b, delta)
            if history is not None:
                history.append(cost)
            if best_cost is None or cost < best_cost:
                best_cost = cost
                best = delta.detach().numpy().copy()
            if step < steps:
                adam_step(adam, [delta], grads)
    return best, best_cost


def merge_duplicates(points, values, tol=1e-6):
    '''merge points closer than *tol*, averaging their values.'''
    pts = as_points(points)
    values = np.asarray(values, dtype=np.float64).reshape(len(pts), -1)
    group = np.full(len(pts), -1, dtype=np.int64)
    tree = cKDTree(pts)
    n_groups = 0
    for i in range(len(pts)):
        if group[i] >= 0:
            continue
        members = [j for j in tree.query_ball_point(pts[i], tol) if group[j] < 0]
        group[members] = n_groups
        n_groups += 1
    counts = np.bincount(group, minlength=n_groups)[:, None]
    merged_pts = np.zeros((n_groups, 3))
    merged_vals = np.zeros((n_groups, values.shape[1]))
    np.add.at(merged_pts, group, pts)
    np.add.at(merged_vals, group, values)
    return merged_pts / counts, merged_vals / counts


def fit_tps(control_points, deltas, lam=0.5, merge_tol=1e-6):
    '''weights W solving (K + lam I) W = deltas, K_ij = phi(|p_i - p_j|).'''
    ctrl, deltas = merge_duplicates(control_points, deltas, merge_tol)
    if len(ctrl) == 0:
        return DisplacementMap.zero()
    K = tps_kernel(cdist(ctrl, ctrl))
    try:
        weights = scipy.linalg.solve(K + lam * np.eye(len(ctrl)), deltas,
                                     assume_a="sym")
    except (np.linalg.LinAlgError, scipy.linalg.LinAlgError) as exc:
        raise NumericError("singular thin-plate spline system") from exc
    if not np.isfinite(weights).all():
        raise NumericError("thin-plate spline weights are not finite")
    return DisplacementMap(ctrl, weights)


def final_cost(scene_map, points, field, scene_ref, tgt_desc):
    '''mean descriptor distance of the full map on *points*.'''
    ref_desc = field.descriptors(scene_map.apply(points), scene_ref)
    return float(safe_norm(ref_desc - torch.as_tensor(tgt_desc)).mean())


def check_map_cost(scene_map, roi, field, scene_tgt, scene_ref, rtol=1e-8,
                   atol=1e-10):
    '''recompute the cost of *scene_map* on the inlier points of *roi*.

    Raises ValidationError when it differs from the recorded cost.
    '''
    mask = np.isin(roi.point_object_ids, scene_map.inlier_object_ids)
    if not mask.any():
        raise ValidationError("map has no inlier points in the region")
    pts = roi.points[mask]
    tgt_desc = field.descriptors(pts, scene_tgt).numpy()
    cost = final_cost(scene_map, pts, field, scene_ref, tgt_desc)
    if not np.isclose(cost, scene_map.cost, rtol=rtol, atol=atol):
        raise ValidationError(
            "recorded map cost {!r} does not match the recomputed {!r}".format(
                scene_map.cost, cost))
    return cost


@dataclass
class _Candidate:
    affine: AffineMap
    coarse: float
    inliers: tuple = dataclass_field(default_factory=tuple)


def _select_candidates(scene_tgt, scene_ref, roi, field, cfg, tgt_desc):
    object_ids = roi.object_ids if cfg.pool_from_roi else None
    pool = affine_pool(scene_tgt, scene_ref, cfg, object_ids)
    k = min(cfg.coarse_points, len(roi.points))
    subset = farthest_point_sample_indices(roi.points, k)
    costs = np.array([coarse_cost(a, roi.points[subset], field, scene_tgt,
                                  scene_ref, tgt_desc[subset]) for a in pool])
    order = np.argsort(costs, kind="stable")[:cfg.k_coarse]
    E.debug("{} affine candidates, best coarse cost {:.4f}".format(
        len(pool), costs[order[0]]))

    objects = [scene_tgt.object(i) for i in roi.object_ids]
    candidates = [_Candidate(pool[i], float(costs[i]),
                             reject_outliers(pool[i], objects, scene_ref,
                                             cfg.outlier_threshold))
                  for i in order]
    most = max(len(c.inliers) for c in candidates)
    return [c for c in candidates if len(c.inliers) == most]


def _refine(candidate, roi, field, scene_tgt, scene_ref, cfg, tgt_desc):
    mask = np.isin(roi.point_object_ids, candidate.inliers)
    pts, desc = roi.points[mask], tgt_desc[mask]
    # Adam runs on farthest point samples, costs cover every inlier point
    sub = farthest_point_sample_indices(pts, min(cfg.refine_points, len(pts)))

    def scored(affine, displacement=DisplacementMap.zero()):
        trial = SceneMap(affine, displacement, 0.0, candidate.inliers)
        return final_cost(trial, pts, field, scene_ref, desc)

    start_cost = scored(candidate.affine)
    affine, _ = optimize_affine(candidate.affine, pts[sub], field, scene_tgt,
                                scene_ref, cfg.affine_steps, cfg.lr,
                                desc[sub])
    affine_cost = scored(affine)
    if affine_cost > start_cost:
        affine, affine_cost = candidate.affine, start_cost
    result = SceneMap(affine, DisplacementMap.zero(), affine_cost,
                      candidate.inliers, start_cost, affine_cost)
    if not cfg.use_displacement:
        return result

    deltas, _ = optimize_displacements(affine, pts[sub], field, scene_tgt,
                                       scene_ref, cfg.displacement_steps,
                                       cfg.lr, desc[sub])
    displacement = fit_tps(pts[sub], deltas, cfg.tps_lambda, cfg.merge_tol)
    cost = scored(affine, displacement)
    if cost > affine_cost:
        E.debug("spline raises cost {:.4f} -> {:.4f}, keeping affine map"
                .format(affine_cost, cost))
        return result
    return SceneMap(affine, displacement, cost, candidate.inliers,
                    start_cost, affine_cost)


def candidate_maps(scene_tgt, scene_ref, roi, field, cfg=MapConfig()):
    '''every refined candidate map, sorted by cost; empty when no region
    object has a counterpart.'''
    if not scene_ref.objects:
        return []
    tgt_desc = field.descriptors(roi.points, scene_tgt).numpy()
    candidates = _select_candidates(scene_tgt, scene_ref, roi, field, cfg,
                                    tgt_desc)
    if not candidates[0].inliers:
        return []
    maps = [_refine(c, roi, field, scene_tgt, scene_ref, cfg, tgt_desc)
            for c in candidates]
    order = sorted(range(len(maps)), key=lambda i: (maps[i].cost, i))
    return [maps[i] for i in order]


def top_k_maps(scene_tgt, scene_ref, roi, field, cfg=MapConfig(), k=None):
    '''up to *k* valid maps with the smallest costs.'''
    k = cfg.top_k if k is None else k
    maps = candidate_maps(scene_tgt, scene_ref, roi, field, cfg)
    return [m for m in maps if m.cost < cfg.rho_valid][:k]


def estimate_map(scene_tgt, scene_ref, roi, field, cfg=MapConfig()):
    '''the lowest cost scene map of *roi*, or :class:`Unmappable`.'''
    maps = candidate_maps(scene_tgt, scene_ref, roi, field, cfg)
    if not maps:
        E.info("no region object has a counterpart in the reference scene")
        return Unmappable(reason="no inlier objects")
    best = maps[0]
    if best.cost >= cfg.rho_valid:
        E.info("best map cost {:.4f} exceeds {}".format(best.cost,
                                                        cfg.rho_valid))
        return Unmappable(best.cost, "cost above validity threshold")
    E.info("map cost {:.4f} (coarse {:.4f}, affine {:.4f}), {} inliers".format(
        best.cost, best.coarse_cost, best.affine_cost,
        len(best.inlier_object_ids)))
    return best


def nearest_object_roi(points, scene):
    '''region of *points* owned by the nearest object of *scene*.'''
    pts = as_points(points)
    owners = np.concatenate([np.full(len(o.points), o.id, dtype=np.int64)
                             for o in scene.objects])
    _, idx = cKDTree(scene.all_points()).query(pts)
    point_owners = owners[idx]
    ids = tuple(int(i) for i in np.unique(point_owners))
    return RegionOfInterest(ids, pts, point_owners)


def estimate_inverse(scene_ref, scene_tgt, forward, roi, field,
                     cfg=MapConfig()):
    '''map from the reference back to the target scene, estimated on the
    images of the region points under *forward*.'''
    if isinstance(forward, Unmappable):
        return Unmappable(reason="no forward map")
    if not scene_ref.objects:
        return Unmappable(reason="reference scene has no objects")
    inverse_roi = nearest_object_roi(forward.apply(roi.points), scene_ref)
    return estimate_map(scene_ref, scene_tgt, inverse_roi, field, cfg)
