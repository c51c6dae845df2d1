'''
evaluation.py - evaluation pairs and scene map metrics
======================================================

Evaluation pairs are built from a target scene: a random object and
its nearest neighbours form the region of interest, the rest of the
scene is thinned out, jittered, extended with objects from a similar
scene and re-furnished with look-alike objects to produce the
reference scene.  Because the generator knows where every region
object ended up, a per-object minimum cost matching between region
points and points sampled on the counterpart objects gives pseudo
ground truth.

Metrics
-------

PCP
    fraction of region points mapped within ``alpha`` of their ground
    truth.
Bijectivity PCP
    fraction of region points that return within ``alpha`` of
    themselves under the inverse map applied after the forward map.
Chamfer accuracy
    1 if the warped region objects lie within a mean Chamfer distance
    ``alpha`` of their nearest reference objects; for unmatchable pairs
    1 if no map was produced.

Chamfer distances are means over points.
'''

import itertools
from dataclasses import dataclass, field as dataclass_field

import numpy as np
import pandas
from scipy.optimize import linear_sum_assignment
from scipy.spatial import cKDTree

import cgatcore.experiment as E

from scenemap.errors import InfeasibleError, ValidationError
from scenemap.map_estimation import (AffineMap, SceneMap, Unmappable,
                                     fit_tps)
from scenemap.scene_model import (ROI_POINTS_PER_OBJECT, Scene, as_points,
                                  build_occupancy_grid, farthest_point_sample,
                                  nearest_object_group, rotation_z, sample_roi)
from scenemap.training import TOP_K_CANDIDATES, build_object_pool, repose


PCP_THRESHOLDS = (0.25, 0.5)
CHAMFER_THRESHOLDS = (0.15, 0.2)


@dataclass(frozen=True)
class EvalConfig:
    '''metric thresholds.'''

    pcp_thresholds: tuple = PCP_THRESHOLDS
    chamfer_thresholds: tuple = CHAMFER_THRESHOLDS
    symmetry: str = None

    def __post_init__(self):
        if any(a <= 0 for a in tuple(self.pcp_thresholds) +
               tuple(self.chamfer_thresholds)):
            raise ValidationError("metric thresholds must be positive")
        if self.symmetry not in (None, "min", "max"):
            raise ValidationError(
                "symmetry must be None, 'min' or 'max', got {}".format(
                    self.symmetry))


@dataclass(frozen=True)
class EvalPairSettings:
    '''perturbations applied when building a reference scene.'''

    k_range: tuple = (2, 4)
    p_remove: float = 0.5
    translation_noise: float = 0.05
    rotation_noise: float = 10.0
    add_range: tuple = (2, 5)
    replace: bool = True
    global_motion: bool = True
    max_global_shift: float = 1.0
    roi_points: int = ROI_POINTS_PER_OBJECT
    cell_sizes: tuple = (0.1, 0.05)
    placement_attempts: int = 200
    top_k: int = TOP_K_CANDIDATES

    @classmethod
    def unperturbed(cls, **kwargs):
        '''settings under which the reference equals the target.'''
        values = dict(p_remove=0.0, translation_noise=0.0, rotation_noise=0.0,
                      add_range=(0, 0), replace=False, global_motion=False)
        values.update(kwargs)
        return cls(**values)


@dataclass(frozen=True, eq=False)
class EvalPair:
    '''target and reference scene with the region to be mapped.'''

    target: Scene
    reference: Scene
    roi: object
    gt_points: np.ndarray = None
    matchable: bool = True
    name: str = ""

    def __post_init__(self):
        if self.matchable != (self.gt_points is not None):
            raise ValidationError(
                "ground truth must be present exactly for matchable pairs")
        if self.gt_points is not None:
            gt = as_points(self.gt_points)
            if len(gt) != len(self.roi.points):
                raise ValidationError(
                    "{} ground truth points for {} region points".format(
                        len(gt), len(self.roi.points)))
            object.__setattr__(self, "gt_points", gt)


def hungarian(cost):
    '''optimal injective assignment of rows to columns.

    Returns the column of every row.  Raises InfeasibleError when some
    row has no finite entry.
    '''
    cost = np.asarray(cost, dtype=np.float64)
    if cost.ndim != 2 or cost.shape[0] > cost.shape[1]:
        raise ValidationError(
            "need an n x m cost matrix with n <= m, got {}".format(cost.shape))
    if cost.shape[0] == 0:
        return np.zeros(0, dtype=np.int64)
    finite = np.isfinite(cost)
    if not finite.any(axis=1).all():
        raise InfeasibleError("a row of the cost matrix has no finite entry")
    if finite.all():
        rows, cols = linear_sum_assignment(cost)
    else:
        big = (np.abs(cost[finite]).max() + 1.0) * (cost.shape[0] + 1)
        rows, cols = linear_sum_assignment(np.where(finite, cost, big))
        if not finite[rows, cols].all():
            raise InfeasibleError("no assignment with finite cost exists")
    out = np.empty(cost.shape[0], dtype=np.int64)
    out[rows] = cols
    return out


def assignment_cost(cost, assignment):
    cost = np.asarray(cost, dtype=np.float64)
    return float(cost[np.arange(len(assignment)), assignment].sum())


def closest_histogram_scene(scene, dataset, num_classes):
    '''dataset scene with the smallest L1 label histogram distance.'''
    target = scene.label_histogram(num_classes)
    dists = [np.abs(s.label_histogram(num_classes) - target).sum()
             for s in dataset]
    return dataset[int(np.argmin(dists))]


def _place_object(obj, scene, rng, settings):
    '''*obj* moved to a random collision-free floor position of *scene*,
    or None.'''
    for cell_size in settings.cell_sizes:
        grid = build_occupancy_grid(scene, cell_size)
        lo = scene.corners.min(axis=0)
        hi = scene.corners.max(axis=0)
        for _ in range(settings.placement_attempts):
            xy = rng.uniform(lo[:2], hi[:2])
            shift = np.append(xy - obj.centroid[:2], 0.0)
            if grid.box_free(obj.bbox_min + shift, obj.bbox_max + shift):
                return obj.transformed(np.eye(3), shift)
    return None


def _reference_objects(scene, group, dataset, rng, settings, pool):
    num_classes = max([o.label for s in dataset for o in s.objects] +
                      scene.labels + [1])
    kept = []
    for obj in scene.objects:
        if obj.id in group:
            kept.append(obj)
        elif rng.uniform() < settings.p_remove:
            continue
        else:
            shift = rng.uniform(-settings.translation_noise,
                                settings.translation_noise, size=2)
            limit = np.deg2rad(settings.rotation_noise)
            kept.append(obj.rotated_about_centroid(
                rng.uniform(-limit, limit), (shift[0], shift[1], 0.0)))

    if settings.replace:
        replaced = []
        for obj in kept:
            cands = pool.candidates(obj, settings.top_k)
            choice = pool.entries[obj.label][cands[rng.integers(len(cands))]]
            replaced.append(repose(choice, obj))
        kept = replaced

    low, high = settings.add_range
    n_add = int(rng.integers(low, high + 1)) if high > 0 else 0
    if n_add:
        donor = closest_histogram_scene(scene, dataset, num_classes)
        next_id = max([o.id for o in scene.objects] + [-1]) + 1
        current = scene.with_objects(kept)
        for pick in rng.integers(len(donor.objects), size=n_add):
            placed = _place_object(donor.objects[pick], current, rng, settings)
            if placed is None:
                E.debug("no free spot for an added object, skipping it")
                continue
            kept.append(placed.with_points(placed.points, object_id=next_id))
            next_id += 1
            current = scene.with_objects(kept)
    return kept


def _match_region(roi, counterparts, motion, settings):
    '''per-object minimum cost matching of region points to points
    sampled on the counterpart objects.'''
    rot, shift = motion
    gt = np.empty_like(roi.points)
    for object_id, counterpart in counterparts.items():
        mask = roi.point_object_ids == object_id
        region = roi.points[mask]
        if len(region) > len(counterpart.points):
            raise ValidationError(
                "counterpart of object {} has too few points".format(object_id))
        samples = farthest_point_sample(counterpart.points, len(region))
        back = (samples - shift) @ rot
        cost = np.linalg.norm(region[:, None, :] - back[None, :, :], axis=2)
        gt[mask] = samples[hungarian(cost)]
    return gt


def generate_eval_pair(scene, dataset, rng, settings=EvalPairSettings(),
                       pool=None):
    '''a matchable evaluation pair with pseudo ground truth.'''
    if not dataset:
        raise ValidationError("evaluation pairs need a non-empty dataset")
    if len(scene.objects) < 2:
        raise ValidationError("the target scene needs at least two objects")
    pool = build_object_pool(dataset) if pool is None else pool

    seed_id = scene.object_ids[rng.integers(len(scene.objects))]
    k = int(rng.integers(settings.k_range[0], settings.k_range[1] + 1))
    group = nearest_object_group(scene, seed_id, min(k, len(scene.objects) - 1))
    roi = sample_roi(scene, group, settings.roi_points)

    objects = _reference_objects(scene, group, dataset, rng, settings, pool)
    reference = scene.with_objects(objects).enclosed()

    rot, shift = np.eye(3), np.zeros(3)
    if settings.global_motion:
        rot = rotation_z(rng.uniform(0.0, 2.0 * np.pi))
        shift = np.append(rng.uniform(-settings.max_global_shift,
                                      settings.max_global_shift, size=2), 0.0)
        reference = reference.transformed(rot, shift)

    counterparts = {i: reference.object(i) for i in group}
    gt = _match_region(roi, counterparts, (rot, shift), settings)
    E.debug("evaluation pair: region {} with {} points, reference with {} "
            "objects".format(group, len(roi.points), len(reference.objects)))
    return EvalPair(scene, reference, roi, gt, True)


def generate_unmatchable_pair(scene, dataset, rng, settings=EvalPairSettings()):
    '''an evaluation pair whose reference shares no label with the
    region.'''
    if not dataset:
        raise ValidationError("evaluation pairs need a non-empty dataset")
    seed_id = scene.object_ids[rng.integers(len(scene.objects))]
    k = int(rng.integers(settings.k_range[0], settings.k_range[1] + 1))
    group = nearest_object_group(scene, seed_id, min(k, len(scene.objects) - 1))
    roi = sample_roi(scene, group, settings.roi_points)
    labels = {scene.object(i).label for i in group}
    donor = dataset[rng.integers(len(dataset))]
    reference = donor.with_objects(
        [o for o in donor.objects if o.label not in labels])
    return EvalPair(scene, reference, roi, None, False)


def _reflections(points):
    centre = points.mean(axis=0)
    yield points
    for flip in (np.array([-1.0, 1.0, 1.0]), np.array([1.0, -1.0, 1.0])):
        yield (points - centre) * flip + centre


def pcp(scene_map, pair, alpha, symmetry=None):
    '''fraction of region points mapped within *alpha* of the ground
    truth.

    *symmetry* ``"min"`` or ``"max"`` also scores against the ground
    truth reflected along x and along y about its centroid and reports
    the smallest or largest fraction.
    '''
    if not pair.matchable:
        raise ValidationError("PCP needs a matchable pair")
    if isinstance(scene_map, Unmappable) or scene_map is None:
        return 0.0
    pred = scene_map.apply(pair.roi.points)

    def score(gt):
        return float(np.mean(np.linalg.norm(pred - gt, axis=1) <= alpha))

    if symmetry is None:
        return score(pair.gt_points)
    scores = [score(gt) for gt in _reflections(pair.gt_points)]
    if symmetry == "min":
        return min(scores)
    if symmetry == "max":
        return max(scores)
    raise ValidationError("unknown symmetry mode {}".format(symmetry))


def bijectivity_pcp(forward, inverse, points, alpha):
    '''fraction of *points* returned within *alpha* by inverse after
    forward; 0 when either map is missing.'''
    pts = as_points(points)
    if (forward is None or inverse is None or
            isinstance(forward, Unmappable) or isinstance(inverse, Unmappable)):
        return 0.0
    back = inverse.apply(forward.apply(pts))
    return float(np.mean(np.linalg.norm(back - pts, axis=1) <= alpha))


def chamfer_distance(x, y):
    '''mean nearest neighbour distance from x to y plus from y to x.'''
    x, y = as_points(x), as_points(y)
    if len(x) == 0 or len(y) == 0:
        raise ValidationError("Chamfer distance needs two non-empty sets")
    dxy, _ = cKDTree(y).query(x)
    dyx, _ = cKDTree(x).query(y)
    return float(dxy.mean() + dyx.mean())


def mean_object_chamfer(scene_map, pair):
    '''mean Chamfer distance between warped region objects and their
    nearest (by centroid) reference objects.'''
    if not pair.reference.objects:
        return float("inf")
    centroids = pair.reference.centroids()
    tree = cKDTree(centroids)
    dists = []
    for object_id in pair.roi.object_ids:
        warped = scene_map.apply(pair.roi.object_points(object_id))
        _, j = tree.query(warped.mean(axis=0))
        dists.append(chamfer_distance(warped, pair.reference.objects[j].points))
    return float(np.mean(dists))


def chamfer_accuracy(result, pair, alpha):
    '''1 for a correct outcome on *pair*, else 0.'''
    mapped = not (result is None or isinstance(result, Unmappable))
    if not pair.matchable:
        return int(not mapped)
    if not mapped:
        return 0
    return int(mean_object_chamfer(result, pair) <= alpha)


def ground_truth_map(pair):
    '''a scene map interpolating the pseudo ground truth: least squares
    affine fit plus an interpolating thin-plate spline on the residual.'''
    if not pair.matchable:
        raise ValidationError("unmatchable pairs have no ground truth")
    pts, gt = pair.roi.points, pair.gt_points
    design = np.column_stack([pts, np.ones(len(pts))])
    coef, *_ = np.linalg.lstsq(design, gt, rcond=None)
    affine = AffineMap(coef[:3].T, coef[3])
    residual = gt - affine.apply(pts)
    return SceneMap(affine, fit_tps(pts, residual, lam=0.0), 0.0,
                    pair.roi.object_ids)


def metric_columns(cfg=EvalConfig()):
    cols = ["pcp@{:g}".format(a) for a in cfg.pcp_thresholds]
    cols += ["bi_pcp@{:g}".format(a) for a in cfg.pcp_thresholds]
    cols += ["chamfer_acc@{:g}".format(a) for a in cfg.chamfer_thresholds]
    return cols


def evaluate_pair(pair, forward, inverse=None, cfg=EvalConfig()):
    '''one report row for *pair*.'''
    mapped = not (forward is None or isinstance(forward, Unmappable))
    row = {"pair": pair.name,
           "matchable": int(pair.matchable),
           "mapped": int(mapped),
           "cost": float(forward.cost) if forward is not None else np.nan}
    for alpha in cfg.pcp_thresholds:
        key = "{:g}".format(alpha)
        if pair.matchable:
            row["pcp@" + key] = pcp(forward, pair, alpha, cfg.symmetry)
            row["bi_pcp@" + key] = bijectivity_pcp(forward, inverse,
                                                   pair.roi.points, alpha)
        else:
            row["pcp@" + key] = np.nan
            row["bi_pcp@" + key] = np.nan
    for alpha in cfg.chamfer_thresholds:
        row["chamfer_acc@{:g}".format(alpha)] = float(
            chamfer_accuracy(forward, pair, alpha))
    return row


def aggregate_rows(rows, cfg=EvalConfig()):
    '''the mean of every metric column over the rows where it is
    defined.'''
    table = pandas.DataFrame(rows)
    agg = {"pair": "all",
           "matchable": int(table["matchable"].sum()) if len(table) else 0,
           "mapped": int(table["mapped"].sum()) if len(table) else 0,
           "cost": np.nan}
    for col in metric_columns(cfg):
        agg[col] = float(table[col].mean()) if len(table) else np.nan
    return agg


@dataclass
class MetricReport:
    '''per-pair metric rows and their aggregate.'''

    thresholds: dict
    pcp: dict = dataclass_field(default_factory=dict)
    bi_pcp: dict = dataclass_field(default_factory=dict)
    chamfer_acc: dict = dataclass_field(default_factory=dict)
    rows: list = dataclass_field(default_factory=list)

    @classmethod
    def from_rows(cls, rows, cfg=EvalConfig()):
        agg = aggregate_rows(rows, cfg)
        report = cls({"pcp": tuple(cfg.pcp_thresholds),
                      "chamfer": tuple(cfg.chamfer_thresholds)},
                     rows=list(rows))
        for alpha in cfg.pcp_thresholds:
            report.pcp[alpha] = agg["pcp@{:g}".format(alpha)]
            report.bi_pcp[alpha] = agg["bi_pcp@{:g}".format(alpha)]
        for alpha in cfg.chamfer_thresholds:
            report.chamfer_acc[alpha] = agg["chamfer_acc@{:g}".format(alpha)]
        for value in itertools.chain(report.pcp.values(),
                                     report.bi_pcp.values(),
                                     report.chamfer_acc.values()):
            if not (np.isnan(value) or 0.0 <= value <= 1.0):
                raise ValidationError("metric fraction {} outside [0, 1]"
                                      .format(value))
        return report

    def table(self, cfg=EvalConfig()):
        '''per-pair rows followed by the aggregate row.'''
        columns = ["pair", "matchable", "mapped", "cost"] + metric_columns(cfg)
        rows = list(self.rows) + [aggregate_rows(self.rows, cfg)]
        return pandas.DataFrame(rows, columns=columns)
