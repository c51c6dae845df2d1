'''
training.py - contrastive training of descriptor fields
=======================================================

Descriptor fields learn from procedurally built scene triplets:

* the *source* scene,
* a *positive* scene in which every object is swapped for an object of
  the same label with a similar bounding box aspect ratio, re-posed onto
  the original object,
* a *negative* scene in which every source object is moved by a random
  planar translation and z rotation.

Query points are paired between corresponding objects of source and
positive scene.  The loss pulls the descriptor of ``q`` in the source
towards the descriptor of ``q+`` in the positive scene and pushes it
away from the descriptor of ``q+`` in the negative scene (InfoNCE with
one positive and one negative per anchor).
'''

from dataclasses import dataclass, field as dataclass_field

import numpy as np
import pandas
import torch
from scipy.optimize import linear_sum_assignment
from scipy.spatial import cKDTree
from scipy.spatial.distance import cdist

import cgatcore.experiment as E

from scenemap.errors import ValidationError
from scenemap.numeric_core import AdamState, DTYPE, adam_step, check_finite


TOP_K_CANDIDATES = 100
TEMPERATURE = 0.2
QUERY_GRID = 20
ASSIGNMENT_BLOCK = 256


@dataclass(frozen=True)
class TrainConfig:
    '''hyperparameters of contrastive training.'''

    lr: float = 1e-4
    tau: float = TEMPERATURE
    steps: int = 10000
    batch_size: int = 4
    query_grid: int = QUERY_GRID
    surface_sigma: float = 0.02
    top_k: int = TOP_K_CANDIDATES
    max_shift: float = 0.5
    max_angle: float = 90.0
    log_every: int = 100

    def __post_init__(self):
        for name in ("lr", "tau", "batch_size", "query_grid", "top_k",
                     "log_every"):
            if getattr(self, name) <= 0:
                raise ValidationError(
                    "{} must be positive, got {}".format(
                        name, getattr(self, name)))
        for name in ("steps", "surface_sigma", "max_shift", "max_angle"):
            if getattr(self, name) < 0:
                raise ValidationError(
                    "{} must not be negative, got {}".format(
                        name, getattr(self, name)))


@dataclass(frozen=True, eq=False)
class ObjectPool:
    '''objects available for swapping, bucketed by label.'''

    entries: dict

    def __post_init__(self):
        for label, objects in self.entries.items():
            if any(o.label != label for o in objects):
                raise ValidationError(
                    "pool bucket {} holds objects of another label".format(label))

    def aspect_ratios(self, label):
        return np.array([o.aspect_ratio for o in self.entries[label]])

    def candidates(self, obj, top_k=TOP_K_CANDIDATES):
        '''indices of the *top_k* pool objects of ``obj.label`` closest
        in log aspect ratio.'''
        if not self.entries.get(obj.label):
            raise ValidationError(
                "no pool objects with label {}".format(obj.label))
        dist = np.abs(self.aspect_ratios(obj.label) - obj.aspect_ratio).sum(axis=1)
        return np.argsort(dist, kind="stable")[:top_k]


@dataclass(frozen=True, eq=False)
class TripletRecord:
    '''source, positive and negative scene with paired query points.

    ``queries[i]`` lies in the source scene and ``positives[i]`` in the
    positive (and negative) scene, both belonging to object slot
    ``slots[i]``.
    '''

    source: object
    positive: object
    negative: object
    queries: np.ndarray
    positives: np.ndarray
    slots: np.ndarray

    def __post_init__(self):
        if len(self.positive.objects) != len(self.source.objects):
            raise ValidationError("positive scene changes the object count")
        if self.queries.shape != self.positives.shape:
            raise ValidationError("query pairs are not paired")


def build_object_pool(scenes):
    '''bucket every object of *scenes* by label.'''
    entries = {}
    for scene in scenes:
        for obj in scene.objects:
            entries.setdefault(obj.label, []).append(obj)
    E.debug("object pool with {} labels and {} objects".format(
        len(entries), sum(len(v) for v in entries.values())))
    return ObjectPool({k: tuple(v) for k, v in entries.items()})


def repose(candidate, original):
    '''centre *candidate* on *original* and scale it to the same
    bounding box diagonal.'''
    scale = original.diagonal / max(candidate.diagonal, 1e-12)
    points = (candidate.points - candidate.centroid) * scale + original.centroid
    return original.with_points(points)


def generate_positive(scene, pool, rng, top_k=TOP_K_CANDIDATES):
    '''swap every object for a same-label pool object of similar shape.'''
    objects = []
    for obj in scene.objects:
        cands = pool.candidates(obj, top_k)
        choice = cands[rng.integers(len(cands))]
        objects.append(repose(pool.entries[obj.label][choice], obj))
    return scene.with_objects(objects)


def generate_negative(scene, rng, max_shift=0.5, max_angle=90.0):
    '''move every object by a random planar shift and z rotation about
    its centroid.'''
    objects = []
    limit = np.deg2rad(max_angle)
    for obj in scene.objects:
        shift = rng.uniform(-max_shift, max_shift, size=2)
        theta = rng.uniform(-limit, limit)
        objects.append(obj.rotated_about_centroid(theta, (shift[0], shift[1], 0.0)))
    return scene.with_objects(objects)


def bbox_grid(obj, grid_size):
    '''regular grid of grid_size ** 3 points spanning the bounding box.'''
    axes = [np.linspace(lo, hi, grid_size)
            for lo, hi in zip(obj.bbox_min, obj.bbox_max)]
    return np.stack(np.meshgrid(*axes, indexing="ij"), axis=-1).reshape(-1, 3)


def blockwise_assignment(x, y, block=ASSIGNMENT_BLOCK):
    '''pair two equally sized point sets by minimum Euclidean cost.

    Both sets are split together at the median of the coordinate with
    the largest spread until a block holds at most *block* points; each
    block is then solved exactly.  Sets of up to *block* points get the
    exact global assignment.  Returns (rows, cols) with ``rows`` in
    increasing order.
    '''
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    if len(x) != len(y):
        raise ValidationError(
            "assignment needs equally sized sets, got {} and {}".format(
                len(x), len(y)))
    if block < 1:
        raise ValidationError("block size must be positive")
    rows, cols = [], []
    stack = [(np.arange(len(x)), np.arange(len(y)))]
    while stack:
        ix, iy = stack.pop()
        if len(ix) <= block:
            r, c = linear_sum_assignment(cdist(x[ix], y[iy]))
            rows.append(ix[r])
            cols.append(iy[c])
            continue
        axis = int(np.argmax(np.ptp(np.vstack([x[ix], y[iy]]), axis=0)))
        ox = ix[np.argsort(x[ix, axis], kind="stable")]
        oy = iy[np.argsort(y[iy, axis], kind="stable")]
        half = len(ix) // 2
        stack.append((ox[half:], oy[half:]))
        stack.append((ox[:half], oy[:half]))
    rows = np.concatenate(rows + [np.zeros(0, dtype=np.int64)])
    cols = np.concatenate(cols + [np.zeros(0, dtype=np.int64)])
    order = np.argsort(rows, kind="stable")
    return rows[order], cols[order]


def sample_query_pairs(obj, obj_pos, rng, grid_size=QUERY_GRID, sigma=0.02):
    '''paired query points of two corresponding objects.

    Bounding box grid points are paired by nearest neighbour in
    normalised box coordinates; as many near-surface samples (surface
    points with Gaussian jitter *sigma*) are paired by
    :func:`blockwise_assignment`.
    Returns two (2 * grid_size ** 3, 3) arrays.
    '''
    grid = bbox_grid(obj, grid_size)
    grid_pos = bbox_grid(obj_pos, grid_size)

    def normalised(points, o):
        return (points - o.bbox_min) / np.maximum(o.extent, 1e-12)

    _, nearest = cKDTree(normalised(grid_pos, obj_pos)).query(
        normalised(grid, obj))

    n = len(grid)
    surface = (obj.points[rng.integers(len(obj.points), size=n)] +
               rng.normal(0.0, sigma, size=(n, 3)))
    surface_pos = (obj_pos.points[rng.integers(len(obj_pos.points), size=n)] +
                   rng.normal(0.0, sigma, size=(n, 3)))
    rows, cols = blockwise_assignment(surface, surface_pos)

    queries = np.vstack([grid, surface[rows]])
    positives = np.vstack([grid_pos[nearest], surface_pos[cols]])
    return queries, positives


def generate_triplet(scene, pool, rng, cfg=TrainConfig()):
    '''a full training triplet from *scene*.'''
    positive = generate_positive(scene, pool, rng, cfg.top_k)
    negative = generate_negative(scene, rng, cfg.max_shift, cfg.max_angle)
    queries, positives, slots = [], [], []
    for obj, obj_pos in zip(scene.objects, positive.objects):
        q, q_pos = sample_query_pairs(obj, obj_pos, rng, cfg.query_grid,
                                      cfg.surface_sigma)
        queries.append(q)
        positives.append(q_pos)
        slots.append(np.full(len(q), obj.id, dtype=np.int64))
    return TripletRecord(scene, positive, negative, np.vstack(queries),
                         np.vstack(positives), np.concatenate(slots))


def infonce_loss(anchor, positive, negative, tau=TEMPERATURE):
    '''mean of -log(exp(a.p / tau) / (exp(a.p / tau) + exp(a.n / tau))).'''
    anchor = torch.as_tensor(anchor, dtype=DTYPE)
    positive = torch.as_tensor(positive, dtype=DTYPE)
    negative = torch.as_tensor(negative, dtype=DTYPE)
    if not anchor.shape == positive.shape == negative.shape:
        raise ValidationError(
            "descriptor lists differ in shape: {}, {}, {}".format(
                tuple(anchor.shape), tuple(positive.shape),
                tuple(negative.shape)))
    if tau <= 0:
        raise ValidationError("temperature must be positive, got {}".format(tau))
    logits = torch.stack([(anchor * positive).sum(-1),
                          (anchor * negative).sum(-1)], dim=-1) / tau
    target = torch.zeros(len(logits), dtype=torch.long)
    return torch.nn.functional.cross_entropy(logits, target)


def triplet_descriptors(field, triplet, index, grad=True):
    '''anchor, positive and negative descriptors of the query pairs
    selected by *index*.'''
    if not grad:
        return (field.descriptors(triplet.queries[index], triplet.source),
                field.descriptors(triplet.positives[index], triplet.positive),
                field.descriptors(triplet.positives[index], triplet.negative))
    q = torch.as_tensor(triplet.queries[index], dtype=DTYPE)
    q_pos = torch.as_tensor(triplet.positives[index], dtype=DTYPE)
    return (field.describe(q, triplet.source),
            field.describe(q_pos, triplet.positive),
            field.describe(q_pos, triplet.negative))


def triplet_loss(field, triplet, tau=TEMPERATURE, index=None):
    '''InfoNCE loss of *field* on (a subset of) a triplet's query pairs.'''
    if index is None:
        index = np.arange(len(triplet.queries))
    return float(infonce_loss(
        *triplet_descriptors(field, triplet, index, grad=False), tau=tau))


@dataclass(eq=False)
class TrainingRun:
    '''state of a (possibly resumed) training run.'''

    field: object
    adam: AdamState
    step: int = 0
    log: list = dataclass_field(default_factory=list)

    def log_table(self):
        return pandas.DataFrame(self.log, columns=["step", "loss", "best_loss"])


def start_run(field, cfg):
    return TrainingRun(field, AdamState(list(field.parameters()), lr=cfg.lr))


def step_rng(seed, step):
    return np.random.default_rng([seed, step])


def train_field(source_scenes, field, cfg, seed, steps=None, run=None):
    '''contrastive training of *field* on triplets built from
    *source_scenes*.

    Every step draws one triplet and ``cfg.batch_size`` query pairs
    from a generator seeded by (*seed*, step), so a resumed run
    continues exactly where an uninterrupted one would be.  Returns the
    :class:`TrainingRun`; its ``field`` is trained in place.
    '''
    if not source_scenes:
        raise ValidationError("training needs at least one source scene")
    if run is None:
        run = start_run(field, cfg)
    steps = cfg.steps if steps is None else steps
    pool = build_object_pool(source_scenes)
    params = run.adam.params
    best = min([row["best_loss"] for row in run.log] + [np.inf])

    field.train()
    end = run.step + steps
    while run.step < end:
        rng = step_rng(seed, run.step)
        scene = source_scenes[rng.integers(len(source_scenes))]
        triplet = generate_triplet(scene, pool, rng, cfg)
        index = rng.choice(len(triplet.queries), size=cfg.batch_size,
                           replace=len(triplet.queries) < cfg.batch_size)

        loss = infonce_loss(*triplet_descriptors(field, triplet, index),
                            tau=cfg.tau)
        check_finite(loss, "training loss at step {}".format(run.step))
        grads = torch.autograd.grad(loss, params)
        adam_step(run.adam, params, grads)

        run.step += 1
        value = float(loss)
        best = min(best, value)
        run.log.append({"step": run.step, "loss": value, "best_loss": best})
        if run.step % cfg.log_every == 0:
            E.info("step {}: loss {:.5f}, best {:.5f}".format(
                run.step, value, best))
    field.eval()
    return run


def descriptor_discrimination(field, triplets, max_pairs=None, rng=None):
    '''fraction of query pairs whose positive similarity a.p exceeds
    the negative similarity a.n.'''
    wins, total = 0, 0
    for triplet in triplets:
        index = np.arange(len(triplet.queries))
        if max_pairs is not None and len(index) > max_pairs:
            rng = rng if rng is not None else np.random.default_rng(0)
            index = np.sort(rng.choice(index, size=max_pairs, replace=False))
        anchor, positive, negative = triplet_descriptors(
            field, triplet, index, grad=False)
        wins += int(((anchor * positive).sum(-1) >
                     (anchor * negative).sum(-1)).sum())
        total += len(index)
    if total == 0:
        raise ValidationError("no query pairs to score")
    return wins / total
