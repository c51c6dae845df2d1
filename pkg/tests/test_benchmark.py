"""Toy-scale benchmarks: train a small field on generated rooms and
score it on generated evaluation pairs.  Run with ``--runslow``."""

import dataclasses
import time

import numpy as np
import pytest
import torch

from scenemap.descriptor_field import FieldConfig, init_field
from scenemap.evaluation import (EvalPair, EvalPairSettings, MetricReport,
                                 evaluate_pair, generate_eval_pair,
                                 generate_unmatchable_pair, ground_truth_map)
from scenemap.map_estimation import (MapConfig, Unmappable, estimate_inverse,
                                     estimate_map)
from scenemap.scene_generator import GeneratorSettings, generate_dataset
from scenemap.scene_model import nearest_object_group, sample_roi
from scenemap.training import (TrainConfig, build_object_pool,
                               descriptor_discrimination, generate_triplet,
                               train_field)

FIELD = FieldConfig(d=64, emb_dim=32, model_dim=64, heads=4, layers=2,
                    ff_dim=128, distance_hidden=32, keypoints_per_object=20)
TRAIN = TrainConfig(steps=200, batch_size=16, query_grid=4, lr=1e-3,
                    log_every=50)
MAPS = MapConfig(k_coarse=3, affine_steps=30, displacement_steps=30,
                 coarse_points=64, lr=1e-2)
PAIRS = EvalPairSettings(roi_points=60)

pytestmark = pytest.mark.slow


@pytest.fixture(scope="module")
def dataset():
    return generate_dataset(8, seed=0,
                            settings=GeneratorSettings(points_per_object=200))


@pytest.fixture(scope="module")
def trained(dataset):
    return train_field(dataset[:6], init_field(FIELD, seed=0), TRAIN, seed=0)


@pytest.fixture(scope="module")
def pairs(dataset):
    rng = np.random.default_rng(1)
    pool = build_object_pool(dataset)
    matchable = [dataclasses.replace(
        generate_eval_pair(scene, dataset, rng, PAIRS, pool),
        name="pair_{}".format(i)) for i, scene in enumerate(dataset[6:])]
    unmatchable = [dataclasses.replace(
        generate_unmatchable_pair(scene, dataset, rng, PAIRS),
        name="unmatchable_{}".format(i))
        for i, scene in enumerate(dataset[6:])]
    return matchable + unmatchable


def test_training_lowers_the_loss(trained):
    table = trained.log_table()
    first = table["loss"].iloc[:20].mean()
    last = table["loss"].iloc[-20:].mean()
    assert last < first


def test_trained_field_discriminates(dataset, trained):
    rng = np.random.default_rng(2)
    pool = build_object_pool(dataset)
    triplets = [generate_triplet(s, pool, rng, TRAIN) for s in dataset[6:]]
    score = descriptor_discrimination(trained.field, triplets, max_pairs=200)
    assert score > 0.5


def test_ground_truth_mapper_is_perfect(pairs):
    rows = [evaluate_pair(p, ground_truth_map(p)) for p in pairs
            if p.matchable]
    report = MetricReport.from_rows(rows)
    assert report.pcp[0.25] == 1.0


def test_displacements_never_raise_the_cost(trained, pairs):
    affine_only = dataclasses.replace(MAPS, use_displacement=False,
                                      rho_valid=10.0)
    full = dataclasses.replace(MAPS, rho_valid=10.0)
    rows = {"full": [], "affine_only": []}
    for pair in pairs:
        if not pair.matchable:
            continue
        a = estimate_map(pair.target, pair.reference, pair.roi,
                         trained.field, affine_only)
        f = estimate_map(pair.target, pair.reference, pair.roi,
                         trained.field, full)
        if isinstance(a, Unmappable):
            assert isinstance(f, Unmappable)
            continue
        assert f.cost <= a.cost + 1e-12
        rows["affine_only"].append(evaluate_pair(pair, a))
        rows["full"].append(evaluate_pair(pair, f))
    for variant in rows.values():
        if variant:
            report = MetricReport.from_rows(variant)
            assert 0.0 <= report.pcp[0.5] <= 1.0


def test_unmatchable_regions_are_rejected(trained, pairs):
    rows = []
    for pair in pairs:
        if pair.matchable:
            continue
        result = estimate_map(pair.target, pair.reference, pair.roi,
                              trained.field, MAPS)
        rows.append(evaluate_pair(pair, result))
    report = MetricReport.from_rows(rows)
    assert report.chamfer_acc[0.2] >= 0.9


def identity_pairs(dataset):
    out = []
    for i, scene in enumerate(dataset):
        roi = sample_roi(scene, nearest_object_group(scene,
                                                     scene.object_ids[0], 1),
                         PAIRS.roi_points)
        out.append(EvalPair(scene, scene, roi, roi.points,
                            name="identity_{}".format(i)))
    return out


def test_self_maps_recover_the_identity(dataset, trained):
    rows = []
    for pair in identity_pairs(dataset):
        forward = estimate_map(pair.target, pair.reference, pair.roi,
                               trained.field, MAPS)
        inverse = estimate_inverse(pair.reference, pair.target, forward,
                                   pair.roi, trained.field, MAPS)
        rows.append(evaluate_pair(pair, forward, inverse))
    report = MetricReport.from_rows(rows)
    assert report.pcp[0.25] >= 0.9
    assert report.bi_pcp[0.25] >= 0.9


def test_displacements_improve_pcp(trained, pairs):
    scores = {}
    for variant, cfg in (("full", MAPS),
                         ("affine_only", dataclasses.replace(
                             MAPS, use_displacement=False))):
        rows = [evaluate_pair(p, estimate_map(p.target, p.reference, p.roi,
                                              trained.field, cfg))
                for p in pairs if p.matchable]
        scores[variant] = MetricReport.from_rows(rows).pcp[0.5]
    assert scores["full"] > scores["affine_only"]


# a desk-scale field; map estimation time does not depend on the weights
TIMED_FIELD = FieldConfig(d=16, emb_dim=8, model_dim=16, heads=2, layers=1,
                          ff_dim=32, distance_hidden=16,
                          keypoints_per_object=10)


def test_map_estimation_runs_within_ten_seconds_per_pair():
    rooms = generate_dataset(3, seed=5)
    assert all(len(room.objects) <= 8 for room in rooms)
    pair = generate_eval_pair(rooms[0], rooms, np.random.default_rng(4),
                              EvalPairSettings(add_range=(0, 0)))
    assert len(pair.reference.objects) <= 8
    assert len(pair.roi.points) == 400 * len(pair.roi.object_ids)
    field = init_field(TIMED_FIELD, seed=0)

    threads = torch.get_num_threads()
    torch.set_num_threads(1)
    try:
        start = time.perf_counter()
        estimate_map(pair.target, pair.reference, pair.roi, field,
                     MapConfig())
        elapsed = time.perf_counter() - start
    finally:
        torch.set_num_threads(threads)
    assert elapsed < 10.0
