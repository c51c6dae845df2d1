import math

import numpy as np
import pytest
import torch
from scipy.optimize import linear_sum_assignment
from scipy.spatial.distance import cdist

from scenemap.descriptor_field import FieldConfig, init_field
from scenemap.errors import ValidationError
from scenemap.scene_generator import (GeneratorSettings, generate_dataset,
                                      generate_scene)
from scenemap.training import (QUERY_GRID, TrainConfig, bbox_grid,
                               blockwise_assignment, build_object_pool,
                               descriptor_discrimination, generate_negative,
                               generate_positive, generate_triplet,
                               infonce_loss, repose, sample_query_pairs,
                               train_field)

SMALL = FieldConfig(d=16, emb_dim=8, model_dim=16, heads=2, layers=1,
                    ff_dim=32, distance_hidden=16, keypoints_per_object=10)
QUICK = TrainConfig(steps=4, batch_size=2, query_grid=2, log_every=1)


@pytest.fixture(scope="module")
def scenes():
    return generate_dataset(3, seed=7,
                            settings=GeneratorSettings(points_per_object=80))


@pytest.fixture(scope="module")
def pool(scenes):
    return build_object_pool(scenes)


def test_infonce_of_orthogonal_negative():
    a = torch.tensor([[1.0, 0.0], [0.0, 1.0]], dtype=torch.float64)
    n = torch.tensor([[0.0, 1.0], [1.0, 0.0]], dtype=torch.float64)
    loss = float(infonce_loss(a, a, n, tau=0.2))
    assert math.isclose(loss, math.log(1 + math.exp(-5.0)), rel_tol=1e-12)


def test_infonce_is_large_when_negative_wins():
    a = torch.tensor([[1.0, 0.0]], dtype=torch.float64)
    p = torch.tensor([[0.0, 1.0]], dtype=torch.float64)
    assert float(infonce_loss(a, p, a)) > float(infonce_loss(a, a, p))


def test_infonce_rejects_bad_input():
    a = torch.ones(3, 4, dtype=torch.float64)
    with pytest.raises(ValidationError):
        infonce_loss(a, a, torch.ones(2, 4, dtype=torch.float64))
    with pytest.raises(ValidationError):
        infonce_loss(a, a, a, tau=0.0)


def test_train_config_validation():
    with pytest.raises(ValidationError):
        TrainConfig(batch_size=0)
    with pytest.raises(ValidationError):
        TrainConfig(max_shift=-1.0)


def test_pool_buckets_by_label(scenes, pool):
    total = sum(len(s.objects) for s in scenes)
    assert sum(len(v) for v in pool.entries.values()) == total
    for label, objects in pool.entries.items():
        assert all(o.label == label for o in objects)


def test_pool_candidates_start_with_the_object_itself(scenes, pool):
    obj = scenes[0].objects[0]
    cands = pool.candidates(obj, top_k=3)
    assert len(cands) <= 3
    ratios = pool.aspect_ratios(obj.label)
    dist = np.abs(ratios - obj.aspect_ratio).sum(axis=1)
    assert dist[cands[0]] == 0.0
    assert np.all(np.diff(dist[cands]) >= 0)


def test_repose_matches_centroid_and_diagonal(scenes):
    a, b = scenes[0].objects[0], scenes[1].objects[0]
    moved = repose(b, a)
    assert moved.id == a.id and moved.label == a.label
    np.testing.assert_allclose(moved.centroid, a.centroid, atol=1e-9)
    assert math.isclose(moved.diagonal, a.diagonal, rel_tol=1e-9)


def test_positive_keeps_labels(scenes, pool):
    scene = scenes[0]
    positive = generate_positive(scene, pool, np.random.default_rng(0))
    assert [o.label for o in positive.objects] == \
        [o.label for o in scene.objects]
    assert [o.id for o in positive.objects] == [o.id for o in scene.objects]


def test_negative_moves_within_limits(scenes):
    scene = scenes[0]
    negative = generate_negative(scene, np.random.default_rng(1),
                                 max_shift=0.3, max_angle=45.0)
    for before, after in zip(scene.objects, negative.objects):
        assert before.label == after.label
        shift = after.centroid - before.centroid
        assert np.all(np.abs(shift[:2]) <= 0.3 + 1e-9)
        assert abs(shift[2]) < 1e-9


def test_bbox_grid_spans_the_box(scenes):
    obj = scenes[0].objects[0]
    grid = bbox_grid(obj, 3)
    assert grid.shape == (27, 3)
    np.testing.assert_allclose(grid.min(axis=0), obj.bbox_min)
    np.testing.assert_allclose(grid.max(axis=0), obj.bbox_max)


def test_query_pairs_of_identical_objects(scenes):
    obj = scenes[0].objects[0]
    q, q_pos = sample_query_pairs(obj, obj, np.random.default_rng(2),
                                  grid_size=3)
    assert q.shape == q_pos.shape == (2 * 27, 3)
    np.testing.assert_allclose(q[:27], q_pos[:27])


def test_published_query_grid():
    assert QUERY_GRID == 20
    assert TrainConfig().query_grid == 20


def assignment_cost(x, y, rows, cols):
    return cdist(x, y)[rows, cols].sum()


def test_small_blockwise_assignment_is_exact():
    rng = np.random.default_rng(3)
    x, y = rng.normal(size=(40, 3)), rng.normal(size=(40, 3))
    rows, cols = blockwise_assignment(x, y, block=40)
    best_rows, best_cols = linear_sum_assignment(cdist(x, y))
    np.testing.assert_array_equal(rows, np.arange(40))
    assert math.isclose(assignment_cost(x, y, rows, cols),
                        assignment_cost(x, y, best_rows, best_cols),
                        rel_tol=1e-12)


def test_split_blockwise_assignment_is_a_near_optimal_permutation():
    rng = np.random.default_rng(4)
    x = rng.uniform(size=(300, 3))
    y = x + rng.normal(0.0, 0.01, size=(300, 3))
    rows, cols = blockwise_assignment(x, y, block=32)
    np.testing.assert_array_equal(rows, np.arange(300))
    np.testing.assert_array_equal(np.sort(cols), np.arange(300))
    best_rows, best_cols = linear_sum_assignment(cdist(x, y))
    assert (assignment_cost(x, y, rows, cols) <=
            3.0 * assignment_cost(x, y, best_rows, best_cols))


def test_blockwise_assignment_rejects_bad_input():
    with pytest.raises(ValidationError):
        blockwise_assignment(np.zeros((3, 3)), np.zeros((4, 3)))
    with pytest.raises(ValidationError):
        blockwise_assignment(np.zeros((3, 3)), np.zeros((3, 3)), block=0)


def test_query_pairs_at_the_published_grid(scenes):
    obj, other = scenes[0].objects[0], scenes[1].objects[0]
    q, q_pos = sample_query_pairs(obj, other, np.random.default_rng(5))
    n = QUERY_GRID ** 3
    assert q.shape == q_pos.shape == (2 * n, 3)
    assert np.isfinite(q).all() and np.isfinite(q_pos).all()


def test_triplet_slots_cover_every_object(scenes, pool):
    cfg = TrainConfig(query_grid=2)
    triplet = generate_triplet(scenes[1], pool, np.random.default_rng(3), cfg)
    n = len(scenes[1].objects)
    assert triplet.queries.shape == (n * 2 * 8, 3)
    assert sorted(set(triplet.slots.tolist())) == \
        sorted(o.id for o in scenes[1].objects)


def test_training_logs_monotone_best_loss(scenes):
    run = train_field(scenes, init_field(SMALL, seed=1), QUICK, seed=5)
    table = run.log_table()
    assert run.step == QUICK.steps
    assert list(table["step"]) == [1, 2, 3, 4]
    assert np.all(np.isfinite(table["loss"]))
    assert np.all(np.diff(table["best_loss"]) <= 0)
    assert np.all(table["best_loss"] <= table["loss"])


def test_training_changes_parameters(scenes):
    before = init_field(SMALL, seed=1)
    run = train_field(scenes, init_field(SMALL, seed=1), QUICK, seed=5,
                      steps=1)
    assert any(not torch.equal(v, before.params()[n])
               for n, v in run.field.params().items())


def test_resumed_training_matches_uninterrupted(scenes):
    whole = train_field(scenes, init_field(SMALL, seed=1), QUICK, seed=5)
    half = train_field(scenes, init_field(SMALL, seed=1), QUICK, seed=5,
                       steps=2)
    resumed = train_field(scenes, half.field, QUICK, seed=5, steps=2,
                          run=half)
    assert resumed.step == whole.step
    for name, value in whole.field.params().items():
        assert torch.equal(value, resumed.field.params()[name])
    assert [r["loss"] for r in whole.log] == [r["loss"] for r in resumed.log]


def test_training_needs_scenes():
    with pytest.raises(ValidationError):
        train_field([], init_field(SMALL), QUICK, seed=0)


def test_discrimination_is_a_fraction(scenes, pool):
    rng = np.random.default_rng(4)
    triplets = [generate_triplet(s, pool, rng, TrainConfig(query_grid=2))
                for s in scenes[:2]]
    score = descriptor_discrimination(init_field(SMALL, seed=2), triplets,
                                      max_pairs=10)
    assert 0.0 <= score <= 1.0
    with pytest.raises(ValidationError):
        descriptor_discrimination(init_field(SMALL), [])


def test_single_scene_dataset_trains():
    scene = generate_scene(np.random.default_rng(9),
                           GeneratorSettings(points_per_object=60))
    run = train_field([scene], init_field(SMALL, seed=0), QUICK, seed=1,
                      steps=1)
    assert run.step == 1
