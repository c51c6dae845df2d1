import itertools

import numpy as np
import pytest

from scenemap.errors import InfeasibleError, ValidationError
from scenemap.evaluation import (EvalConfig, EvalPair, EvalPairSettings,
                                 MetricReport, bijectivity_pcp,
                                 chamfer_accuracy, chamfer_distance,
                                 evaluate_pair, generate_eval_pair,
                                 generate_unmatchable_pair, ground_truth_map,
                                 hungarian, metric_columns, pcp)
from scenemap.map_estimation import (AffineMap, DisplacementMap, SceneMap,
                                     Unmappable)
from scenemap.scene_generator import GeneratorSettings, generate_dataset
from scenemap.scene_model import sample_roi


@pytest.fixture(scope="module")
def dataset():
    return generate_dataset(4, seed=13,
                            settings=GeneratorSettings(points_per_object=120))


@pytest.fixture(scope="module")
def pair(dataset):
    return generate_eval_pair(dataset[0], dataset, np.random.default_rng(1),
                              EvalPairSettings(roi_points=30))


def shifted(x):
    return SceneMap(AffineMap(np.eye(3), [x, 0.0, 0.0]),
                    DisplacementMap.zero())


def test_hungarian_matches_brute_force():
    rng = np.random.default_rng(0)
    for _ in range(200):
        n = int(rng.integers(1, 7))
        m = int(rng.integers(n, 8))
        cost = rng.uniform(size=(n, m))
        assignment = hungarian(cost)
        assert len(set(assignment.tolist())) == n
        best = min(sum(cost[i, p[i]] for i in range(n))
                   for p in itertools.permutations(range(m), n))
        assert np.isclose(cost[np.arange(n), assignment].sum(), best)


def test_hungarian_with_forbidden_entries():
    cost = np.array([[np.inf, 1.0], [2.0, np.inf]])
    assert hungarian(cost).tolist() == [1, 0]
    with pytest.raises(InfeasibleError):
        hungarian(np.array([[np.inf, np.inf], [1.0, 2.0]]))
    with pytest.raises(InfeasibleError):
        hungarian(np.array([[1.0, np.inf], [1.0, np.inf]]))
    with pytest.raises(ValidationError):
        hungarian(np.ones((3, 2)))
    assert len(hungarian(np.zeros((0, 4)))) == 0


def test_unperturbed_pair_has_identity_ground_truth(dataset):
    settings = EvalPairSettings.unperturbed(roi_points=30)
    p = generate_eval_pair(dataset[1], dataset, np.random.default_rng(2),
                           settings)
    assert p.matchable
    assert p.reference.object_ids == p.target.object_ids
    assert pcp(SceneMap.identity(), p, 1e-9) == 1.0


def test_eval_pair_ground_truth_lies_on_counterparts(pair):
    assert pair.gt_points.shape == pair.roi.points.shape
    ref_points = pair.reference.all_points()
    for point in pair.gt_points[::7]:
        assert np.min(np.linalg.norm(ref_points - point, axis=1)) < 1e-9


def test_unmatchable_pair_shares_no_label(dataset):
    p = generate_unmatchable_pair(dataset[2], dataset,
                                  np.random.default_rng(3),
                                  EvalPairSettings(roi_points=30))
    assert not p.matchable and p.gt_points is None
    region_labels = {p.target.object(i).label for i in p.roi.object_ids}
    assert not region_labels & set(p.reference.labels)


def test_eval_pair_needs_ground_truth_for_matchable(pair):
    with pytest.raises(ValidationError):
        EvalPair(pair.target, pair.reference, pair.roi, None, True)
    with pytest.raises(ValidationError):
        EvalPair(pair.target, pair.reference, pair.roi,
                 pair.gt_points[:-1], True)


def test_ground_truth_map_scores_full_pcp(pair):
    gt_map = ground_truth_map(pair)
    np.testing.assert_allclose(gt_map.apply(pair.roi.points), pair.gt_points,
                               atol=1e-6)
    for alpha in (0.25, 0.5):
        assert pcp(gt_map, pair, alpha) == 1.0


def test_pcp_of_unmappable_is_zero(pair):
    assert pcp(Unmappable(), pair, 0.5) == 0.0
    assert pcp(None, pair, 0.5) == 0.0


def test_pcp_counts_points_within_threshold(dataset):
    scene = dataset[0]
    roi = sample_roi(scene, scene.object_ids[:2], 10)
    p = EvalPair(scene, scene, roi, roi.points)
    assert pcp(shifted(0.3), p, 0.25) == 0.0
    assert pcp(shifted(0.3), p, 0.5) == 1.0


def test_symmetric_pcp(dataset):
    scene = dataset[0]
    roi = sample_roi(scene, scene.object_ids[:1], 10)
    centre = roi.points.mean(axis=0)
    flipped = (roi.points - centre) * [-1.0, 1.0, 1.0] + centre
    p = EvalPair(scene, scene, roi, flipped)
    mirror = SceneMap(AffineMap(np.diag([-1.0, 1.0, 1.0]),
                                [2.0 * centre[0], 0.0, 0.0]),
                      DisplacementMap.zero())
    assert pcp(SceneMap.identity(), p, 1e-6, symmetry="max") == 1.0
    assert pcp(mirror, p, 1e-6) == 1.0
    assert pcp(SceneMap.identity(), p, 1e-6, symmetry="min") <= \
        pcp(SceneMap.identity(), p, 1e-6)
    with pytest.raises(ValidationError):
        EvalConfig(symmetry="mean")


def test_bijectivity_of_inverse_pair():
    pts = np.random.default_rng(4).uniform(size=(20, 3))
    assert bijectivity_pcp(shifted(0.7), shifted(-0.7), pts, 1e-9) == 1.0
    assert bijectivity_pcp(shifted(0.7), shifted(0.0), pts, 0.5) == 0.0
    assert bijectivity_pcp(shifted(0.7), Unmappable(), pts, 0.5) == 0.0


def test_chamfer_distance():
    x = np.zeros((1, 3))
    y = np.array([[1.0, 0.0, 0.0], [2.0, 0.0, 0.0]])
    assert chamfer_distance(x, y) == pytest.approx(1.0 + 1.5)
    assert chamfer_distance(y, y) == 0.0
    with pytest.raises(ValidationError):
        chamfer_distance(x, np.zeros((0, 3)))


def test_chamfer_accuracy(dataset, pair):
    assert chamfer_accuracy(ground_truth_map(pair), pair, 0.2) in (0, 1)
    assert chamfer_accuracy(Unmappable(), pair, 0.2) == 0
    unmatchable = generate_unmatchable_pair(dataset[1], dataset,
                                            np.random.default_rng(5),
                                            EvalPairSettings(roi_points=30))
    assert chamfer_accuracy(Unmappable(), unmatchable, 0.2) == 1
    assert chamfer_accuracy(SceneMap.identity(), unmatchable, 0.2) == 0


def test_identity_self_pair_is_chamfer_accurate(dataset):
    scene = dataset[0]
    roi = sample_roi(scene, scene.object_ids[:2], 120)
    p = EvalPair(scene, scene, roi, roi.points)
    assert chamfer_accuracy(SceneMap.identity(), p, 0.15) == 1


def test_evaluate_pair_rows(dataset, pair):
    row = evaluate_pair(pair, ground_truth_map(pair), None)
    assert set(metric_columns()) <= set(row)
    assert row["pcp@0.5"] == 1.0
    assert row["bi_pcp@0.5"] == 0.0
    unmatchable = generate_unmatchable_pair(dataset[1], dataset,
                                            np.random.default_rng(6),
                                            EvalPairSettings(roi_points=30))
    row = evaluate_pair(unmatchable, Unmappable())
    assert np.isnan(row["pcp@0.25"]) and np.isnan(row["bi_pcp@0.5"])
    assert row["mapped"] == 0
    assert row["chamfer_acc@0.2"] == 1.0


def test_report_skips_undefined_rows():
    rows = [{"pair": "a", "matchable": 1, "mapped": 1, "cost": 0.1,
             "pcp@0.25": 0.5, "pcp@0.5": 1.0, "bi_pcp@0.25": 0.0,
             "bi_pcp@0.5": 1.0, "chamfer_acc@0.15": 1.0,
             "chamfer_acc@0.2": 1.0},
            {"pair": "b", "matchable": 0, "mapped": 0, "cost": np.inf,
             "pcp@0.25": np.nan, "pcp@0.5": np.nan, "bi_pcp@0.25": np.nan,
             "bi_pcp@0.5": np.nan, "chamfer_acc@0.15": 0.0,
             "chamfer_acc@0.2": 1.0}]
    report = MetricReport.from_rows(rows)
    assert report.pcp[0.25] == 0.5
    assert report.chamfer_acc[0.15] == 0.5
    table = report.table()
    assert list(table["pair"]) == ["a", "b", "all"]
    assert table.iloc[-1]["matchable"] == 1


def test_report_rejects_fractions_outside_unit_interval():
    rows = [{"pair": "a", "matchable": 1, "mapped": 1, "cost": 0.0,
             "pcp@0.25": 1.5, "pcp@0.5": 1.0, "bi_pcp@0.25": 0.0,
             "bi_pcp@0.5": 0.0, "chamfer_acc@0.15": 1.0,
             "chamfer_acc@0.2": 1.0}]
    with pytest.raises(ValidationError):
        MetricReport.from_rows(rows)


def test_global_motion_moves_the_reference(dataset):
    settings = EvalPairSettings.unperturbed(roi_points=30,
                                            global_motion=True)
    p = generate_eval_pair(dataset[1], dataset, np.random.default_rng(2),
                           settings)
    gt_map = ground_truth_map(p)
    assert pcp(gt_map, p, 0.25) == 1.0
    # the ground truth is a rigid motion of the region
    moved = p.gt_points - p.gt_points.mean(axis=0)
    region = p.roi.points - p.roi.points.mean(axis=0)
    assert np.allclose(np.linalg.norm(moved, axis=1).sum(),
                       np.linalg.norm(region, axis=1).sum(), rtol=0.2)
