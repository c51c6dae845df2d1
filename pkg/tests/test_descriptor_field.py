import dataclasses

import numpy as np
import pytest
import torch

from scenemap.descriptor_field import (FieldConfig, field_distance_grid,
                                       field_eval, field_query_jacobian,
                                       init_field, tokenize)
from scenemap.errors import ValidationError
from scenemap.scene_generator import GeneratorSettings, generate_scene
from scenemap.scene_model import (ObjectInstance, gather_neighborhood,
                                  inside_hull, rotation_z)

SMALL = FieldConfig(d=16, emb_dim=8, model_dim=16, heads=2, layers=2,
                    ff_dim=32, distance_hidden=16, keypoints_per_object=10)


@pytest.fixture(scope="module")
def scene():
    return generate_scene(np.random.default_rng(5),
                          GeneratorSettings(points_per_object=100))


@pytest.fixture(scope="module")
def field():
    return init_field(SMALL, seed=11)


def near_object(scene):
    return scene.objects[0].centroid + np.array([0.1, -0.05, 0.2])


def test_config_validation():
    with pytest.raises(ValidationError):
        FieldConfig(r=0.0)
    with pytest.raises(ValidationError):
        FieldConfig(emb_dim=16, model_dim=64)
    with pytest.raises(ValidationError):
        FieldConfig(heads=5)


def test_descriptors_have_unit_norm(field, scene):
    pts = scene.all_points()[::37]
    desc = field.descriptors(pts, scene).numpy()
    assert desc.shape == (len(pts), SMALL.d)
    np.testing.assert_allclose(np.linalg.norm(desc, axis=1), 1.0, atol=1e-12)


def test_chunked_and_single_evaluation_agree(field, scene):
    q = near_object(scene)
    np.testing.assert_allclose(field.descriptors(q[None], scene).numpy()[0],
                               field_eval(q, scene, field), atol=1e-12)


def test_tokens_follow_neighbourhood(field, scene):
    q = near_object(scene)
    tokens = tokenize(q, scene, field)
    nbhd = gather_neighborhood(q, scene, SMALL.r, SMALL.keypoints_per_object)
    assert tokens.shape == (1 + len(nbhd), SMALL.model_dim)


def test_empty_neighbourhood_gives_constant_descriptor(field, scene):
    far = [np.array([100.0, 0.0, 0.0]), np.array([0.0, -80.0, 30.0])]
    assert len(tokenize(far[0], scene, field)) == 1
    np.testing.assert_allclose(field_eval(far[0], scene, field),
                               field_eval(far[1], scene, field), atol=1e-12)


def test_rigid_motion_invariance(field, scene):
    rot = rotation_z(0.7)
    shift = np.array([2.0, -1.0, 0.0])
    moved = scene.transformed(rot, shift)
    q = near_object(scene)
    np.testing.assert_allclose(field_eval(q, scene, field),
                               field_eval(rot @ q + shift, moved, field),
                               atol=1e-9)


def test_semantic_ablation_ignores_labels(scene):
    blind = init_field(dataclasses.replace(SMALL, use_semantic=False),
                       seed=11)
    relabelled = scene.with_objects(
        [ObjectInstance(o.id, 1 + o.label % 8, o.points)
         for o in scene.objects])
    q = near_object(scene)
    np.testing.assert_allclose(field_eval(q, scene, blind),
                               field_eval(q, relabelled, blind), atol=1e-12)


def test_same_seed_same_weights():
    a, b, c = init_field(SMALL, 3), init_field(SMALL, 3), init_field(SMALL, 4)
    for name, value in a.params().items():
        assert torch.equal(value, b.params()[name])
    assert any(not torch.equal(v, c.params()[n])
               for n, v in a.params().items())


def test_load_params_rejects_other_architecture(field):
    other = init_field(dataclasses.replace(SMALL, num_classes=5))
    with pytest.raises(ValidationError):
        field.load_params(other.params())


def test_query_gradient_matches_finite_differences(field, scene):
    q0 = near_object(scene)
    nbhd = field.neighborhoods(q0[None], scene)
    q = torch.as_tensor(q0[None]).clone().requires_grad_(True)
    assert torch.autograd.gradcheck(
        lambda x: field.describe(x, scene, neighborhoods=nbhd), (q,),
        eps=1e-5, atol=1e-6, rtol=1e-4)


def test_query_jacobian_matches_finite_differences(field, scene):
    q = near_object(scene)
    jac = field_query_jacobian(q, scene, field)
    nbhd = field.neighborhoods(q[None], scene)
    h = 1e-5
    for axis in range(3):
        step = np.zeros(3)
        step[axis] = h
        plus = field.describe(torch.as_tensor((q + step)[None]), scene,
                              nbhd)[0].detach().numpy()
        minus = field.describe(torch.as_tensor((q - step)[None]), scene,
                               nbhd)[0].detach().numpy()
        np.testing.assert_allclose(jac[:, axis], (plus - minus) / (2 * h),
                                   atol=1e-6)


def test_distance_grid_slice(field, scene):
    q = near_object(scene)
    table = field_distance_grid(field, scene, q, scene, 0.5, z=0.5)
    assert list(table.columns) == ["x", "y", "z", "distance"]
    assert (table["z"] == 0.5).all()
    pts = table[["x", "y", "z"]].to_numpy()
    assert inside_hull(pts, scene.corners).all()
    assert (table["distance"] >= 0).all() and (table["distance"] <= 2).all()


def test_distance_grid_is_zero_at_the_query(field, scene):
    lo = scene.corners.min(axis=0)
    q = lo + np.array([1.0, 1.0, 0.5])
    table = field_distance_grid(field, scene, q, scene, 0.5, z=0.5)
    hit = table[np.isclose(table["x"], q[0]) & np.isclose(table["y"], q[1])]
    assert len(hit) == 1
    assert hit["distance"].iloc[0] < 1e-9


def test_distance_grid_rejects_resolution(field, scene):
    with pytest.raises(ValidationError):
        field_distance_grid(field, scene, np.zeros(3), scene, 0.0)


def test_labels_beyond_the_field_are_rejected(field, scene):
    first = scene.objects[0]
    unknown = scene.with_objects(
        [ObjectInstance(first.id, SMALL.num_classes + 1, first.points)] +
        list(scene.objects[1:]))
    with pytest.raises(ValidationError):
        field_eval(near_object(scene), unknown, field)
    with pytest.raises(ValidationError):
        field.descriptors(scene.all_points()[:5], unknown)


def reversed_objects(scene):
    return scene.with_objects(list(reversed(scene.objects)))


def with_far_object(scene, q, distance):
    '''*scene* plus a small object whose points all lie *distance* or
    more from *q*.'''
    rng = np.random.default_rng(0)
    offset = rng.uniform(-0.05, 0.05, size=(30, 3))
    centre = q + np.array([distance + 0.1, 0.0, 0.0])
    extra = ObjectInstance(max(scene.object_ids) + 1, 1, centre + offset)
    return scene.with_objects(list(scene.objects) + [extra])


def test_keypoint_order_does_not_matter(field, scene):
    q = near_object(scene)
    shuffled = reversed_objects(scene)
    assert not np.array_equal(scene.keypoints(10).positions,
                              shuffled.keypoints(10).positions)
    np.testing.assert_allclose(field_eval(q, scene, field),
                               field_eval(q, shuffled, field), atol=1e-12)


def test_far_keypoints_are_ignored(field, scene):
    q = near_object(scene)
    crowded = with_far_object(scene, q, SMALL.r)
    np.testing.assert_array_equal(field_eval(q, scene, field),
                                  field_eval(q, crowded, field))


@pytest.mark.slow
@pytest.mark.parametrize("seed", range(100))
def test_descriptor_invariants_on_random_rooms(field, seed):
    rng = np.random.default_rng(1000 + seed)
    room = generate_scene(rng, GeneratorSettings(points_per_object=60))
    owner = room.objects[rng.integers(len(room.objects))]
    q = owner.centroid + rng.uniform(-0.2, 0.2, size=3)
    expected = field_eval(q, room, field)

    rot = rotation_z(rng.uniform(0.0, 2.0 * np.pi))
    shift = np.append(rng.uniform(-3.0, 3.0, size=2), 0.0)
    np.testing.assert_allclose(
        field_eval(rot @ q + shift, room.transformed(rot, shift), field),
        expected, atol=1e-9)
    np.testing.assert_allclose(field_eval(q, reversed_objects(room), field),
                               expected, atol=1e-12)
    np.testing.assert_array_equal(
        field_eval(q, with_far_object(room, q, SMALL.r), field), expected)
