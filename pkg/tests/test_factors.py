import numpy as np
import pytest
from scipy.spatial.transform import Rotation

from src.factors import (
    RelativePoseFactor,
    ToaFactor,
    relative_information,
    relative_pose_residual,
    toa_jacobians,
    toa_residual,
)
from src.geometry import RigidTransform
from src.graph_core import FactorGraph, VariableKind, numeric_jacobian_check, optimize
from src.utils.errors import DegenerateRange


def random_transform(rng, max_angle=0.8, spread=3.0):
    axis = rng.normal(size=3)
    rotation = Rotation.from_rotvec(rng.uniform(0.0, max_angle) * axis / np.linalg.norm(axis))
    return RigidTransform.from_rotation(rotation, rng.uniform(-spread, spread, 3))


def test_toa_residual_three_four_five():
    pose = RigidTransform.from_translation([3.0, 4.0, 0.0])
    residual = toa_residual(pose, RigidTransform.identity(), 1.0, 0.0, np.zeros(3), 5.0)
    assert abs(residual) < 1e-12


def test_toa_residual_bias_cancels_range_offset():
    pose = RigidTransform.from_translation([3.0, 4.0, 0.0])
    assert abs(toa_residual(pose, RigidTransform.identity(), 1.0, 0.5, np.zeros(3), 5.5)) < 1e-12
    assert abs(toa_residual(pose, RigidTransform.identity(), 1.0, 0.0, np.zeros(3), 5.5) + 0.5) < 1e-12


def test_toa_residual_scales_receiver_position():
    pose = RigidTransform.from_translation([1.5, 2.0, 0.0])
    assert abs(toa_residual(pose, RigidTransform.identity(), 2.0, 0.0, np.zeros(3), 5.0)) < 1e-12
    assert abs(toa_residual(pose, RigidTransform.identity(), 1.0, 0.0, np.zeros(3), 5.0) + 2.5) < 1e-12


def test_toa_residual_applies_global_transform():
    transform = RigidTransform.from_rotation(Rotation.from_euler("z", 90, degrees=True), [0.0, 0.0, 1.0])
    pose = RigidTransform.from_translation([2.0, 0.0, 0.0])
    # receiver lands at (0, 2, 1)
    station = np.array([0.0, 2.0, 4.0])
    assert abs(toa_residual(pose, transform, 1.0, 0.0, station, 3.0)) < 1e-12


def test_toa_residual_invariant_to_global_rotation():
    rng = np.random.default_rng(21)
    for _ in range(20):
        pose = random_transform(rng)
        transform = random_transform(rng)
        station = rng.uniform(-5.0, 5.0, 3)
        offset = rng.normal(size=3)
        rotation = RigidTransform.from_rotation(Rotation.from_rotvec(rng.normal(size=3)))
        base = toa_residual(pose, transform, 1.3, 0.1, station, 4.0, offset)
        rotated = toa_residual(pose, rotation.compose(transform), 1.3, 0.1, rotation.apply(station), 4.0, offset)
        assert abs(base - rotated) < 1e-9


def test_toa_residual_scale_gauge():
    rng = np.random.default_rng(22)
    for k in (0.5, 2.0, 3.7):
        pose = random_transform(rng)
        transform = random_transform(rng)
        station = rng.uniform(-5.0, 5.0, 3)
        offset = rng.normal(size=3)
        base = toa_residual(pose, transform, 1.2, 0.0, station, 6.0, offset)
        gauged = toa_residual(pose.with_translation(pose.translation / k),
                              transform.with_translation(transform.translation / k),
                              1.2 * k, 0.0, station, 6.0, offset / k)
        assert abs(base - gauged) < 1e-9


def test_toa_station_jacobian_is_unit_direction():
    rng = np.random.default_rng(23)
    for _ in range(10):
        jac = toa_jacobians(random_transform(rng), random_transform(rng), 1.0, 0.0,
                            rng.uniform(5.0, 8.0, 3), 3.0)
        assert abs(np.linalg.norm(jac.station) - 1.0) < 1e-12
        assert jac.bias == 1.0


def test_toa_jacobian_degenerate_range():
    pose = RigidTransform.from_translation([1.0, 2.0, 3.0])
    with pytest.raises(DegenerateRange):
        toa_jacobians(pose, RigidTransform.identity(), 1.0, 0.0, np.array([1.0, 2.0, 3.0]), 1.0)


def test_toa_factor_validation():
    with pytest.raises(ValueError):
        ToaFactor(0, 1, None, 2, 3, 0.0, 0.1)
    with pytest.raises(ValueError):
        ToaFactor(0, 1, None, 2, 3, 1.0, 0.0)
    assert ToaFactor(0, 1, None, 2, 3, 1.0, 0.1).information[0, 0] == pytest.approx(100.0)


def test_toa_factor_jacobians_match_central_differences():
    rng = np.random.default_rng(24)
    with_scale = ToaFactor(0, 1, 2, 3, 4, 5.0, 0.1, body_offset=[0.1, -0.2, 0.05])
    without_scale = ToaFactor(0, 1, None, 3, 4, 5.0, 0.1)
    for _ in range(100):
        pose = random_transform(rng)
        transform = random_transform(rng)
        scale = rng.uniform(0.5, 2.0)
        bias = rng.uniform(-0.5, 0.5)
        station = rng.uniform(30.0, 40.0, 3) * rng.choice([-1.0, 1.0], 3)
        assert numeric_jacobian_check(with_scale, [pose, transform, scale, bias, station]) < 1e-5
        assert numeric_jacobian_check(without_scale, [pose, transform, bias, station]) < 1e-5


def test_relative_pose_jacobians_match_central_differences():
    rng = np.random.default_rng(25)
    factor = RelativePoseFactor(0, 1, RigidTransform.identity(), np.eye(6))
    for _ in range(100):
        factor.measured = random_transform(rng, max_angle=0.6)
        pose_i = random_transform(rng, max_angle=0.6)
        pose_j = random_transform(rng, max_angle=0.6)
        assert numeric_jacobian_check(factor, [pose_i, pose_j]) < 1e-5


def test_relative_pose_residual_sign():
    measured = RigidTransform.from_translation([1.0, 0.0, 0.0])
    residual = relative_pose_residual(RigidTransform.identity(), RigidTransform.identity(), measured)
    assert np.allclose(residual, [0.0, 0.0, 0.0, -1.0, 0.0, 0.0], atol=1e-12)
    consistent = relative_pose_residual(RigidTransform.identity(), measured, measured)
    assert np.allclose(consistent, 0.0, atol=1e-12)


def test_relative_pose_rescale_keeps_residual_consistent():
    rng = np.random.default_rng(26)
    pose_i, pose_j = random_transform(rng), random_transform(rng)
    measured = pose_i.inverse().compose(pose_j)
    factor = RelativePoseFactor(0, 1, measured, relative_information(0.01, 0.02))
    factor.rescale(2.0)
    scaled_i = pose_i.with_translation(2.0 * pose_i.translation)
    scaled_j = pose_j.with_translation(2.0 * pose_j.translation)
    assert np.allclose(factor.evaluate([scaled_i, scaled_j]), 0.0, atol=1e-9)
    # translation sigma doubles with the frame
    assert factor.information[3, 3] == pytest.approx(1.0 / 0.02 ** 2)
    assert factor.information[0, 0] == pytest.approx(1.0 / 0.02 ** 2)


def test_batch_linearization_matches_single_factors():
    rng = np.random.default_rng(27)
    graph = FactorGraph()
    transform = graph.add_variable(VariableKind.TRANSFORM, random_transform(rng))
    scale = graph.add_variable(VariableKind.SCALE, 1.4)
    bias = graph.add_variable(VariableKind.BIAS, 0.2)
    station = graph.add_variable(VariableKind.STATION_POSITION, np.array([8.0, -7.0, 6.0]))
    factors = []
    for _ in range(12):
        pose = graph.add_variable(VariableKind.POSE, random_transform(rng))
        factor = ToaFactor(pose, transform, scale, bias, station, rng.uniform(3.0, 12.0), 0.1,
                           body_offset=rng.normal(0.0, 0.1, 3))
        graph.add_factor(factor)
        factors.append(factor)
    residuals, blocks = ToaFactor.linearize_batch(factors, graph)
    assert np.allclose(ToaFactor.evaluate_batch(factors, graph), residuals)
    for n, factor in enumerate(factors):
        single_residual, single_blocks = factor.linearize([graph.value(v) for v in factor.variable_ids])
        assert np.allclose(residuals[n], single_residual, atol=1e-12)
        for slot, block in enumerate(single_blocks):
            assert np.allclose(blocks[slot][n], block, atol=1e-12)


def test_relative_pose_batch_matches_single_factors():
    rng = np.random.default_rng(28)
    graph = FactorGraph()
    poses = [graph.add_variable(VariableKind.POSE, random_transform(rng)) for _ in range(8)]
    factors = []
    for i, j in zip(poses[:-1], poses[1:]):
        factor = RelativePoseFactor(i, j, random_transform(rng, max_angle=0.5), relative_information(0.02, 0.01))
        graph.add_factor(factor)
        factors.append(factor)
    # consistent measurement: zero residual takes the small-angle branch
    exact = graph.value(poses[0]).inverse().compose(graph.value(poses[2]))
    factors.append(RelativePoseFactor(poses[0], poses[2], exact, np.eye(6)))

    residuals, blocks = RelativePoseFactor.linearize_batch(factors, graph)
    assert np.allclose(RelativePoseFactor.evaluate_batch(factors, graph), residuals)
    for n, factor in enumerate(factors):
        single_residual, single_blocks = factor.linearize([graph.value(v) for v in factor.variable_ids])
        assert np.allclose(residuals[n], single_residual, atol=1e-10)
        for slot, block in enumerate(single_blocks):
            assert np.allclose(blocks[slot][n], block, atol=1e-10)


def test_bias_is_identifiable_with_known_geometry():
    graph = FactorGraph()
    transform = graph.add_variable(VariableKind.TRANSFORM, RigidTransform.identity(), fixed=True)
    bias = graph.add_variable(VariableKind.BIAS, 0.0)
    station = np.array([2.0, -1.0, 3.0])
    station_id = graph.add_variable(VariableKind.STATION_POSITION, station, fixed=True)
    rng = np.random.default_rng(28)
    for _ in range(30):
        position = rng.uniform(-3.0, 3.0, 3)
        pose = graph.add_variable(VariableKind.POSE, RigidTransform.from_translation(position), fixed=True)
        measured = float(np.linalg.norm(position - station)) + 0.3
        graph.add_factor(ToaFactor(pose, transform, None, bias, station_id, measured, 0.1, kernel=None))
    optimize(graph)
    assert abs(graph.value(bias) - 0.3) < 1e-6
