"""Residuals and Jacobians: ToA range, relative pose (odometry / covisibility / loop closure), prior."""
import logging
from dataclasses import dataclass
from typing import Any, List, Optional, Sequence, Tuple

import numpy as np
from scipy.spatial.transform import Rotation

from src.geometry import (
    RigidTransform,
    hat,
    hat_batch,
    se3_adjoint,
    se3_adjoint_batch,
    se3_left_jacobian_inverse,
    se3_left_jacobian_inverse_batch,
    se3_log,
    se3_log_batch,
    se3_right_jacobian_inverse,
)
from src.graph_core import FactorEdge, FactorGraph, HuberKernel, PriorFactor, VariableKind
from src.utils.errors import DegenerateRange

logger = logging.getLogger(__name__)

__all__ = [
    "MIN_RANGE",
    "PriorFactor",
    "RelativePoseFactor",
    "ToaFactor",
    "ToaJacobians",
    "relative_pose_jacobians",
    "relative_information",
    "relative_pose_residual",
    "toa_jacobians",
    "toa_residual",
]

MIN_RANGE = 1e-9


def _receiver_global(pose: RigidTransform, transform: RigidTransform,
                     body_offset: Optional[np.ndarray]) -> Tuple[np.ndarray, np.ndarray]:
    local = pose.translation if body_offset is None else pose.apply(body_offset)
    return local, transform.apply(local)


def toa_residual(pose: RigidTransform, transform: RigidTransform, scale: float, bias: float,
                 station: np.ndarray, range_m: float, body_offset: Optional[np.ndarray] = None) -> float:
    """e = |s t_gc - L| - (d - tau) with t_gc the translation of transform * pose."""
    _, receiver = _receiver_global(pose, transform, body_offset)
    return float(np.linalg.norm(scale * receiver - np.asarray(station, dtype=float)) - (range_m - bias))


@dataclass
class ToaJacobians:
    pose: np.ndarray
    transform: np.ndarray
    log_scale: float
    bias: float
    station: np.ndarray


def toa_jacobians(pose: RigidTransform, transform: RigidTransform, scale: float, bias: float,
                  station: np.ndarray, range_m: float, body_offset: Optional[np.ndarray] = None) -> ToaJacobians:
    offset = np.zeros(3) if body_offset is None else np.asarray(body_offset, dtype=float)
    local, receiver = _receiver_global(pose, transform, body_offset)
    diff = scale * receiver - np.asarray(station, dtype=float)
    distance = float(np.linalg.norm(diff))
    if distance <= MIN_RANGE:
        raise DegenerateRange(f"Receiver maps onto the station (distance {distance:.3e} m)")
    u = diff / distance
    r_o = pose.rotation_matrix
    r_g = transform.rotation_matrix
    su = scale * u
    pose_jac = np.concatenate([-(su @ r_g @ r_o @ hat(offset)), su @ r_g @ r_o])
    transform_jac = np.concatenate([-(su @ r_g @ hat(local)), su @ r_g])
    return ToaJacobians(pose_jac, transform_jac, float(su @ receiver), 1.0, -u)


class ToaFactor(FactorEdge):
    """Scalar range factor between a keyframe pose and one base station.

    ``body_offset`` is the receiver position in the pose frame at measurement time;
    zero for a measurement taken exactly at the keyframe.
    """

    def __init__(self, pose_id: int, transform_id: int, scale_id: Optional[int], bias_id: int,
                 station_id: int, range_m: float, sigma_m: float,
                 body_offset: Optional[np.ndarray] = None, kernel: Optional[HuberKernel] = HuberKernel(3.0),
                 station_key: str = "", timestamp: float = 0.0):
        if range_m <= 0.0:
            raise ValueError(f"Measured range must be positive, got {range_m}")
        if sigma_m <= 0.0:
            raise ValueError(f"Range sigma must be positive, got {sigma_m}")
        if scale_id is None:
            self.variable_kinds = (VariableKind.POSE, VariableKind.TRANSFORM, VariableKind.BIAS,
                                   VariableKind.STATION_POSITION)
            ids = [pose_id, transform_id, bias_id, station_id]
        else:
            self.variable_kinds = (VariableKind.POSE, VariableKind.TRANSFORM, VariableKind.SCALE,
                                   VariableKind.BIAS, VariableKind.STATION_POSITION)
            ids = [pose_id, transform_id, scale_id, bias_id, station_id]
        super().__init__(ids, np.array([[1.0 / sigma_m ** 2]]), kernel)
        self.pose_id = pose_id
        self.transform_id = transform_id
        self.scale_id = scale_id
        self.bias_id = bias_id
        self.station_id = station_id
        self.range_m = float(range_m)
        self.sigma_m = float(sigma_m)
        self.body_offset = np.zeros(3) if body_offset is None else np.asarray(body_offset, dtype=float).reshape(3)
        self.station_key = station_key
        self.timestamp = timestamp

    def _unpack(self, values: Sequence[Any]):
        if self.scale_id is None:
            pose, transform, bias, station = values
            scale = 1.0
        else:
            pose, transform, scale, bias, station = values
        return pose, transform, scale, bias, station

    def evaluate(self, values: Sequence[Any]) -> np.ndarray:
        pose, transform, scale, bias, station = self._unpack(values)
        return np.array([toa_residual(pose, transform, scale, bias, station, self.range_m, self.body_offset)])

    def linearize(self, values: Sequence[Any]) -> Tuple[np.ndarray, List[np.ndarray]]:
        pose, transform, scale, bias, station = self._unpack(values)
        jac = toa_jacobians(pose, transform, scale, bias, station, self.range_m, self.body_offset)
        residual = np.array([toa_residual(pose, transform, scale, bias, station, self.range_m, self.body_offset)])
        blocks = [jac.pose[None, :], jac.transform[None, :]]
        if self.scale_id is not None:
            blocks.append(np.array([[jac.log_scale]]))
        blocks += [np.array([[jac.bias]]), jac.station[None, :]]
        return residual, blocks

    def rescale(self, factor: float):
        self.body_offset = self.body_offset * factor

    @staticmethod
    def _gather(factors: Sequence["ToaFactor"], graph: FactorGraph):
        poses = [graph.value(f.pose_id) for f in factors]
        transforms = [graph.value(f.transform_id) for f in factors]
        r_o = np.array([p.rotation_matrix for p in poses])
        t_o = np.array([p.translation for p in poses])
        r_g = np.array([t.rotation_matrix for t in transforms])
        t_g = np.array([t.translation for t in transforms])
        if factors[0].scale_id is None:
            scale = np.ones(len(factors))
        else:
            scale = np.array([graph.value(f.scale_id) for f in factors], dtype=float)
        bias = np.array([graph.value(f.bias_id) for f in factors], dtype=float)
        station = np.array([graph.value(f.station_id) for f in factors], dtype=float)
        offset = np.array([f.body_offset for f in factors])
        measured = np.array([f.range_m for f in factors])
        local = np.einsum("nij,nj->ni", r_o, offset) + t_o
        receiver = np.einsum("nij,nj->ni", r_g, local) + t_g
        diff = scale[:, None] * receiver - station
        distance = np.linalg.norm(diff, axis=1)
        residual = distance - (measured - bias)
        return r_o, r_g, scale, offset, local, receiver, diff, distance, residual

    @classmethod
    def evaluate_batch(cls, factors: Sequence["ToaFactor"], graph: FactorGraph) -> np.ndarray:
        return cls._gather(factors, graph)[-1][:, None]

    @classmethod
    def linearize_batch(cls, factors: Sequence["ToaFactor"],
                        graph: FactorGraph) -> Tuple[np.ndarray, List[np.ndarray]]:
        r_o, r_g, scale, offset, local, receiver, diff, distance, residual = cls._gather(factors, graph)
        if np.any(distance <= MIN_RANGE):
            raise DegenerateRange("Receiver maps onto a station position")
        u = diff / distance[:, None]
        su_g = np.einsum("ni,nij->nj", scale[:, None] * u, r_g)
        su_go = np.einsum("nj,njk->nk", su_g, r_o)
        pose_jac = np.concatenate([-np.einsum("nk,nkl->nl", su_go, hat_batch(offset)), su_go], axis=1)
        transform_jac = np.concatenate([-np.einsum("nj,njl->nl", su_g, hat_batch(local)), su_g], axis=1)
        blocks = [pose_jac[:, None, :], transform_jac[:, None, :]]
        if factors[0].scale_id is not None:
            blocks.append(np.sum(scale[:, None] * u * receiver, axis=1)[:, None, None])
        blocks += [np.ones((len(factors), 1, 1)), -u[:, None, :]]
        return residual[:, None], blocks


def relative_pose_residual(pose_i: RigidTransform, pose_j: RigidTransform, measured: RigidTransform) -> np.ndarray:
    """log(measured^-1 * pose_i^-1 * pose_j), zero iff pose_j == pose_i * measured."""
    return se3_log(measured.inverse().compose(pose_i.inverse()).compose(pose_j)).vector


def relative_pose_jacobians(pose_i: RigidTransform, pose_j: RigidTransform,
                            measured: RigidTransform) -> Tuple[np.ndarray, np.ndarray]:
    residual = relative_pose_residual(pose_i, pose_j, measured)
    jac_i = -se3_left_jacobian_inverse(residual) @ se3_adjoint(measured.inverse())
    jac_j = se3_right_jacobian_inverse(residual)
    return jac_i, jac_j


class RelativePoseFactor(FactorEdge):
    """Measured relative transform between two poses."""

    variable_kinds = (VariableKind.POSE, VariableKind.POSE)

    def __init__(self, from_id: int, to_id: int, measured: RigidTransform, information: np.ndarray,
                 edge_type: str = "odometry", kernel: Optional[HuberKernel] = None):
        super().__init__([from_id, to_id], information, kernel)
        if self.residual_dim != 6:
            raise ValueError("Relative pose information must be 6x6")
        self.from_id = from_id
        self.to_id = to_id
        self.measured = measured
        self.edge_type = edge_type

    def evaluate(self, values: Sequence[Any]) -> np.ndarray:
        return relative_pose_residual(values[0], values[1], self.measured)

    def linearize(self, values: Sequence[Any]) -> Tuple[np.ndarray, List[np.ndarray]]:
        jac_i, jac_j = relative_pose_jacobians(values[0], values[1], self.measured)
        return relative_pose_residual(values[0], values[1], self.measured), [jac_i, jac_j]

    @staticmethod
    def _gather(factors: Sequence["RelativePoseFactor"], graph: FactorGraph):
        poses_i = [graph.value(f.from_id) for f in factors]
        poses_j = [graph.value(f.to_id) for f in factors]
        r_i = Rotation.from_quat([p.quaternion for p in poses_i])
        r_j = Rotation.from_quat([p.quaternion for p in poses_j])
        r_m_inv = Rotation.from_quat([f.measured.quaternion for f in factors]).inv()
        t_i = np.array([p.translation for p in poses_i])
        t_j = np.array([p.translation for p in poses_j])
        t_m = np.array([f.measured.translation for f in factors])
        rotation = r_m_inv * r_i.inv() * r_j
        translation = r_m_inv.apply(r_i.inv().apply(t_j - t_i) - t_m)
        return r_m_inv, t_m, se3_log_batch(rotation, translation)

    @classmethod
    def evaluate_batch(cls, factors: Sequence["RelativePoseFactor"], graph: FactorGraph) -> np.ndarray:
        return cls._gather(factors, graph)[-1]

    @classmethod
    def linearize_batch(cls, factors: Sequence["RelativePoseFactor"],
                        graph: FactorGraph) -> Tuple[np.ndarray, List[np.ndarray]]:
        r_m_inv, t_m, residual = cls._gather(factors, graph)
        rm_t = r_m_inv.as_matrix().reshape(-1, 3, 3)
        adjoint = se3_adjoint_batch(rm_t, -np.einsum("nij,nj->ni", rm_t, t_m))
        jac_i = -se3_left_jacobian_inverse_batch(residual) @ adjoint
        jac_j = se3_left_jacobian_inverse_batch(-residual)
        return residual, [jac_i, jac_j]

    def rescale(self, factor: float):
        """Express the measurement in a local frame scaled by ``factor``."""
        self.measured = self.measured.with_translation(self.measured.translation * factor)
        s_inv = np.diag([1.0, 1.0, 1.0] + [1.0 / factor] * 3)
        self.information = s_inv @ self.information @ s_inv


def relative_information(translation_sigma_m: float, rotation_sigma_rad: float) -> np.ndarray:
    """Diagonal 6x6 information for (rotation, translation) sigmas."""
    return np.diag([1.0 / rotation_sigma_rad ** 2] * 3 + [1.0 / translation_sigma_m ** 2] * 3)
