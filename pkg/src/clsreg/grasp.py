"""Transfer of grasp control poses from the canonical shape to a fitted instance."""
from __future__ import annotations

import logging
import warnings
from dataclasses import dataclass, field

import numpy as np

from clsreg.cpd import DeformationField, apply_deformation
from clsreg.geometry import Pose, RigidTransform, bbox_diagonal, matrix_to_quat, quat_to_matrix

log = logging.getLogger(__name__)


@dataclass
class GraspAnnotation:
    """Named, ordered control poses expressed in canonical-shape coordinates."""

    labels: list[str]
    poses: list[Pose]
    meta: list[dict] = field(default_factory=list)
    name: str = "grasp"

    def __post_init__(self):
        if len(self.labels) != len(self.poses):
            raise ValueError("labels and poses differ in length")
        if len(set(self.labels)) != len(self.labels):
            raise ValueError("pose labels must be unique")
        if not self.meta:
            self.meta = [{} for _ in self.poses]
        if len(self.meta) != len(self.poses):
            raise ValueError("meta and poses differ in length")

    def to_json(self) -> dict:
        return {
            "name": self.name,
            "poses": [dict(label=lb, **p.to_json(), meta=m)
                      for lb, p, m in zip(self.labels, self.poses, self.meta)],
        }

    @classmethod
    def from_json(cls, d: dict) -> GraspAnnotation:
        entries = d["poses"]
        return cls(
            labels=[e["label"] for e in entries],
            poses=[Pose(e["position"], e["orientation"]) for e in entries],
            meta=[dict(e.get("meta", {})) for e in entries],
            name=d.get("name", "grasp"),
        )


@dataclass
class WarpedGrasp(GraspAnnotation):
    provenance: dict = field(default_factory=dict)

    def to_json(self) -> dict:
        d = super().to_json()
        d["provenance"] = self.provenance
        return d


def warp_position(fld: DeformationField, theta: RigidTransform, pos) -> np.ndarray:
    p = np.asarray(pos, dtype=float).reshape(1, -1)
    moved = apply_deformation(fld, p)[0]
    return theta.matrix @ moved + theta.translation


def frame_step(fld: DeformationField) -> float:
    return 0.01 * bbox_diagonal(fld.template)


def warp_orientation(fld: DeformationField, theta: RigidTransform, pose: Pose,
                     h: float | None = None) -> np.ndarray:
    """Carry the pose's local frame through the field and re-orthonormalize it.

    Each frame axis is pushed through the field as a pair of offset points
    ``position +/- h*axis``; the warped (generally sheared) frame is projected
    to the nearest proper rotation before the rigid part is applied.
    """
    R0 = quat_to_matrix(pose.orientation)
    if not np.any(fld.weights):
        R = R0
    else:
        h = frame_step(fld) if h is None else h
        offsets = np.vstack([pose.position + h * R0.T, pose.position - h * R0.T])
        moved = apply_deformation(fld, offsets)
        F = (moved[:3] - moved[3:]).T / (2.0 * h)
        U, S, Vt = np.linalg.svd(F)
        if S[-1] <= 1e-9 * S[0]:
            warnings.warn("warped frame is degenerate; keeping the rigid-only orientation",
                          RuntimeWarning, stacklevel=2)
            R = R0
        else:
            fix = np.diag([1.0, 1.0, np.sign(np.linalg.det(U @ Vt))])
            R = U @ fix @ Vt
    return matrix_to_quat(theta.matrix @ R)


def warp_pose(fld: DeformationField, theta: RigidTransform, pose: Pose, h: float | None = None) -> Pose:
    return Pose(warp_position(fld, theta, pose.position), warp_orientation(fld, theta, pose, h))


def warp_grasp(annotation: GraspAnnotation, result, h: float | None = None) -> WarpedGrasp:
    """Warp every pose of ``annotation`` with an :class:`~clsreg.inference.InferenceResult`."""
    fld, theta = result.field, result.pose.theta
    poses = [warp_pose(fld, theta, p, h) for p in annotation.poses]
    return WarpedGrasp(
        labels=list(annotation.labels),
        poses=poses,
        meta=[dict(m) for m in annotation.meta],
        name=annotation.name,
        provenance={"x": result.pose.x.tolist(), "theta": theta.to_json()},
    )
