"""Category-level non-rigid registration with a learned latent space of CPD deformation fields."""

from clsreg.geometry import (
    Pose,
    RigidTransform,
    add_noise,
    apply_rigid,
    chamfer_error,
    partial_view,
    sample_misalignment,
    voxel_downsample,
)
from clsreg.cpd import CpdConfig, DeformationField, apply_deformation, cpd_register
from clsreg.shape_space import CategoryModel, decode, encode, train_category
from clsreg.inference import InferenceConfig, InferenceResult, LatentPose, infer
from clsreg.grasp import GraspAnnotation, WarpedGrasp, warp_grasp

__version__ = "0.1.0"

__all__ = [
    "CategoryModel",
    "CpdConfig",
    "DeformationField",
    "GraspAnnotation",
    "InferenceConfig",
    "InferenceResult",
    "LatentPose",
    "Pose",
    "RigidTransform",
    "WarpedGrasp",
    "add_noise",
    "apply_deformation",
    "apply_rigid",
    "chamfer_error",
    "cpd_register",
    "decode",
    "encode",
    "infer",
    "partial_view",
    "sample_misalignment",
    "train_category",
    "voxel_downsample",
    "warp_grasp",
]
