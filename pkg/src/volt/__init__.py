"""Desk-scale volume transformer for sparse-voxel semantic segmentation."""

from .model import ModelConfig, init_params, prepare_scene, preset, voxel_features
from .scene import PointCloud, SceneSpec, SparseVoxelSet, generate_scene, load_scene, save_scene

__all__ = [
    "ModelConfig",
    "PointCloud",
    "SceneSpec",
    "SparseVoxelSet",
    "generate_scene",
    "init_params",
    "load_scene",
    "prepare_scene",
    "preset",
    "save_scene",
    "voxel_features",
]
