"""Seeded 3D point-cloud augmentation pipeline.

Scene mixing, random cropping and per-instance transforms alter global
scene context; rigid perturbations (rotation/tilt/scale/translation/
flips), elastic distortion, and point dropout perturb local geometry.
Every transform is driven by an explicit numpy Generator, and the
pipeline derives one independent stream per (master seed, step, scene),
so parallel and serial augmentation produce identical outputs.

No transform changes label values or the feature channel count.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy import ndimage

from .scene import PointCloud


@dataclass(frozen=True)
class AugmentConfig:
    mix_prob: float = 0.85
    crop_ratio: tuple = (0.8, 1.0)  # per-axis fraction of the extent kept
    rotate_z: tuple = (0.0, 2.0 * np.pi)
    tilt: float = np.pi / 64  # max |angle| about x and y
    scale: tuple = (0.9, 1.1)
    translation: float = 0.2  # max |shift| per axis, meters
    flip_prob: float = 0.5  # applied to x and y independently
    elastic: tuple = ((0.2, 0.4), (0.8, 1.6))  # (granularity, magnitude) passes
    instance_rotate_z: float = np.pi / 8
    instance_scale: tuple = (0.9, 1.1)
    instance_shift: float = 0.1
    dropout: tuple = (0.0, 0.2)  # range of per-point drop probability
    grid_shift: bool = False  # random patch-grid origin shift (tokenizer)
    master_seed: int = 0

    def __post_init__(self):
        for p in (self.mix_prob, self.flip_prob):
            if not 0.0 <= p <= 1.0:
                raise ValueError("probabilities must lie in [0, 1]")
        if min(self.scale) <= 0 or min(self.instance_scale) <= 0:
            raise ValueError("scale ranges must be positive")
        if not 0.0 <= self.dropout[0] <= self.dropout[1] <= 1.0:
            raise ValueError("dropout range must lie in [0, 1]")


@dataclass(frozen=True)
class RigidParams:
    """One sampled rigid transform; applying it twice gives the same result."""

    angle_z: float = 0.0
    tilt_x: float = 0.0
    tilt_y: float = 0.0
    scale: float = 1.0
    translation: tuple = (0.0, 0.0, 0.0)
    flip_x: bool = False
    flip_y: bool = False


def _replace_positions(cloud, positions):
    return PointCloud(
        positions=positions.astype(cloud.positions.dtype, copy=False),
        features=cloud.features,
        labels=cloud.labels,
        instance_ids=cloud.instance_ids,
    )


def mix3d(a, b):
    """Center both scenes at the origin and union them into one sample."""
    if a.labels is None or b.labels is None:
        raise ValueError("scene mixing requires labeled inputs")
    pa = a.positions - a.positions.mean(axis=0)
    pb = b.positions - b.positions.mean(axis=0)

    inst_a = a.instance_ids if a.instance_ids is not None else np.full(a.n_points, -1, np.int64)
    inst_b = b.instance_ids if b.instance_ids is not None else np.full(b.n_points, -1, np.int64)
    offset = inst_a.max() + 1 if inst_a.max() >= 0 else 0
    inst_b = np.where(inst_b >= 0, inst_b + offset, inst_b)

    return PointCloud(
        positions=np.concatenate([pa, pb]).astype(a.positions.dtype),
        features=np.concatenate([a.features, b.features]),
        labels=np.concatenate([a.labels, b.labels]),
        instance_ids=np.concatenate([inst_a, inst_b]),
    )


def _rotation_matrix(params):
    cz, sz = np.cos(params.angle_z), np.sin(params.angle_z)
    cx, sx = np.cos(params.tilt_x), np.sin(params.tilt_x)
    cy, sy = np.cos(params.tilt_y), np.sin(params.tilt_y)
    rz = np.array([[cz, -sz, 0], [sz, cz, 0], [0, 0, 1]])
    rx = np.array([[1, 0, 0], [0, cx, -sx], [0, sx, cx]])
    ry = np.array([[cy, 0, sy], [0, 1, 0], [-sy, 0, cy]])
    return rz @ ry @ rx


def _is_identity(params):
    return (
        params.angle_z == 0.0
        and params.tilt_x == 0.0
        and params.tilt_y == 0.0
        and params.scale == 1.0
        and not any(params.translation)
        and not params.flip_x
        and not params.flip_y
    )


def rigid(cloud, params):
    """Flips, then rotation, then uniform scale, then translation."""
    if _is_identity(params):
        return cloud
    pos = cloud.positions.astype(np.float64)
    if params.flip_x:
        pos = pos * np.array([-1.0, 1.0, 1.0])
    if params.flip_y:
        pos = pos * np.array([1.0, -1.0, 1.0])
    pos = pos @ _rotation_matrix(params).T
    pos = pos * params.scale + np.asarray(params.translation, dtype=np.float64)
    return _replace_positions(cloud, pos)


def sample_rigid(cfg, rng):
    return RigidParams(
        angle_z=float(rng.uniform(*cfg.rotate_z)),
        tilt_x=float(rng.uniform(-cfg.tilt, cfg.tilt)),
        tilt_y=float(rng.uniform(-cfg.tilt, cfg.tilt)),
        scale=float(rng.uniform(*cfg.scale)),
        translation=tuple(rng.uniform(-cfg.translation, cfg.translation, size=3)),
        flip_x=bool(rng.random() < cfg.flip_prob),
        flip_y=bool(rng.random() < cfg.flip_prob),
    )


def elastic(cloud, granularity, magnitude, rng):
    """Smoothed coarse-grid displacement field, trilinearly interpolated.

    The field is rescaled so the largest displacement norm equals
    `magnitude` (so it never exceeds it); magnitude 0 is the identity.
    """
    if granularity <= 0:
        raise ValueError("granularity must be positive")
    if magnitude == 0:
        return cloud
    pos = cloud.positions.astype(np.float64)
    lo = pos.min(axis=0)
    grid_shape = np.floor((pos.max(axis=0) - lo) / granularity).astype(int) + 3

    noise = rng.standard_normal(size=(*grid_shape, 3))
    for _ in range(3):
        for axis in range(3):
            noise = ndimage.uniform_filter1d(noise, size=3, axis=axis, mode="constant")

    # Grid node i sits at lo + (i - 1) * granularity.
    coords = ((pos - lo) / granularity + 1.0).T
    disp = np.stack(
        [ndimage.map_coordinates(noise[..., c], coords, order=1, mode="nearest") for c in range(3)],
        axis=1,
    )
    max_norm = np.linalg.norm(disp, axis=1).max()
    if max_norm > 0:
        # tiny margin keeps the bound valid after float32 storage rounding
        disp *= (1.0 - 1e-6) * magnitude / max_norm
    return _replace_positions(cloud, pos + disp)


def apply_instance(positions, mask, angle, scale, shift):
    """Rotate (about z) and scale one instance about its centroid, then shift.

    Rotation and scaling preserve the centroid, so it moves by exactly
    `shift`. Mutates and returns `positions` (float64).
    """
    centroid = positions[mask].mean(axis=0)
    c, s = np.cos(angle), np.sin(angle)
    rz = np.array([[c, -s, 0], [s, c, 0], [0, 0, 1]])
    positions[mask] = (positions[mask] - centroid) @ rz.T * scale + centroid + np.asarray(shift)
    return positions


def instance_transform(cloud, cfg, rng):
    """Independent z-rotation / scale / shift of each instance about its centroid."""
    if cloud.instance_ids is None:
        raise ValueError("instance transforms require instance ids")
    pos = cloud.positions.astype(np.float64)
    for inst in np.unique(cloud.instance_ids):
        if inst < 0:
            continue
        angle = rng.uniform(-cfg.instance_rotate_z, cfg.instance_rotate_z)
        scale = rng.uniform(*cfg.instance_scale)
        shift = rng.uniform(-cfg.instance_shift, cfg.instance_shift, size=3)
        if angle == 0.0 and scale == 1.0 and not shift.any():
            continue
        pos = apply_instance(pos, cloud.instance_ids == inst, angle, scale, shift)
    return _replace_positions(cloud, pos)


def crop(cloud, ratio, rng, min_points=10, max_tries=10):
    """Keep points inside a random axis-aligned box of side ratio * extent."""
    if ratio >= 1.0:
        return cloud
    pos = cloud.positions
    lo, hi = pos.min(axis=0), pos.max(axis=0)
    size = (hi - lo) * ratio
    for _ in range(max_tries):
        origin = lo + rng.random(3) * (hi - lo - size)
        keep = np.all((pos >= origin) & (pos <= origin + size), axis=1)
        if keep.sum() >= min(min_points, cloud.n_points):
            return _subset(cloud, keep)
    return cloud


def dropout(cloud, p, rng):
    """Keep each point independently with probability 1 - p (never all dropped)."""
    if p <= 0.0:
        return cloud
    keep = rng.random(cloud.n_points) >= p
    if not keep.any():
        keep[0] = True
    return _subset(cloud, keep)


def _subset(cloud, mask):
    return PointCloud(
        positions=cloud.positions[mask],
        features=cloud.features[mask],
        labels=None if cloud.labels is None else cloud.labels[mask],
        instance_ids=None if cloud.instance_ids is None else cloud.instance_ids[mask],
    )


def stream_rng(master_seed, step, scene_index):
    """Independent counter-based generator for one (step, scene) slot."""
    return np.random.default_rng(np.random.SeedSequence(master_seed, spawn_key=(step, scene_index)))


def pipeline(cloud, cfg, step, scene_index, partner=None):
    """Full augmentation chain, fully determined by (seed, step, scene).

    Order: mix3d (with prob mix_prob when a partner is supplied), then
    instance transforms, rigid, elastic passes, crop, dropout.
    """
    rng = stream_rng(cfg.master_seed, step, scene_index)
    if partner is not None and rng.random() < cfg.mix_prob:
        cloud = mix3d(cloud, partner)
    if cloud.instance_ids is not None:
        cloud = instance_transform(cloud, cfg, rng)
    cloud = rigid(cloud, sample_rigid(cfg, rng))
    for granularity, magnitude in cfg.elastic:
        cloud = elastic(cloud, granularity, magnitude, rng)
    cloud = crop(cloud, rng.uniform(*cfg.crop_ratio), rng)
    cloud = dropout(cloud, rng.uniform(*cfg.dropout), rng)
    return cloud


def identity_config(master_seed=0):
    """All-off configuration: pipeline(cloud) == cloud."""
    return AugmentConfig(
        mix_prob=0.0,
        crop_ratio=(1.0, 1.0),
        rotate_z=(0.0, 0.0),
        tilt=0.0,
        scale=(1.0, 1.0),
        translation=0.0,
        flip_prob=0.0,
        elastic=(),
        instance_rotate_z=0.0,
        instance_scale=(1.0, 1.0),
        instance_shift=0.0,
        dropout=(0.0, 0.0),
        master_seed=master_seed,
    )
