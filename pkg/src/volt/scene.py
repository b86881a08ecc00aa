"""Point-cloud and sparse-voxel data model.

Covers voxelization of raw clouds onto an integer grid, projection of
per-voxel values back to points, deterministic synthetic labeled-room
generation, and binary scene file I/O (the "VOLT1" format).

Conventions:
  * voxel index = floor(position / voxel_size), componentwise, so points
    with negative coordinates get well-defined (negative) indices;
  * the voxel label/feature comes from a single representative point;
  * label id -1 marks ignored points, instance id -1 marks background.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, field

import numpy as np

IGNORE_LABEL = -1

_MAGIC = b"VOLT"
_VERSION = 1


class SceneFormatError(ValueError):
    """Raised for malformed VOLT1 scene files."""


@dataclass(frozen=True)
class PointCloud:
    """A raw scene: N points with metric coordinates and feature channels."""

    positions: np.ndarray  # (N, 3) float, meters
    features: np.ndarray  # (N, C) float
    labels: np.ndarray | None = None  # (N,) int, class ids or IGNORE_LABEL
    instance_ids: np.ndarray | None = None  # (N,) int, background = -1

    def __post_init__(self):
        pos = np.asarray(self.positions)
        if pos.ndim != 2 or pos.shape[1] != 3 or pos.shape[0] < 1:
            raise ValueError(f"positions must be (N>=1, 3), got {pos.shape}")
        if not np.all(np.isfinite(pos)):
            raise ValueError("positions contain non-finite values")
        feat = np.asarray(self.features)
        if feat.ndim != 2 or feat.shape[0] != pos.shape[0] or feat.shape[1] < 1:
            raise ValueError(f"features must be (N, C>=1), got {feat.shape}")
        for name in ("labels", "instance_ids"):
            arr = getattr(self, name)
            if arr is not None and np.asarray(arr).shape != (pos.shape[0],):
                raise ValueError(f"{name} must have length N={pos.shape[0]}")

    @property
    def n_points(self):
        return self.positions.shape[0]

    @property
    def n_channels(self):
        return self.features.shape[1]


@dataclass(frozen=True)
class SparseVoxelSet:
    """Occupied voxels of a cloud plus the point->voxel assignment."""

    coords: np.ndarray  # (M, 3) int64 voxel indices, unique rows
    features: np.ndarray  # (M, C)
    labels: np.ndarray | None  # (M,)
    point_to_voxel: np.ndarray  # (N,) int64 into [0, M)
    voxel_size: float

    @property
    def n_voxels(self):
        return self.coords.shape[0]


@dataclass(frozen=True)
class SceneSpec:
    """Parameters for the synthetic labeled-room generator."""

    seed: int
    extent: tuple = (4.0, 4.0, 2.5)  # room size in meters
    n_objects: tuple = (3, 6)  # inclusive range of box count
    n_classes: int = 6  # floor=0, wall=1, boxes in [2, K)
    noise: float = 0.005  # positional jitter sigma, meters
    density: float = 250.0  # surface samples per square meter

    def __post_init__(self):
        if min(self.extent) <= 0:
            raise ValueError("extent must be positive")
        if self.n_classes < 2:
            raise ValueError("need at least floor and wall classes")


def _unique_rows_first_occurrence(rows):
    """Unique rows ordered by first occurrence.

    Returns (unique, first_index, inverse) with `inverse` mapping each
    input row to its slot in `unique`.
    """
    uniq, first, inverse = np.unique(rows, axis=0, return_index=True, return_inverse=True)
    inverse = inverse.reshape(-1)  # numpy >= 2.0 returns (N, 1) for axis=0
    order = np.argsort(first, kind="stable")
    rank = np.empty(len(order), dtype=np.int64)
    rank[order] = np.arange(len(order))
    return uniq[order], first[order], rank[inverse]


def voxelize(cloud, voxel_size, mode="deterministic", rng=None, feature_reduce="representative"):
    """Bucket points onto the voxel grid, keeping one representative each.

    `deterministic` picks the lowest-original-index point per voxel;
    `stochastic` picks uniformly using `rng` (a training-time
    regularizer). `feature_reduce="mean"` averages the features over the
    voxel instead of copying the representative's; the label always comes
    from the representative point.
    """
    if voxel_size <= 0:
        raise ValueError("voxel_size must be positive")
    if mode not in ("deterministic", "stochastic"):
        raise ValueError(f"unknown voxelize mode {mode!r}")
    positions = np.asarray(cloud.positions)
    if not np.all(np.isfinite(positions)):
        raise ValueError("cannot voxelize non-finite coordinates")

    all_coords = np.floor(positions / float(voxel_size)).astype(np.int64)
    coords, first_index, point_to_voxel = _unique_rows_first_occurrence(all_coords)
    n_voxels = coords.shape[0]

    if mode == "deterministic":
        representative = first_index
    else:
        if rng is None:
            raise ValueError("stochastic voxelization requires an rng")
        # First element of each voxel group under a random permutation is
        # uniform over the group's members.
        perm = rng.permutation(cloud.n_points)
        _, pos_in_perm = np.unique(point_to_voxel[perm], return_index=True)
        representative = np.empty(n_voxels, dtype=np.int64)
        representative[point_to_voxel[perm[pos_in_perm]]] = perm[pos_in_perm]

    if feature_reduce == "representative":
        feats = np.asarray(cloud.features)[representative].copy()
    elif feature_reduce == "mean":
        feats = np.zeros((n_voxels, cloud.n_channels), dtype=np.asarray(cloud.features).dtype)
        np.add.at(feats, point_to_voxel, cloud.features)
        feats /= np.bincount(point_to_voxel, minlength=n_voxels)[:, None]
    else:
        raise ValueError(f"unknown feature_reduce {feature_reduce!r}")

    labels = None if cloud.labels is None else np.asarray(cloud.labels)[representative].copy()
    return SparseVoxelSet(
        coords=coords,
        features=feats,
        labels=labels,
        point_to_voxel=point_to_voxel,
        voxel_size=float(voxel_size),
    )


def project_to_points(voxel_values, vset):
    """Copy each voxel's row of values to all points it contains."""
    voxel_values = np.asarray(voxel_values)
    if voxel_values.shape[0] != vset.n_voxels:
        raise ValueError(
            f"expected {vset.n_voxels} voxel rows, got {voxel_values.shape[0]}"
        )
    return voxel_values[vset.point_to_voxel]


# -- synthetic scenes ----------------------------------------------------------

# Planes are inset half a patch-ish margin from the nominal box so that a
# jittered surface stays inside a single voxel layer at typical settings.
_MARGIN = 0.05


def _class_color(class_id):
    # Fixed, deterministic palette: classes must look the same across scenes.
    c = float(class_id)
    return np.array([(0.37 * c + 0.13) % 1.0, (0.71 * c + 0.29) % 1.0, (0.19 * c + 0.53) % 1.0])


def _sample_plane(rng, origin, u_vec, v_vec, density):
    area = np.linalg.norm(np.cross(u_vec, v_vec))
    n = max(1, int(np.ceil(area * density)))
    uv = rng.random((n, 2))
    return origin + uv[:, :1] * u_vec + uv[:, 1:] * v_vec


def _box_faces(lo, hi):
    (x0, y0, z0), (x1, y1, z1) = lo, hi
    dx, dy, dz = hi - lo
    return [
        (np.array([x0, y0, z0]), np.array([dx, 0, 0]), np.array([0, dy, 0])),  # bottom
        (np.array([x0, y0, z1]), np.array([dx, 0, 0]), np.array([0, dy, 0])),  # top
        (np.array([x0, y0, z0]), np.array([dx, 0, 0]), np.array([0, 0, dz])),  # y0 side
        (np.array([x0, y1, z0]), np.array([dx, 0, 0]), np.array([0, 0, dz])),  # y1 side
        (np.array([x0, y0, z0]), np.array([0, dy, 0]), np.array([0, 0, dz])),  # x0 side
        (np.array([x1, y0, z0]), np.array([0, dy, 0]), np.array([0, 0, dz])),  # x1 side
    ]


def generate_scene(spec):
    """Deterministically generate a labeled synthetic room.

    Floor plane is class 0, the four walls class 1, and each axis-aligned
    box gets a class in [2, K) plus a unique instance id; floor and walls
    carry instance id -1. Point colors are a per-class base color plus
    noise, so labels are predictable from features as well as geometry.
    """
    rng = np.random.default_rng(spec.seed)
    ex, ey, ez = spec.extent
    m = _MARGIN
    parts = []  # (positions, class_id, instance_id)

    floor = _sample_plane(
        rng, np.array([m, m, m]), np.array([ex - 2 * m, 0, 0]), np.array([0, ey - 2 * m, 0]), spec.density
    )
    parts.append((floor, 0, -1))

    wall_u = np.array([0, 0, ez - 2 * m])
    walls = [
        (np.array([m, m, m]), np.array([ex - 2 * m, 0, 0])),
        (np.array([m, ey - m, m]), np.array([ex - 2 * m, 0, 0])),
        (np.array([m, m, m]), np.array([0, ey - 2 * m, 0])),
        (np.array([ex - m, m, m]), np.array([0, ey - 2 * m, 0])),
    ]
    for origin, v in walls:
        parts.append((_sample_plane(rng, origin, v, wall_u, spec.density), 1, -1))

    lo_n, hi_n = spec.n_objects
    n_boxes = int(rng.integers(lo_n, hi_n + 1)) if hi_n > lo_n else int(lo_n)
    if spec.n_classes <= 2:
        n_boxes = 0  # no box classes available in [2, K)
    for b in range(n_boxes):
        hi_size = min(0.8, ex / 3, ey / 3, ez / 2)
        size = rng.uniform(min(0.3, 0.75 * hi_size), hi_size, size=3)
        lo_c = np.array([3 * m + size[0] / 2, 3 * m + size[1] / 2])
        hi_c = np.array([ex - 3 * m - size[0] / 2, ey - 3 * m - size[1] / 2])
        center_xy = rng.uniform(lo_c, np.maximum(hi_c, lo_c + 1e-6))
        lo = np.array([center_xy[0] - size[0] / 2, center_xy[1] - size[1] / 2, m])
        hi = lo + size
        cls = int(rng.integers(2, spec.n_classes))
        pts = [
            _sample_plane(rng, origin, u, v, spec.density)
            for origin, u, v in _box_faces(lo, hi)[1:]  # skip hidden bottom face
        ]
        parts.append((np.concatenate(pts, axis=0), cls, b))

    positions, labels, instances, colors = [], [], [], []
    for pts, cls, inst in parts:
        positions.append(pts)
        labels.append(np.full(len(pts), cls, dtype=np.int64))
        instances.append(np.full(len(pts), inst, dtype=np.int64))
        col = _class_color(cls) + rng.normal(0.0, 0.05, size=(len(pts), 3))
        colors.append(np.clip(col, 0.0, 1.0))

    positions = np.concatenate(positions, axis=0)
    positions = positions + rng.normal(0.0, spec.noise, size=positions.shape)
    return PointCloud(
        positions=positions.astype(np.float32),
        features=np.concatenate(colors, axis=0).astype(np.float32),
        labels=np.concatenate(labels, axis=0),
        instance_ids=np.concatenate(instances, axis=0),
    )


# -- VOLT1 scene file format -----------------------------------------------------
#
# Little-endian. Header: magic "VOLT", u32 version=1, u64 N, u32 C,
# u8 has_labels, u8 has_instances; then N records of
# (3 x f32 position, C x f32 features, optional i32 label, optional i32 instance).

_HEADER = struct.Struct("<4sIQIBB")


def _record_dtype(n_channels, has_labels, has_instances):
    fields = [("pos", "<f4", (3,)), ("feat", "<f4", (n_channels,))]
    if has_labels:
        fields.append(("label", "<i4"))
    if has_instances:
        fields.append(("inst", "<i4"))
    return np.dtype(fields)


def save_scene(cloud, path):
    has_labels = cloud.labels is not None
    has_instances = cloud.instance_ids is not None
    n, c = cloud.n_points, cloud.n_channels
    rec = np.zeros(n, dtype=_record_dtype(c, has_labels, has_instances))
    rec["pos"] = cloud.positions.astype("<f4")
    rec["feat"] = cloud.features.astype("<f4").reshape(n, c)
    if has_labels:
        rec["label"] = cloud.labels.astype("<i4")
    if has_instances:
        rec["inst"] = cloud.instance_ids.astype("<i4")
    with open(path, "wb") as f:
        f.write(_HEADER.pack(_MAGIC, _VERSION, n, c, int(has_labels), int(has_instances)))
        f.write(rec.tobytes())


def load_scene(path):
    with open(path, "rb") as f:
        header = f.read(_HEADER.size)
        if len(header) < _HEADER.size:
            raise SceneFormatError("truncated header")
        magic, version, n, c, has_labels, has_instances = _HEADER.unpack(header)
        if magic != _MAGIC:
            raise SceneFormatError(f"bad magic {magic!r}")
        if version != _VERSION:
            raise SceneFormatError(f"unsupported version {version}")
        dtype = _record_dtype(c, has_labels, has_instances)
        payload = f.read()
    if len(payload) != n * dtype.itemsize:
        raise SceneFormatError(
            f"expected {n} records ({n * dtype.itemsize} bytes), got {len(payload)} bytes"
        )
    rec = np.frombuffer(payload, dtype=dtype)
    return PointCloud(
        positions=rec["pos"].copy(),
        features=rec["feat"].reshape(n, c).copy(),
        labels=rec["label"].astype(np.int64) if has_labels else None,
        instance_ids=rec["inst"].astype(np.int64) if has_instances else None,
    )
