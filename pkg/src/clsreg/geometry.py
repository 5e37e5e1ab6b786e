"""Point-cloud and rigid-transform primitives.

Point clouds are plain ``(N, D)`` float arrays; row order identifies points
across calls. Quaternions are stored scalar-first ``[w, x, y, z]``.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
from scipy.spatial import cKDTree
from scipy.spatial.transform import Rotation

# Visibility threshold for direction-based culling (degrees between normal and view).
VISIBILITY_ANGLE_DEG = 95.0
# Noise / misalignment levels of the evaluation protocol. pi/4 appears twice on purpose.
NOISE_TRANSLATION_FACTORS = (0.01, 0.02, 0.03, 0.04, 0.05)
MISALIGNMENT_ANGLES = (math.pi / 4, math.pi / 8, 3 * math.pi / 16, math.pi / 4, 3 * math.pi / 8)


def as_cloud(points, dim: int | None = None) -> np.ndarray:
    """Validate and return ``points`` as a float64 ``(N, D)`` array."""
    arr = np.asarray(points, dtype=float)
    if arr.ndim == 1:
        arr = arr.reshape(1, -1)
    if arr.ndim != 2:
        raise ValueError(f"point cloud must be 2-D (N, D), got shape {arr.shape}")
    if dim is not None and arr.shape[1] != dim:
        raise ValueError(f"expected dimension {dim}, got {arr.shape[1]}")
    if not np.all(np.isfinite(arr)):
        raise ValueError("point cloud contains non-finite coordinates")
    return arr


def bbox_diagonal(points: np.ndarray) -> float:
    pts = np.asarray(points, dtype=float)
    return float(np.linalg.norm(pts.max(axis=0) - pts.min(axis=0)))


def normalize_quaternion(q) -> np.ndarray:
    q = np.asarray(q, dtype=float).reshape(4)
    n = np.linalg.norm(q)
    if not np.isfinite(n) or n == 0.0:
        raise ValueError("quaternion has zero or non-finite norm")
    return q / n


def quat_to_matrix(q) -> np.ndarray:
    return Rotation.from_quat(normalize_quaternion(q), scalar_first=True).as_matrix()


def matrix_to_quat(R) -> np.ndarray:
    q = Rotation.from_matrix(R).as_quat(scalar_first=True)
    # keep w >= 0 so serialized quaternions are canonical
    return q if q[0] >= 0 else -q


def quat_multiply(a, b) -> np.ndarray:
    """Hamilton product ``a * b`` (apply ``b`` first, then ``a``)."""
    aw, ax, ay, az = a
    bw, bx, by, bz = b
    return np.array([
        aw * bw - ax * bx - ay * by - az * bz,
        aw * bx + ax * bw + ay * bz - az * by,
        aw * by - ax * bz + ay * bw + az * bx,
        aw * bz + ax * by - ay * bx + az * bw,
    ])


def quat_from_rotvec(rotvec) -> np.ndarray:
    rotvec = np.asarray(rotvec, dtype=float)
    angle = np.linalg.norm(rotvec)
    if angle == 0.0:
        return np.array([1.0, 0.0, 0.0, 0.0])
    axis = rotvec / angle
    return np.concatenate([[math.cos(angle / 2)], math.sin(angle / 2) * axis])


def quat_angle(q) -> float:
    """Rotation angle in ``[0, pi]`` of a unit quaternion."""
    q = normalize_quaternion(q)
    return 2.0 * math.atan2(np.linalg.norm(q[1:]), abs(q[0]))


@dataclass(frozen=True)
class RigidTransform:
    """Rotation (unit quaternion, scalar first) followed by a translation."""

    rotation: np.ndarray = field(default_factory=lambda: np.array([1.0, 0.0, 0.0, 0.0]))
    translation: np.ndarray = field(default_factory=lambda: np.zeros(3))

    def __post_init__(self):
        object.__setattr__(self, "rotation", normalize_quaternion(self.rotation))
        t = np.asarray(self.translation, dtype=float).reshape(-1)
        if t.shape != (3,) or not np.all(np.isfinite(t)):
            raise ValueError("translation must be a finite 3-vector")
        object.__setattr__(self, "translation", t)

    @classmethod
    def identity(cls) -> RigidTransform:
        return cls()

    @property
    def matrix(self) -> np.ndarray:
        return quat_to_matrix(self.rotation)

    def inverse(self) -> RigidTransform:
        q_inv = self.rotation * np.array([1.0, -1.0, -1.0, -1.0])
        return RigidTransform(q_inv, -quat_to_matrix(q_inv) @ self.translation)

    def as_vector(self) -> np.ndarray:
        """The 7 parameters ``[qw, qx, qy, qz, tx, ty, tz]``."""
        return np.concatenate([self.rotation, self.translation])

    @classmethod
    def from_vector(cls, v) -> RigidTransform:
        v = np.asarray(v, dtype=float)
        return cls(v[:4], v[4:7])

    def to_json(self) -> dict:
        return {"position": self.translation.tolist(), "orientation": self.rotation.tolist()}

    @classmethod
    def from_json(cls, d: dict) -> RigidTransform:
        return cls(d["orientation"], d["position"])


def compose(second: RigidTransform, first: RigidTransform) -> RigidTransform:
    """Transform equivalent to applying ``first`` and then ``second``."""
    q = quat_multiply(second.rotation, first.rotation)
    t = second.matrix @ first.translation + second.translation
    return RigidTransform(q, t)


@dataclass(frozen=True)
class Pose:
    position: np.ndarray
    orientation: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, "position", np.asarray(self.position, dtype=float).reshape(3))
        object.__setattr__(self, "orientation", normalize_quaternion(self.orientation))

    def to_json(self) -> dict:
        return {"position": self.position.tolist(), "orientation": self.orientation.tolist()}

    @classmethod
    def from_json(cls, d: dict) -> Pose:
        return cls(d["position"], d["orientation"])


def apply_rigid(cloud, t: RigidTransform) -> np.ndarray:
    pts = as_cloud(cloud, 3)
    return pts @ t.matrix.T + t.translation


def voxel_downsample(cloud, leaf: float) -> np.ndarray:
    """Replace the points of every occupied voxel by their centroid.

    Output rows are ordered by voxel index (lexicographic), which keeps the
    result deterministic for a given input.
    """
    if not leaf > 0:
        raise ValueError(f"voxel leaf must be positive, got {leaf}")
    pts = as_cloud(cloud)
    if len(pts) == 0:
        return pts.copy()
    keys = np.floor(pts / leaf).astype(np.int64)
    _, inverse, counts = np.unique(keys, axis=0, return_inverse=True, return_counts=True)
    inverse = inverse.reshape(-1)
    sums = np.zeros((len(counts), pts.shape[1]))
    np.add.at(sums, inverse, pts)
    return sums / counts[:, None]


def chamfer_error(deformed, truth) -> float:
    """Mean over ``truth`` points of the squared distance to the nearest ``deformed`` point."""
    d = as_cloud(deformed)
    o = as_cloud(truth)
    if len(d) == 0 or len(o) == 0:
        raise ValueError("chamfer_error needs non-empty clouds")
    if d.shape[1] != o.shape[1]:
        raise ValueError("dimension mismatch")
    dist, _ = cKDTree(d).query(o)
    return float(np.mean(dist**2))


def nearest_distances(source, target) -> np.ndarray:
    """Distance from each ``source`` point to its nearest ``target`` point."""
    dist, _ = cKDTree(as_cloud(target)).query(as_cloud(source))
    return dist


def add_noise(cloud, factor: float, seed) -> np.ndarray:
    if factor < 0:
        raise ValueError("noise factor must be non-negative")
    pts = as_cloud(cloud)
    if factor == 0:
        return pts.copy()
    rng = np.random.default_rng(seed)
    return pts + factor * rng.standard_normal(pts.shape)


def random_unit_vector(rng: np.random.Generator, dim: int = 3) -> np.ndarray:
    while True:
        v = rng.standard_normal(dim)
        n = np.linalg.norm(v)
        if n > 1e-12:
            return v / n


def sample_misalignment(translation_factor: float, angle: float, seed) -> RigidTransform:
    """Random rigid offset: translation of norm ``translation_factor`` and a
    rotation of ``angle`` radians about a uniformly drawn axis."""
    rng = np.random.default_rng(seed)
    direction = random_unit_vector(rng)
    axis = random_unit_vector(rng)
    return RigidTransform(quat_from_rotvec(angle * axis), translation_factor * direction)


def estimate_normals(cloud, k: int = 12) -> np.ndarray:
    """Local PCA normals oriented away from the cloud centroid.

    Rows whose orientation is ambiguous (normal perpendicular to the centroid
    offset, e.g. planar clouds) are returned as zero vectors.
    """
    pts = as_cloud(cloud, 3)
    k = min(k, len(pts))
    _, idx = cKDTree(pts).query(pts, k=k)
    idx = idx.reshape(len(pts), -1)
    nbrs = pts[idx] - pts[idx].mean(axis=1, keepdims=True)
    cov = np.einsum("nki,nkj->nij", nbrs, nbrs)
    _, vecs = np.linalg.eigh(cov)
    normals = vecs[:, :, 0]
    outward = pts - pts.mean(axis=0)
    s = np.einsum("ij,ij->i", normals, outward)
    scale = np.linalg.norm(outward, axis=1)
    ambiguous = np.abs(s) <= 1e-9 * np.maximum(scale, 1e-12)
    normals = np.where((s < 0)[:, None], -normals, normals)
    normals[ambiguous] = 0.0
    return normals


def visible_mask(cloud, view_direction, k: int = 12) -> np.ndarray:
    v = np.asarray(view_direction, dtype=float).reshape(3)
    n = np.linalg.norm(v)
    if n == 0:
        raise ValueError("view direction must be non-zero")
    v = v / n
    normals = estimate_normals(cloud, k)
    cos_limit = math.cos(math.radians(VISIBILITY_ANGLE_DEG))
    ambiguous = ~np.any(normals, axis=1)
    return ambiguous | (normals @ v >= cos_limit)


def partial_view(cloud, view_direction, k: int = 12) -> np.ndarray:
    """Points whose outward normal faces the viewer located along ``view_direction``."""
    pts = as_cloud(cloud, 3)
    mask = visible_mask(pts, view_direction, k)
    if not mask.any():
        raise ValueError("partial view is empty: every point was culled")
    return pts[mask]
