"""Rigid-body transforms, pinhole projection, color conversion, and depth-map geometry.

Conventions used throughout the package:

* camera frame: +x right, +y down, +z forward (points in front of the camera
  have positive z)
* rotations are stored as 3x3 matrices; quaternions appear only in file
  formats and pose averaging
* hue lives in [0, 1) and is treated as circular wherever arithmetic is done
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

ROTATION_TOL = 1e-6
NORMAL_TOL = 1e-5


# ---------------------------------------------------------------------------
# rigid transforms


@dataclass(frozen=True)
class RigidTransform:
    """Proper rigid motion: x -> rotation @ x + translation (meters)."""

    rotation: np.ndarray
    translation: np.ndarray

    def __post_init__(self):
        r = np.array(self.rotation, dtype=np.float64)
        t = np.array(self.translation, dtype=np.float64).reshape(3)
        if r.shape != (3, 3):
            raise ValueError(f"rotation must be 3x3, got {r.shape}")
        if abs(np.linalg.det(r) - 1.0) > ROTATION_TOL or np.abs(r @ r.T - np.eye(3)).max() > ROTATION_TOL:
            raise ValueError("rotation is not orthonormal with determinant +1")
        object.__setattr__(self, "rotation", r)
        object.__setattr__(self, "translation", t)

    @staticmethod
    def identity() -> "RigidTransform":
        return RigidTransform(np.eye(3), np.zeros(3))

    def apply(self, points: np.ndarray) -> np.ndarray:
        """Transform one (3,) point or an (N, 3) array of points."""
        p = np.asarray(points, dtype=np.float64)
        return p @ self.rotation.T + self.translation

    def apply_to_directions(self, vectors: np.ndarray) -> np.ndarray:
        """Rotate direction vectors (no translation)."""
        return np.asarray(vectors, dtype=np.float64) @ self.rotation.T

    def inverse(self) -> "RigidTransform":
        rt = self.rotation.T
        return RigidTransform(rt, -rt @ self.translation)

    def as_matrix(self) -> np.ndarray:
        m = np.eye(4)
        m[:3, :3] = self.rotation
        m[:3, 3] = self.translation
        return m


def compose(a: RigidTransform, b: RigidTransform) -> RigidTransform:
    """Composite transform applying b first, then a."""
    return RigidTransform(a.rotation @ b.rotation, a.rotation @ b.translation + a.translation)


def rotation_about_axis(axis, angle: float) -> np.ndarray:
    """Rodrigues rotation matrix for a unit axis and an angle in radians."""
    axis = np.asarray(axis, dtype=np.float64)
    n = np.linalg.norm(axis)
    if n == 0.0:
        raise ValueError("axis must be nonzero")
    x, y, z = axis / n
    c, s = np.cos(angle), np.sin(angle)
    cc = 1.0 - c
    return np.array(
        [
            [c + x * x * cc, x * y * cc - z * s, x * z * cc + y * s],
            [y * x * cc + z * s, c + y * y * cc, y * z * cc - x * s],
            [z * x * cc - y * s, z * y * cc + x * s, c + z * z * cc],
        ]
    )


def rotation_between(a, b) -> np.ndarray:
    """Smallest rotation taking unit vector a onto unit vector b."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    a = a / np.linalg.norm(a)
    b = b / np.linalg.norm(b)
    v = np.cross(a, b)
    c = float(np.dot(a, b))
    if c < -1.0 + 1e-12:
        # antipodal: rotate pi about any axis orthogonal to a
        helper = np.array([1.0, 0.0, 0.0]) if abs(a[0]) < 0.9 else np.array([0.0, 1.0, 0.0])
        axis = np.cross(a, helper)
        return rotation_about_axis(axis, np.pi)
    vx = np.array([[0, -v[2], v[1]], [v[2], 0, -v[0]], [-v[1], v[0], 0]])
    return np.eye(3) + vx + vx @ vx / (1.0 + c)


def rotation_geodesic(a: np.ndarray, b: np.ndarray) -> float:
    """Geodesic angle between two rotation matrices, in [0, pi] radians."""
    cos_angle = (np.trace(a.T @ b) - 1.0) / 2.0
    return float(np.arccos(np.clip(cos_angle, -1.0, 1.0)))


def quat_from_matrix(r: np.ndarray) -> np.ndarray:
    """Unit quaternion (w, x, y, z) for a rotation matrix."""
    t = np.trace(r)
    if t > 0:
        s = np.sqrt(t + 1.0) * 2.0
        q = np.array([0.25 * s, (r[2, 1] - r[1, 2]) / s, (r[0, 2] - r[2, 0]) / s, (r[1, 0] - r[0, 1]) / s])
    elif r[0, 0] > r[1, 1] and r[0, 0] > r[2, 2]:
        s = np.sqrt(1.0 + r[0, 0] - r[1, 1] - r[2, 2]) * 2.0
        q = np.array([(r[2, 1] - r[1, 2]) / s, 0.25 * s, (r[0, 1] + r[1, 0]) / s, (r[0, 2] + r[2, 0]) / s])
    elif r[1, 1] > r[2, 2]:
        s = np.sqrt(1.0 + r[1, 1] - r[0, 0] - r[2, 2]) * 2.0
        q = np.array([(r[0, 2] - r[2, 0]) / s, (r[0, 1] + r[1, 0]) / s, 0.25 * s, (r[1, 2] + r[2, 1]) / s])
    else:
        s = np.sqrt(1.0 + r[2, 2] - r[0, 0] - r[1, 1]) * 2.0
        q = np.array([(r[1, 0] - r[0, 1]) / s, (r[0, 2] + r[2, 0]) / s, (r[1, 2] + r[2, 1]) / s, 0.25 * s])
    return q / np.linalg.norm(q)


def matrix_from_quat(q: np.ndarray) -> np.ndarray:
    w, x, y, z = np.asarray(q, dtype=np.float64) / np.linalg.norm(q)
    return np.array(
        [
            [1 - 2 * (y * y + z * z), 2 * (x * y - z * w), 2 * (x * z + y * w)],
            [2 * (x * y + z * w), 1 - 2 * (x * x + z * z), 2 * (y * z - x * w)],
            [2 * (x * z - y * w), 2 * (y * z + x * w), 1 - 2 * (x * x + y * y)],
        ]
    )


# ---------------------------------------------------------------------------
# camera


@dataclass(frozen=True)
class CameraIntrinsics:
    fx: float
    fy: float
    cx: float
    cy: float
    width: int
    height: int

    def __post_init__(self):
        if self.fx <= 0 or self.fy <= 0:
            raise ValueError("focal lengths must be positive")
        if not (0 <= self.cx < self.width and 0 <= self.cy < self.height):
            raise ValueError("principal point must lie inside the image")

    def project(self, points_cam: np.ndarray):
        """Pinhole projection of camera-frame points.

        Returns (uv, z, valid) where valid marks points strictly in front of
        the camera; uv for invalid points is unreliable and must be filtered
        by the caller.
        """
        p = np.atleast_2d(np.asarray(points_cam, dtype=np.float64))
        z = p[:, 2]
        valid = z > 0
        with np.errstate(divide="ignore", invalid="ignore"):
            u = self.fx * p[:, 0] / z + self.cx
            v = self.fy * p[:, 1] / z + self.cy
        return np.stack([u, v], axis=1), z, valid

    def backproject(self, u, v, z) -> np.ndarray:
        """Camera-frame 3D points from pixel coordinates and depth."""
        u = np.asarray(u, dtype=np.float64)
        v = np.asarray(v, dtype=np.float64)
        z = np.asarray(z, dtype=np.float64)
        return np.stack([(u - self.cx) / self.fx * z, (v - self.cy) / self.fy * z, z], axis=-1)


def transform_and_project(t: RigidTransform, k: CameraIntrinsics, point):
    """Project a single 3D point through a pose. Returns (u, v, z, valid)."""
    p = t.apply(np.asarray(point, dtype=np.float64).reshape(3))
    uv, z, valid = k.project(p[None, :])
    return float(uv[0, 0]), float(uv[0, 1]), float(z[0]), bool(valid[0])


# ---------------------------------------------------------------------------
# color


def rgb_to_hsv(rgb: np.ndarray) -> np.ndarray:
    """Hexcone RGB -> HSV with all channels in [0, 1] and hue in [0, 1).

    Accepts a single (3,) color or any (..., 3) array.
    """
    c = np.asarray(rgb, dtype=np.float64)
    r, g, b = c[..., 0], c[..., 1], c[..., 2]
    maxc = np.maximum(np.maximum(r, g), b)
    minc = np.minimum(np.minimum(r, g), b)
    delta = maxc - minc
    sat = np.where(maxc > 0, delta / np.where(maxc > 0, maxc, 1.0), 0.0)

    with np.errstate(divide="ignore", invalid="ignore"):
        safe = np.where(delta > 0, delta, 1.0)
        hr = ((g - b) / safe) % 6.0
        hg = (b - r) / safe + 2.0
        hb = (r - g) / safe + 4.0
    hue = np.where(maxc == r, hr, np.where(maxc == g, hg, hb)) / 6.0
    hue = np.where(delta > 0, hue % 1.0, 0.0)
    return np.stack([hue, sat, maxc], axis=-1)


def hsv_to_rgb(hsv: np.ndarray) -> np.ndarray:
    """Inverse hexcone conversion; accepts any (..., 3) array."""
    c = np.asarray(hsv, dtype=np.float64)
    h, s, v = c[..., 0] % 1.0, c[..., 1], c[..., 2]
    i = np.floor(h * 6.0).astype(np.int64) % 6
    f = h * 6.0 - np.floor(h * 6.0)
    p = v * (1.0 - s)
    q = v * (1.0 - s * f)
    t = v * (1.0 - s * (1.0 - f))
    choices = np.stack(
        [np.stack([v, t, p], -1), np.stack([q, v, p], -1), np.stack([p, v, t], -1),
         np.stack([p, q, v], -1), np.stack([t, p, v], -1), np.stack([v, p, q], -1)],
        axis=0,
    )
    return np.take_along_axis(choices, i[None, ..., None], axis=0)[0]


def hue_difference(h_a, h_b):
    """Signed circular hue difference h_a - h_b wrapped into [-0.5, 0.5)."""
    return (np.asarray(h_a) - np.asarray(h_b) + 0.5) % 1.0 - 0.5


# ---------------------------------------------------------------------------
# depth-map geometry


def backproject_depth(depth: np.ndarray, k: CameraIntrinsics) -> np.ndarray:
    """Per-pixel camera-frame 3D points; rows with depth 0 give z = 0.

    Pixel (r, c) samples the scene at continuous image coordinates
    (c + 0.5, r + 0.5), the pixel center.
    """
    h, w = depth.shape
    u = np.arange(w, dtype=np.float64)[None, :] + 0.5
    v = np.arange(h, dtype=np.float64)[:, None] + 0.5
    x = (u - k.cx) / k.fx * depth
    y = (v - k.cy) / k.fy * depth
    return np.stack([x, y, depth], axis=-1)


def normals_from_depth(depth: np.ndarray, k: CameraIntrinsics) -> np.ndarray:
    """Camera-facing unit normals from a depth map.

    Central differences on the back-projected point map (3x3 cross support);
    a pixel is invalid (zero normal) at the border, where its own depth is
    missing, or where any of its four cross neighbors is missing.
    """
    pts = backproject_depth(depth, k)
    h, w = depth.shape
    normals = np.zeros((h, w, 3))
    if h < 3 or w < 3:
        return normals

    du = pts[1:-1, 2:] - pts[1:-1, :-2]
    dv = pts[2:, 1:-1] - pts[:-2, 1:-1]
    n = np.cross(du, dv)
    norm = np.linalg.norm(n, axis=-1)
    ok = (
        (depth[1:-1, 1:-1] > 0)
        & (depth[1:-1, 2:] > 0)
        & (depth[1:-1, :-2] > 0)
        & (depth[2:, 1:-1] > 0)
        & (depth[:-2, 1:-1] > 0)
        & (norm > 1e-12)
    )
    n = np.where(ok[..., None], n / np.where(norm > 1e-12, norm, 1.0)[..., None], 0.0)

    # orient toward the camera: n . ray <= 0
    flip = np.sum(n * pts[1:-1, 1:-1], axis=-1) > 0
    n[flip] = -n[flip]
    normals[1:-1, 1:-1] = n
    return normals


# ---------------------------------------------------------------------------
# point clouds


@dataclass
class PointCloud:
    """Colored, oriented point cloud. HSV colors, unit normals."""

    positions: np.ndarray
    normals: np.ndarray
    colors_hsv: np.ndarray

    def __post_init__(self):
        self.positions = np.asarray(self.positions, dtype=np.float64).reshape(-1, 3)
        self.normals = np.asarray(self.normals, dtype=np.float64).reshape(-1, 3)
        self.colors_hsv = np.asarray(self.colors_hsv, dtype=np.float64).reshape(-1, 3)
        n = len(self.positions)
        if len(self.normals) != n or len(self.colors_hsv) != n:
            raise ValueError("positions, normals, and colors must share length")
        if n:
            err = np.abs(np.linalg.norm(self.normals, axis=1) - 1.0).max()
            if err > NORMAL_TOL:
                raise ValueError(f"normals must be unit length (worst error {err:.2e})")

    def __len__(self) -> int:
        return len(self.positions)

    def transformed(self, t: RigidTransform) -> "PointCloud":
        return PointCloud(t.apply(self.positions), t.apply_to_directions(self.normals), self.colors_hsv.copy())


def voxel_downsample(cloud: PointCloud, leaf: float) -> PointCloud:
    """Merge points within each occupied voxel of edge length `leaf`.

    The merged point is the voxel centroid; normals are averaged and
    renormalized; saturation/value are averaged and hue uses the circular
    mean. Output is ordered by lexicographic voxel key, so the result is
    deterministic regardless of input order.
    """
    if leaf <= 0:
        raise ValueError("leaf must be positive")
    n = len(cloud)
    if n == 0:
        return cloud

    keys = np.floor(cloud.positions / leaf).astype(np.int64)
    uniq, inverse = np.unique(keys, axis=0, return_inverse=True)
    inverse = inverse.reshape(-1)
    m = len(uniq)
    counts = np.bincount(inverse, minlength=m).astype(np.float64)

    def mean_per_voxel(values):
        out = np.zeros((m, values.shape[1]))
        np.add.at(out, inverse, values)
        return out / counts[:, None]

    positions = mean_per_voxel(cloud.positions)

    # first (lowest input index) member of each voxel, used for degenerate fallbacks
    _, first_member = np.unique(inverse, return_index=True)

    normals = mean_per_voxel(cloud.normals)
    nn = np.linalg.norm(normals, axis=1)
    degenerate = nn < 1e-9
    normals[degenerate] = cloud.normals[first_member[degenerate]]
    nn = np.linalg.norm(normals, axis=1)
    normals /= nn[:, None]

    hue = cloud.colors_hsv[:, 0] * 2.0 * np.pi
    hvec = np.stack([np.cos(hue), np.sin(hue)], axis=1)
    hm = mean_per_voxel(hvec)
    mean_hue = (np.arctan2(hm[:, 1], hm[:, 0]) / (2.0 * np.pi)) % 1.0
    flat = np.linalg.norm(hm, axis=1) < 1e-9
    mean_hue[flat] = cloud.colors_hsv[first_member[flat], 0]
    sv = mean_per_voxel(cloud.colors_hsv[:, 1:])
    colors = np.column_stack([mean_hue, sv])

    return PointCloud(positions, normals, colors)
