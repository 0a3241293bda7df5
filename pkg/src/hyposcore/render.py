"""Software RGB-D rasterizer and synthetic cluttered-scene generator.

Distance maps here are z-depth maps in meters with 0 marking "no surface";
the observed depth map and rendered distance maps share this convention, so
they can be compared directly for visibility and VSD.
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace

import numpy as np

from . import _kernels
from .geom import (
    CameraIntrinsics,
    PointCloud,
    RigidTransform,
    backproject_depth,
    normals_from_depth,
    rgb_to_hsv,
    rotation_about_axis,
    rotation_between,
    voxel_downsample,
)
from .objmodel import ObjectModel, TriangleMesh

Z_NEAR = 1e-3


@dataclass
class Observation:
    """Registered RGB-D frame with derived HSV and normal maps."""

    rgb: np.ndarray
    hsv: np.ndarray
    depth: np.ndarray
    normals: np.ndarray
    intrinsics: CameraIntrinsics

    def __post_init__(self):
        h, w = self.depth.shape
        for name in ("rgb", "hsv", "normals"):
            arr = getattr(self, name)
            if arr.shape[:2] != (h, w):
                raise ValueError(f"{name} map size mismatch")


@dataclass
class GroundTruthEntry:
    object_id: int
    pose: RigidTransform
    visible_fraction: float


@dataclass
class SceneGroundTruth:
    entries: list


@dataclass
class RenderResult:
    observation: Observation
    object_depths: list  # one (H, W) distance map per instance, isolated
    object_masks: list   # one (H, W) bool mask per instance: owns the composite pixel


def _rasterize_single(mesh: TriangleMesh, pose: RigidTransform, k: CameraIntrinsics):
    """Isolated render of one instance: (depth, rgb, normals) maps."""
    h, w = k.height, k.width
    zinv_buf = np.zeros((h, w))
    attr_buf = np.zeros((h, w, 6))
    owner = np.full((h, w), -1, dtype=np.int32)

    cam = mesh.transformed(pose)
    z = cam.vertices[:, 2]
    ok_faces = (z[cam.faces] > Z_NEAR).all(axis=1)
    faces = np.ascontiguousarray(cam.faces[ok_faces], dtype=np.int32)
    if len(faces):
        zinv = 1.0 / z
        vx = k.fx * cam.vertices[:, 0] / z + k.cx
        vy = k.fy * cam.vertices[:, 1] / z + k.cy
        attrs = np.concatenate([cam.vertex_colors_rgb, cam.vertex_normals], axis=1) * zinv[:, None]
        _kernels.raster_fill(
            np.ascontiguousarray(vx), np.ascontiguousarray(vy), np.ascontiguousarray(zinv),
            np.ascontiguousarray(attrs), faces, zinv_buf, attr_buf, owner, 0,
        )

    covered = owner >= 0
    depth = np.zeros((h, w))
    rgb = np.zeros((h, w, 3))
    normals = np.zeros((h, w, 3))
    if covered.any():
        depth[covered] = 1.0 / zinv_buf[covered]
        attrs = attr_buf[covered] * depth[covered][:, None]
        rgb[covered] = np.clip(attrs[:, :3], 0.0, 1.0)
        n = attrs[:, 3:]
        norm = np.linalg.norm(n, axis=1)
        n = n / np.where(norm > 1e-12, norm, 1.0)[:, None]
        # orient toward the camera
        pts = backproject_depth(depth, k)[covered]
        flip = np.sum(n * pts, axis=1) > 0
        n[flip] = -n[flip]
        normals[covered] = n
    return depth, rgb, normals


def rasterize(instances, k: CameraIntrinsics, light=None) -> RenderResult:
    """Render instances [(mesh, pose), ...] with a shared z-buffer.

    The composite depth is the pointwise minimum over the isolated per-object
    depth maps. `light`, if given, is a directional light vector (pointing
    from the light into the scene) for Lambertian shading with a fixed
    ambient term.
    """
    h, w = k.height, k.width
    n_obj = len(instances)
    depths = np.zeros((max(n_obj, 1), h, w))
    rgbs = np.zeros((max(n_obj, 1), h, w, 3))
    normal_maps = np.zeros((max(n_obj, 1), h, w, 3))
    for i, (mesh, pose) in enumerate(instances):
        depths[i], rgbs[i], normal_maps[i] = _rasterize_single(mesh, pose, k)

    stack = np.where(depths > 0, depths, np.inf)
    winner = np.argmin(stack, axis=0)
    any_valid = np.isfinite(stack.min(axis=0))

    ii, jj = np.meshgrid(np.arange(h), np.arange(w), indexing="ij")
    depth = np.where(any_valid, depths[winner, ii, jj], 0.0)
    rgb = np.where(any_valid[..., None], rgbs[winner, ii, jj], 0.0)
    normals = np.where(any_valid[..., None], normal_maps[winner, ii, jj], 0.0)

    if light is not None:
        l = np.asarray(light, dtype=np.float64)
        l = l / np.linalg.norm(l)
        ambient = 0.35
        lam = np.maximum(0.0, -(normals @ l))
        shade = ambient + (1.0 - ambient) * lam
        rgb = np.clip(rgb * np.where(any_valid, shade, 1.0)[..., None], 0.0, 1.0)

    obs = Observation(rgb=rgb, hsv=rgb_to_hsv(rgb), depth=depth, normals=normals, intrinsics=k)
    masks = [any_valid & (winner == i) & (depths[i] > 0) for i in range(n_obj)]
    return RenderResult(obs, [depths[i] for i in range(n_obj)], masks)


def observation_from_rgbd(rgb: np.ndarray, depth: np.ndarray, k: CameraIntrinsics) -> Observation:
    """Derive the HSV and normal maps from a registered RGB-D pair."""
    if rgb.shape[:2] != depth.shape:
        raise ValueError("rgb and depth sizes differ")
    return Observation(
        rgb=rgb,
        hsv=rgb_to_hsv(rgb),
        depth=depth,
        normals=normals_from_depth(depth, k),
        intrinsics=k,
    )


def visibility_mask(d_isolated: np.ndarray, depth_observed: np.ndarray, delta: float) -> np.ndarray:
    """Pixels where the rendered surface is visible against the observed depth.

    A rendered pixel counts as visible when the observed depth agrees within
    delta, or when the observation has no depth there (sensor holes are not
    treated as occluders).
    """
    if delta <= 0:
        raise ValueError("delta must be positive")
    if d_isolated.shape != depth_observed.shape:
        raise ValueError("map sizes differ")
    rendered = d_isolated > 0
    observed = depth_observed > 0
    return rendered & (~observed | (np.abs(d_isolated - depth_observed) < delta))


# ---------------------------------------------------------------------------
# synthetic scenes


@dataclass(frozen=True)
class SceneConfig:
    width: int = 256
    height: int = 192
    focal: float = 240.0
    min_objects: int = 1
    max_objects: int = 3
    depth_range: tuple = (0.55, 0.92)
    pixel_margin: int = 36
    upright_bias: float = 0.3
    max_tries: int = 40
    separation: float = 0.9          # bounding-sphere overlap factor
    depth_noise: float = 0.0
    color_noise: float = 0.0
    light: bool = True
    plane: bool = True
    plane_depth: float = 1.05
    plane_texture: str = "checker"   # or "noise"

    def intrinsics(self) -> CameraIntrinsics:
        return CameraIntrinsics(
            fx=self.focal, fy=self.focal, cx=self.width / 2.0, cy=self.height / 2.0,
            width=self.width, height=self.height,
        )


def make_plane_mesh(rng, config: SceneConfig) -> TriangleMesh:
    """Tilted textured ground plane behind the objects."""
    normal = np.array([0.0, -0.55, -0.835])
    normal /= np.linalg.norm(normal)
    center = np.array([0.0, 0.35, config.plane_depth])
    u = np.array([1.0, 0.0, 0.0])
    v = np.cross(normal, u)

    n_cell = 12
    extent = 1.4
    verts, colors = [], []
    base = rng.uniform(0.25, 0.75, size=3)
    for i in range(n_cell + 1):
        for j in range(n_cell + 1):
            a = (i / n_cell - 0.5) * 2 * extent
            b = (j / n_cell - 0.5) * 2 * extent
            verts.append(center + a * u + b * v)
            if config.plane_texture == "checker":
                tone = 0.55 if (i + j) % 2 == 0 else 0.3
                colors.append(np.clip(base * tone / 0.5, 0, 1))
            else:
                colors.append(np.clip(base + rng.uniform(-0.2, 0.2, size=3), 0, 1))
    faces = []
    for i in range(n_cell):
        for j in range(n_cell):
            a = i * (n_cell + 1) + j
            b = (i + 1) * (n_cell + 1) + j
            faces.append([a, b, a + 1])
            faces.append([a + 1, b, b + 1])
    verts = np.asarray(verts)
    normals = np.tile(normal, (len(verts), 1))
    return TriangleMesh(verts, np.asarray(colors), np.asarray(faces, dtype=np.int32), normals)


def _plane_depth_at(pixel_dir, config: SceneConfig) -> float:
    normal = np.array([0.0, -0.55, -0.835])
    normal /= np.linalg.norm(normal)
    center = np.array([0.0, 0.35, config.plane_depth])
    denom = pixel_dir @ normal
    if abs(denom) < 1e-9:
        return np.inf
    t = (center @ normal) / denom
    return t * pixel_dir[2] if t > 0 else np.inf


def _random_rotation(rng) -> np.ndarray:
    q = rng.normal(size=4)
    q /= np.linalg.norm(q)
    w, x, y, z = q
    return np.array(
        [
            [1 - 2 * (y * y + z * z), 2 * (x * y - z * w), 2 * (x * z + y * w)],
            [2 * (x * y + z * w), 1 - 2 * (x * x + z * z), 2 * (y * z - x * w)],
            [2 * (x * z - y * w), 2 * (y * z + x * w), 1 - 2 * (x * x + y * y)],
        ]
    )


def synthesize_scene(models: list, rng, config: SceneConfig = SceneConfig()):
    """Place a random object subset above the textured plane and render.

    models is a list of (ObjectModel, TriangleMesh). Returns
    (Observation, SceneGroundTruth). Interpenetration is rejection-sampled
    on bounding spheres; an object that cannot be placed is dropped from the
    scene (and from the ground truth).
    """
    if not models:
        raise ValueError("need at least one model")
    rng = np.random.default_rng(rng)
    k = config.intrinsics()

    count = int(rng.integers(config.min_objects, config.max_objects + 1))
    count = min(count, len(models))
    order = rng.permutation(len(models))[:count]

    plane_normal = np.array([0.0, -0.55, -0.835])
    plane_normal /= np.linalg.norm(plane_normal)

    placed = []  # (model, mesh, pose, world_center, radius)
    for mi in order:
        model, mesh = models[mi]
        centroid = model.cloud.positions.mean(axis=0)
        radius = float(np.linalg.norm(model.cloud.positions - centroid, axis=1).max())
        pose = None
        for _ in range(config.max_tries):
            u = rng.uniform(config.pixel_margin, config.width - config.pixel_margin)
            v = rng.uniform(config.pixel_margin, config.height - config.pixel_margin)
            ray = np.array([(u - k.cx) / k.fx, (v - k.cy) / k.fy, 1.0])
            z_plane = _plane_depth_at(ray, config) if config.plane else np.inf
            z_hi = min(config.depth_range[1], z_plane - radius * 1.2)
            if z_hi <= config.depth_range[0]:
                continue
            z = rng.uniform(config.depth_range[0], z_hi)
            center_world = ray * z

            if rng.random() < config.upright_bias:
                spin = rotation_about_axis(plane_normal, rng.uniform(0, 2 * np.pi))
                rot = spin @ rotation_between(np.array([0.0, 0.0, 1.0]), -plane_normal)
            else:
                rot = _random_rotation(rng)

            t = center_world - rot @ centroid
            ok = all(
                np.linalg.norm(center_world - c2) >= config.separation * (radius + r2)
                for (_, _, _, c2, r2) in placed
            )
            if ok:
                pose = RigidTransform(rot, t)
                break
        if pose is not None:
            placed.append((model, mesh, pose, pose.apply(centroid), radius))

    instances = [(mesh, pose) for (_, mesh, pose, _, _) in placed]
    plane_index = None
    if config.plane:
        instances.append((make_plane_mesh(rng, config), RigidTransform.identity()))
        plane_index = len(instances) - 1

    light = None
    if config.light:
        d = np.array([0.3, 0.8, 0.5]) + rng.uniform(-0.2, 0.2, size=3)
        light = d / np.linalg.norm(d)

    result = rasterize(instances, k, light=light)
    obs = result.observation

    entries = []
    for i, (model, _, pose, _, _) in enumerate(placed):
        footprint = int((result.object_depths[i] > 0).sum())
        visible = int(result.object_masks[i].sum())
        frac = visible / footprint if footprint else 0.0
        entries.append(GroundTruthEntry(object_id=model.object_id, pose=pose, visible_fraction=frac))

    if config.depth_noise > 0 or config.color_noise > 0:
        depth = obs.depth.copy()
        valid = depth > 0
        if config.depth_noise > 0:
            depth[valid] = np.maximum(depth[valid] + rng.normal(0, config.depth_noise, int(valid.sum())), 1e-3)
        rgb = obs.rgb
        if config.color_noise > 0:
            rgb = np.clip(rgb + rng.normal(0, config.color_noise, rgb.shape), 0.0, 1.0)
        obs = observation_from_rgbd(rgb, depth, k)

    return obs, SceneGroundTruth(entries)


def observation_to_cloud(
    obs: Observation, leaf: float, *, max_points: int | None = None, rng=None
) -> PointCloud:
    """Back-project valid pixels into a downsampled scene cloud for PPF/ICP."""
    valid = (obs.depth > 0) & (np.linalg.norm(obs.normals, axis=-1) > 0.5)
    pts = backproject_depth(obs.depth, obs.intrinsics)[valid]
    normals = obs.normals[valid]
    hsv = obs.hsv[valid]
    if len(pts) == 0:
        return PointCloud(np.zeros((0, 3)), np.zeros((0, 3)), np.zeros((0, 3)))
    cloud = voxel_downsample(PointCloud(pts, normals, hsv), leaf)
    if max_points is not None and len(cloud) > max_points:
        rng = np.random.default_rng(rng)
        keep = np.sort(rng.choice(len(cloud), size=max_points, replace=False))
        cloud = PointCloud(cloud.positions[keep], cloud.normals[keep], cloud.colors_hsv[keep])
    return cloud
