"""Mesh loading, surface sampling, and prepared object models.

Meshes come in as PLY (ascii or binary little-endian) or OBJ with per-vertex
colors. A prepared model is a voxel-downsampled, size-capped, colored and
oriented point cloud with its diameter and discretized symmetry set.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .geom import PointCloud, RigidTransform, rgb_to_hsv, rotation_about_axis, voxel_downsample

VOXEL_LEAF = 0.007
MAX_MODEL_POINTS = 2000
DEFAULT_AXIS_SAMPLES = 64
DEFAULT_GRAY = 0.5


class MeshParseError(ValueError):
    """Raised for malformed PLY/OBJ input; message carries line or byte offset."""


@dataclass
class TriangleMesh:
    vertices: np.ndarray
    vertex_colors_rgb: np.ndarray
    faces: np.ndarray
    vertex_normals: np.ndarray

    def __post_init__(self):
        self.vertices = np.asarray(self.vertices, dtype=np.float64).reshape(-1, 3)
        self.vertex_colors_rgb = np.asarray(self.vertex_colors_rgb, dtype=np.float64).reshape(-1, 3)
        self.faces = np.asarray(self.faces, dtype=np.int32).reshape(-1, 3)
        self.vertex_normals = np.asarray(self.vertex_normals, dtype=np.float64).reshape(-1, 3)
        if len(self.faces) and (self.faces.min() < 0 or self.faces.max() >= len(self.vertices)):
            raise MeshParseError("face index out of range")

    def face_areas(self) -> np.ndarray:
        v = self.vertices
        f = self.faces
        cross = np.cross(v[f[:, 1]] - v[f[:, 0]], v[f[:, 2]] - v[f[:, 0]])
        return 0.5 * np.linalg.norm(cross, axis=1)

    def scaled(self, factor: float) -> "TriangleMesh":
        return TriangleMesh(self.vertices * factor, self.vertex_colors_rgb, self.faces, self.vertex_normals)

    def transformed(self, t: RigidTransform) -> "TriangleMesh":
        return TriangleMesh(
            t.apply(self.vertices), self.vertex_colors_rgb, self.faces, t.apply_to_directions(self.vertex_normals)
        )


@dataclass(frozen=True)
class SymmetrySpec:
    """Discretization recipe for an object's symmetry transform set.

    kind is one of 'none', 'discrete' (cyclic group of the given order about
    axis), or 'axis' (continuous symmetry, sampled at `order` rotations).
    """

    kind: str = "none"
    axis: tuple = (0.0, 0.0, 1.0)
    order: int = 1

    def __post_init__(self):
        if self.kind not in ("none", "discrete", "axis"):
            raise ValueError(f"unknown symmetry kind {self.kind!r}")
        if self.kind != "none":
            a = np.asarray(self.axis, dtype=np.float64)
            if abs(np.linalg.norm(a) - 1.0) > 1e-6:
                raise ValueError("symmetry axis must be unit length")
            if self.order < 2:
                raise ValueError("symmetry order / sample count must be >= 2")


@dataclass
class ObjectModel:
    """Prepared object: sampled cloud, diameter, and discretized symmetries."""

    cloud: PointCloud
    diameter: float
    symmetry: list
    is_symmetric: bool
    object_id: int = 0

    def __post_init__(self):
        if len(self.cloud) == 0:
            raise ValueError("object model cloud must be nonempty")
        if self.diameter <= 0:
            raise ValueError("diameter must be positive")
        if len(self.cloud) > MAX_MODEL_POINTS:
            raise ValueError(f"model cloud exceeds {MAX_MODEL_POINTS} points")


# ---------------------------------------------------------------------------
# PLY


_PLY_SCALAR = {
    "char": "i1",
    "int8": "i1",
    "uchar": "u1",
    "uint8": "u1",
    "short": "i2",
    "int16": "i2",
    "ushort": "u2",
    "uint16": "u2",
    "int": "i4",
    "int32": "i4",
    "uint": "u4",
    "uint32": "u4",
    "float": "f4",
    "float32": "f4",
    "double": "f8",
    "float64": "f8",
}


def _parse_ply(data: bytes) -> TriangleMesh:
    if not data.startswith(b"ply"):
        raise MeshParseError("not a PLY file (missing 'ply' magic at byte offset 0)")
    header_end = data.find(b"end_header")
    if header_end < 0:
        raise MeshParseError("PLY header missing end_header")
    nl = data.find(b"\n", header_end)
    if nl < 0:
        raise MeshParseError(f"truncated PLY header at byte offset {len(data)}")
    body_offset = nl + 1

    fmt = None
    elements = []  # (name, count, [(prop_name, type, list_count_type|None)])
    for lineno, raw in enumerate(data[:header_end].decode("ascii", "replace").splitlines(), start=1):
        tokens = raw.strip().split()
        if not tokens or tokens[0] in ("ply", "comment", "obj_info"):
            continue
        if tokens[0] == "format":
            if tokens[1] not in ("ascii", "binary_little_endian"):
                raise MeshParseError(f"unsupported PLY format {tokens[1]!r} at line {lineno}")
            fmt = tokens[1]
        elif tokens[0] == "element":
            elements.append((tokens[1], int(tokens[2]), []))
        elif tokens[0] == "property":
            if not elements:
                raise MeshParseError(f"property before element at line {lineno}")
            if tokens[1] == "list":
                elements[-1][2].append((tokens[4], tokens[3], tokens[2]))
            else:
                elements[-1][2].append((tokens[2], tokens[1], None))
        else:
            raise MeshParseError(f"unexpected PLY header token {tokens[0]!r} at line {lineno}")
    if fmt is None:
        raise MeshParseError("PLY header missing format line")

    parsed = {}
    if fmt == "ascii":
        lines = data[body_offset:].decode("ascii", "replace").splitlines()
        cursor = 0
        for name, count, props in elements:
            rows = []
            for i in range(count):
                if cursor >= len(lines):
                    raise MeshParseError(f"PLY data ended early in element {name!r} at line {cursor + 1}")
                fields = lines[cursor].split()
                cursor += 1
                rows.append(fields)
            parsed[name] = (rows, props)
    else:
        offset = body_offset
        for name, count, props in elements:
            if any(p[2] is not None for p in props):
                # list property: sizes vary per row, walk rows
                rows = []
                for _ in range(count):
                    row = []
                    for pname, ptype, ltype in props:
                        if ltype is not None:
                            csize = np.dtype(_PLY_SCALAR[ltype]).itemsize
                            if offset + csize > len(data):
                                raise MeshParseError(f"truncated PLY at byte offset {offset}")
                            n = int(np.frombuffer(data, "<" + _PLY_SCALAR[ltype], 1, offset)[0])
                            offset += csize
                            isize = np.dtype(_PLY_SCALAR[ptype]).itemsize
                            if offset + n * isize > len(data):
                                raise MeshParseError(f"truncated PLY at byte offset {offset}")
                            row.append(np.frombuffer(data, "<" + _PLY_SCALAR[ptype], n, offset).tolist())
                            offset += n * isize
                        else:
                            isize = np.dtype(_PLY_SCALAR[ptype]).itemsize
                            if offset + isize > len(data):
                                raise MeshParseError(f"truncated PLY at byte offset {offset}")
                            row.append(np.frombuffer(data, "<" + _PLY_SCALAR[ptype], 1, offset)[0])
                            offset += isize
                    rows.append(row)
                parsed[name] = (rows, props)
            else:
                dtype = np.dtype([(p[0], "<" + _PLY_SCALAR[p[1]]) for p in props])
                need = dtype.itemsize * count
                if offset + need > len(data):
                    raise MeshParseError(
                        f"truncated PLY: element {name!r} needs {need} bytes at byte offset {offset}"
                    )
                arr = np.frombuffer(data, dtype, count, offset)
                offset += need
                parsed[name] = (arr, props)

    if "vertex" not in parsed:
        raise MeshParseError("PLY has no vertex element")
    if "face" not in parsed:
        raise MeshParseError("PLY has no face element")

    vrows, vprops = parsed["vertex"]
    pnames = [p[0] for p in vprops]
    for required in ("x", "y", "z"):
        if required not in pnames:
            raise MeshParseError(f"vertex element missing property {required!r}")

    def column(name):
        idx = pnames.index(name)
        if isinstance(vrows, np.ndarray):
            return vrows[name].astype(np.float64)
        try:
            return np.array([float(r[idx]) for r in vrows], dtype=np.float64)
        except (ValueError, IndexError) as e:
            raise MeshParseError(f"bad vertex value: {e}") from e

    verts = np.stack([column("x"), column("y"), column("z")], axis=1)

    if all(c in pnames for c in ("red", "green", "blue")):
        colors = np.stack([column("red"), column("green"), column("blue")], axis=1) / 255.0
    else:
        colors = np.full((len(verts), 3), DEFAULT_GRAY)

    normals = None
    if all(c in pnames for c in ("nx", "ny", "nz")):
        normals = np.stack([column("nx"), column("ny"), column("nz")], axis=1)

    frows, fprops = parsed["face"]
    faces = []
    if isinstance(frows, np.ndarray):
        raise MeshParseError("face element must use a list property")
    list_pos = [i for i, p in enumerate(fprops) if p[2] is not None]
    if not list_pos:
        raise MeshParseError("face element must carry a vertex index list")
    li = list_pos[0]
    for row in frows:
        if isinstance(row[li], list):
            idx = row[li]
        else:
            # ascii rows: first token is the count
            n = int(row[0])
            idx = [int(t) for t in row[1 : 1 + n]]
        if len(idx) != 3:
            raise MeshParseError(f"only triangle faces are supported, got {len(idx)} indices")
        faces.append(idx)
    faces = np.asarray(faces, dtype=np.int32).reshape(-1, 3)

    return _finalize_mesh(verts, colors, faces, normals)


# ---------------------------------------------------------------------------
# OBJ


def _parse_obj(data: bytes) -> TriangleMesh:
    verts, colors, vnormals, faces, face_normal_idx = [], [], [], [], []
    has_color = False
    for lineno, raw in enumerate(data.decode("utf-8", "replace").splitlines(), start=1):
        line = raw.strip()
        if not line or line.startswith("#"):
            continue
        tokens = line.split()
        tag = tokens[0]
        if tag == "v":
            if len(tokens) not in (4, 7):
                raise MeshParseError(f"bad vertex at line {lineno}: expected 'v x y z [r g b]'")
            try:
                vals = [float(t) for t in tokens[1:]]
            except ValueError as e:
                raise MeshParseError(f"bad vertex number at line {lineno}: {e}") from e
            verts.append(vals[:3])
            if len(vals) == 6:
                colors.append(vals[3:])
                has_color = True
            else:
                colors.append([DEFAULT_GRAY] * 3)
        elif tag == "vn":
            try:
                vnormals.append([float(t) for t in tokens[1:4]])
            except ValueError as e:
                raise MeshParseError(f"bad normal at line {lineno}: {e}") from e
        elif tag == "f":
            refs = tokens[1:]
            if len(refs) != 3:
                raise MeshParseError(f"only triangle faces are supported at line {lineno}")
            vi, ni = [], []
            for ref in refs:
                parts = ref.split("/")
                try:
                    v = int(parts[0])
                except ValueError as e:
                    raise MeshParseError(f"bad face index at line {lineno}") from e
                if v < 0:
                    raise MeshParseError(f"negative face indices not supported at line {lineno}")
                vi.append(v - 1)
                if len(parts) == 3 and parts[2]:
                    ni.append(int(parts[2]) - 1)
            faces.append(vi)
            face_normal_idx.append(ni if len(ni) == 3 else None)
        # vt, mtllib, usemtl, o, g, s are ignored

    if not verts:
        raise MeshParseError("OBJ has no vertices")
    verts = np.asarray(verts, dtype=np.float64)
    colors = np.asarray(colors, dtype=np.float64) if has_color else np.full((len(verts), 3), DEFAULT_GRAY)
    faces = np.asarray(faces, dtype=np.int32).reshape(-1, 3)

    normals = None
    if vnormals and all(n is not None for n in face_normal_idx) and len(faces):
        vn = np.asarray(vnormals, dtype=np.float64)
        acc = np.zeros_like(verts)
        for f, ni in zip(faces, face_normal_idx):
            acc[f] += vn[ni]
        lens = np.linalg.norm(acc, axis=1)
        if (lens > 1e-12).all():
            normals = acc / lens[:, None]

    return _finalize_mesh(verts, colors, faces, normals)


def _finalize_mesh(verts, colors, faces, normals) -> TriangleMesh:
    """Drop degenerate faces and synthesize area-weighted normals if needed."""
    if faces.size and (faces.min() < 0 or faces.max() >= len(verts)):
        raise MeshParseError("face index out of range")
    cross = np.cross(verts[faces[:, 1]] - verts[faces[:, 0]], verts[faces[:, 2]] - verts[faces[:, 0]])
    area2 = np.linalg.norm(cross, axis=1)
    scale = max(np.abs(verts).max(), 1.0) if len(verts) else 1.0
    keep = area2 > 1e-12 * scale * scale
    faces = faces[keep]
    cross = cross[keep]
    if len(faces) == 0:
        raise MeshParseError("mesh has no non-degenerate faces")

    if normals is None:
        acc = np.zeros_like(verts)
        for k in range(3):
            np.add.at(acc, faces[:, k], cross)  # cross norm = 2*area, so this is area weighting
        lens = np.linalg.norm(acc, axis=1)
        normals = np.where(lens[:, None] > 1e-12, acc / np.where(lens > 1e-12, lens, 1.0)[:, None], [0.0, 0.0, 1.0])
    else:
        lens = np.linalg.norm(normals, axis=1)
        if (lens < 1e-12).any():
            raise MeshParseError("zero-length vertex normal")
        normals = normals / lens[:, None]
    return TriangleMesh(verts, np.clip(colors, 0.0, 1.0), faces, normals)


def load_mesh(data: bytes, format: str) -> TriangleMesh:
    """Parse mesh bytes. format is 'PLY' or 'OBJ' (case-insensitive)."""
    fmt = format.upper()
    if fmt == "PLY":
        return _parse_ply(data)
    if fmt == "OBJ":
        return _parse_obj(data)
    raise ValueError(f"unsupported mesh format {format!r}")


def load_mesh_file(path) -> TriangleMesh:
    path = Path(path)
    return load_mesh(path.read_bytes(), path.suffix.lstrip(".").upper())


# ---------------------------------------------------------------------------
# sampling and preparation


def sample_surface(mesh: TriangleMesh, n: int, rng) -> PointCloud:
    """Sample n points uniformly by area with barycentric interpolation."""
    if n < 1:
        raise ValueError("need at least one sample")
    rng = np.random.default_rng(rng)
    areas = mesh.face_areas()
    total = areas.sum()
    if total <= 0:
        raise ValueError("mesh has zero surface area")
    chosen = rng.choice(len(areas), size=n, p=areas / total)

    r1 = rng.random(n)
    r2 = rng.random(n)
    s = np.sqrt(r1)
    w0 = 1.0 - s
    w1 = s * (1.0 - r2)
    w2 = s * r2

    f = mesh.faces[chosen]
    weights = np.stack([w0, w1, w2], axis=1)[..., None]
    positions = (mesh.vertices[f] * weights).sum(axis=1)

    normals = (mesh.vertex_normals[f] * weights).sum(axis=1)
    lens = np.linalg.norm(normals, axis=1)
    bad = lens < 1e-9
    if bad.any():
        v = mesh.vertices
        fc = np.cross(v[f[bad, 1]] - v[f[bad, 0]], v[f[bad, 2]] - v[f[bad, 0]])
        normals[bad] = fc / np.linalg.norm(fc, axis=1, keepdims=True)
        lens = np.linalg.norm(normals, axis=1)
    normals /= lens[:, None]

    rgb = np.clip((mesh.vertex_colors_rgb[f] * weights).sum(axis=1), 0.0, 1.0)
    return PointCloud(positions, normals, rgb_to_hsv(rgb))


def cloud_diameter(positions: np.ndarray) -> float:
    """Exact max pairwise distance, O(n^2) in chunks."""
    n = len(positions)
    best = 0.0
    step = 512
    for i in range(0, n, step):
        chunk = positions[i : i + step]
        d = np.linalg.norm(chunk[:, None, :] - positions[None, :, :], axis=2)
        best = max(best, float(d.max()))
    return best


def discretize_symmetries(spec: SymmetrySpec) -> list:
    """Expand a symmetry spec into explicit transforms (identity always first)."""
    if spec.kind == "none":
        return [RigidTransform.identity()]
    count = spec.order if spec.kind == "discrete" else max(spec.order, 2)
    axis = np.asarray(spec.axis, dtype=np.float64)
    return [RigidTransform(rotation_about_axis(axis, 2.0 * np.pi * k / count), np.zeros(3)) for k in range(count)]


def prepare_model(
    mesh: TriangleMesh,
    spec: SymmetrySpec = SymmetrySpec(),
    *,
    object_id: int = 0,
    dense_samples: int = 30000,
    leaf: float = VOXEL_LEAF,
    max_points: int = MAX_MODEL_POINTS,
    seed: int = 0,
) -> ObjectModel:
    """Dense-sample, voxel-downsample, cap the point count, and finish the model."""
    rng = np.random.default_rng(seed)
    dense = sample_surface(mesh, dense_samples, rng)
    cloud = voxel_downsample(dense, leaf)
    if len(cloud) > max_points:
        keep = np.sort(rng.choice(len(cloud), size=max_points, replace=False))
        cloud = PointCloud(cloud.positions[keep], cloud.normals[keep], cloud.colors_hsv[keep])
    # the max pairwise distance over a triangulated surface is attained at
    # vertices, so the vertex diameter is exact (the sampled cloud's is not)
    return ObjectModel(
        cloud=cloud,
        diameter=cloud_diameter(mesh.vertices),
        symmetry=discretize_symmetries(spec),
        is_symmetric=spec.kind != "none",
        object_id=object_id,
    )


# ---------------------------------------------------------------------------
# object metadata bundles


def parse_symmetry_json(obj: dict) -> SymmetrySpec:
    kind = obj.get("kind", "none")
    if kind == "none":
        return SymmetrySpec()
    axis = tuple(obj["axis"])
    order = int(obj.get("order", DEFAULT_AXIS_SAMPLES if kind == "axis" else 2))
    return SymmetrySpec(kind=kind, axis=axis, order=order)


def load_object_bundle(meta_path, *, seed: int = 0, audit=None):
    """Load an object's metadata JSON plus its mesh; returns (ObjectModel, TriangleMesh).

    audit, if given, is called with every file path read (used to verify
    train/test object isolation).
    """
    meta_path = Path(meta_path)
    if audit is not None:
        audit(meta_path)
    meta = json.loads(meta_path.read_text())
    mesh_path = meta_path.parent / meta["mesh"]
    if audit is not None:
        audit(mesh_path)
    mesh = load_mesh_file(mesh_path)
    if meta.get("units", "m") == "mm":
        mesh = mesh.scaled(1e-3)
    spec = parse_symmetry_json(meta.get("symmetry", {}))
    return prepare_model(mesh, spec, object_id=int(meta["object_id"]), seed=seed), mesh
