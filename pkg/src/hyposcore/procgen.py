"""Procedural object library: meshes + metadata for the synthetic experiments.

Eight desk-scale rigid objects mixing symmetric/asymmetric geometry and
textured/untextured surfaces. Objects whose texture breaks a geometric
symmetry are declared asymmetric, since the pose of such an object is only
resolvable from appearance.
"""

from __future__ import annotations

import argparse
import json
from pathlib import Path

import numpy as np

from .objmodel import TriangleMesh, _finalize_mesh


def _make_mesh(verts, colors, faces) -> TriangleMesh:
    return _finalize_mesh(
        np.asarray(verts, dtype=np.float64),
        np.asarray(colors, dtype=np.float64),
        np.asarray(faces, dtype=np.int32),
        None,
    )


def _merge(parts):
    verts, colors, faces = [], [], []
    offset = 0
    for v, c, f in parts:
        verts.append(v)
        colors.append(c)
        faces.append(np.asarray(f) + offset)
        offset += len(v)
    return np.concatenate(verts), np.concatenate(colors), np.concatenate(faces)


def _grid_faces(nu, nv):
    faces = []
    for i in range(nu):
        for j in range(nv):
            a = i * (nv + 1) + j
            b = (i + 1) * (nv + 1) + j
            faces.append([a, b, a + 1])
            faces.append([a + 1, b, b + 1])
    return faces


def _box_part(center, dims, color_fn, sub=3):
    """Axis-aligned box with each face subdivided sub x sub."""
    cx, cy, cz = center
    hx, hy, hz = dims[0] / 2, dims[1] / 2, dims[2] / 2
    parts = []
    axes = [
        (0, 1, 2, +1), (0, 1, 2, -1),  # +z / -z faces
        (1, 2, 0, +1), (1, 2, 0, -1),  # +x / -x
        (2, 0, 1, +1), (2, 0, 1, -1),  # +y / -y
    ]
    half = [hx, hy, hz]
    for ua, va, wa, sign in axes:
        verts, colors = [], []
        for i in range(sub + 1):
            for j in range(sub + 1):
                p = np.zeros(3)
                p[ua] = -half[ua] + 2 * half[ua] * i / sub
                p[va] = -half[va] + 2 * half[va] * j / sub
                p[wa] = sign * half[wa]
                if sign < 0:
                    p[ua] = -p[ua]  # keep outward winding
                p += (cx, cy, cz)
                verts.append(p)
                colors.append(color_fn(p))
        parts.append((np.array(verts), np.array(colors), np.array(_grid_faces(sub, sub))))
    return parts


def _revolve_part(profile, color_fn, nseg=48, close_top=True, close_bottom=True):
    """Surface of revolution about +z from a profile [(radius, z), ...]."""
    prof = np.asarray(profile, dtype=np.float64)
    nv = len(prof) - 1
    verts, colors = [], []
    for i in range(nseg + 1):
        th = 2 * np.pi * (i % nseg) / nseg
        for r, z in prof:
            p = np.array([r * np.cos(th), r * np.sin(th), z])
            verts.append(p)
            colors.append(color_fn(p, th))
    faces = _grid_faces(nseg, nv)
    parts = [(np.array(verts), np.array(colors), np.array(faces))]

    for do, (r, z), flip in ((close_bottom, prof[0], True), (close_top, prof[-1], False)):
        if not do or r <= 0:
            continue
        ring = [np.array([r * np.cos(2 * np.pi * i / nseg), r * np.sin(2 * np.pi * i / nseg), z]) for i in range(nseg)]
        cen = np.array([0.0, 0.0, z])
        v = np.array(ring + [cen])
        c = np.array([color_fn(p, 2 * np.pi * i / nseg) for i, p in enumerate(ring)] + [color_fn(cen, 0.0)])
        f = []
        for i in range(nseg):
            j = (i + 1) % nseg
            f.append([nseg, j, i] if flip else [nseg, i, j])
        parts.append((v, c, np.array(f)))
    return parts


def _prism_part(ngon, radius, height, color_fn):
    """Right prism with an ngon cross-section (flat, unshared side faces)."""
    parts = []
    ring = [2 * np.pi * i / ngon for i in range(ngon)]
    bottom = [np.array([radius * np.cos(t), radius * np.sin(t), -height / 2]) for t in ring]
    top = [np.array([radius * np.cos(t), radius * np.sin(t), height / 2]) for t in ring]
    for i in range(ngon):
        j = (i + 1) % ngon
        quad = [bottom[i], bottom[j], top[j], top[i]]
        v = np.array(quad)
        c = np.array([color_fn(p, i) for p in quad])
        parts.append((v, c, np.array([[0, 1, 2], [0, 2, 3]])))
    for pts, flip in ((bottom, True), (top, False)):
        cen = np.mean(pts, axis=0)
        v = np.array(pts + [cen])
        c = np.array([color_fn(p, -1) for p in pts] + [color_fn(cen, -1)])
        f = []
        for i in range(ngon):
            j = (i + 1) % ngon
            f.append([ngon, j, i] if flip else [ngon, i, j])
        parts.append((v, c, np.array(f)))
    return parts


def _hsv_color(h, s, v):
    # small local hsv->rgb so object colors can be authored by hue
    h = (h % 1.0) * 6.0
    i = int(h)
    f = h - i
    p, q, t = v * (1 - s), v * (1 - s * f), v * (1 - s * (1 - f))
    rgb = [(v, t, p), (q, v, p), (p, v, t), (p, q, v), (t, p, v), (v, p, q)][i % 6]
    return np.array(rgb)


# ---------------------------------------------------------------------------
# the library


def checker_box():
    def color(p):
        k = int(np.floor(p[0] * 100)) + int(np.floor(p[1] * 100)) + int(np.floor(p[2] * 100))
        return np.array([0.9, 0.25, 0.2]) if k % 2 == 0 else np.array([0.95, 0.92, 0.85])

    return _make_mesh(*_merge(_box_part((0, 0, 0), (0.075, 0.05, 0.035), color, sub=4))), {"kind": "none"}


def banded_cylinder():
    h = 0.09

    def color(p, th):
        band = int(np.floor((p[2] / h + 0.5) * 5.0))
        return _hsv_color(0.08 + 0.17 * band, 0.85, 0.9)

    prof = [(0.022, -h / 2), (0.022, h / 2)]
    mesh = _make_mesh(*_merge(_revolve_part(prof, color, nseg=48)))
    return mesh, {"kind": "axis", "axis": [0.0, 0.0, 1.0], "order": 64}


def hex_prism():
    def color(p, side):
        return np.array([0.62, 0.62, 0.66])

    mesh = _make_mesh(*_merge(_prism_part(6, 0.03, 0.08, color)))
    return mesh, {"kind": "discrete", "axis": [0.0, 0.0, 1.0], "order": 6}


def gradient_cone():
    h = 0.095

    def color(p, th):
        u = np.clip(p[2] / h + 0.5, 0.0, 1.0)
        return _hsv_color(0.55 + 0.25 * u, 0.8, 0.45 + 0.5 * u)

    prof = [(0.034, -h / 2), (0.0005, h / 2)]
    mesh = _make_mesh(*_merge(_revolve_part(prof, color, nseg=48, close_top=False)))
    return mesh, {"kind": "axis", "axis": [0.0, 0.0, 1.0], "order": 64}


def l_block():
    def color(p):
        return np.array([0.35, 0.42, 0.5])

    parts = _box_part((0, 0, -0.02), (0.08, 0.035, 0.03), color, sub=3)
    parts += _box_part((-0.025, 0, 0.015), (0.03, 0.035, 0.04), color, sub=3)
    return _make_mesh(*_merge(parts)), {"kind": "none"}


def striped_cylinder():
    # geometric cylinder whose single bright stripe breaks the symmetry,
    # so its pose is only resolvable from color
    h = 0.085

    def color(p, th):
        th = th % (2 * np.pi)
        if th < 0.7:
            return np.array([0.95, 0.15, 0.1])
        return np.array([0.12, 0.3, 0.75])

    prof = [(0.026, -h / 2), (0.026, h / 2)]
    mesh = _make_mesh(*_merge(_revolve_part(prof, color, nseg=48)))
    return mesh, {"kind": "none"}


def wedge():
    def color(p):
        return np.array([0.72, 0.68, 0.55])

    b = 0.08
    d = 0.045
    hgt = 0.05
    v = np.array(
        [
            [-b / 2, -d / 2, 0], [b / 2, -d / 2, 0], [b / 2, d / 2, 0], [-b / 2, d / 2, 0],
            [-b / 2, -d / 2, hgt], [-b / 2, d / 2, hgt],
        ]
    )
    v = v - v.mean(axis=0)
    f = np.array([[0, 2, 1], [0, 3, 2], [0, 1, 4], [4, 1, 5], [1, 2, 5], [0, 4, 3], [3, 4, 5]])
    c = np.array([color(p) for p in v])
    return _make_mesh(v, c, f), {"kind": "none"}


def quad_prism():
    # square cross-section, four distinct side colors: geometric 4-fold
    # symmetry broken by texture
    palette = [
        np.array([0.9, 0.2, 0.2]),
        np.array([0.2, 0.75, 0.3]),
        np.array([0.95, 0.85, 0.2]),
        np.array([0.25, 0.3, 0.85]),
    ]

    def color(p, side):
        if side < 0:
            return np.array([0.8, 0.8, 0.8])
        return palette[side % 4]

    mesh = _make_mesh(*_merge(_prism_part(4, 0.028, 0.09, color)))
    return mesh, {"kind": "none"}


LIBRARY = [
    (1, "checker_box", checker_box),
    (2, "banded_cylinder", banded_cylinder),
    (3, "hex_prism", hex_prism),
    (4, "gradient_cone", gradient_cone),
    (5, "l_block", l_block),
    (6, "striped_cylinder", striped_cylinder),
    (7, "wedge", wedge),
    (8, "quad_prism", quad_prism),
]


def write_ply(mesh: TriangleMesh, path) -> None:
    """Ascii PLY with per-vertex normals and uint8 colors."""
    lines = [
        "ply",
        "format ascii 1.0",
        f"element vertex {len(mesh.vertices)}",
        "property float x", "property float y", "property float z",
        "property float nx", "property float ny", "property float nz",
        "property uchar red", "property uchar green", "property uchar blue",
        f"element face {len(mesh.faces)}",
        "property list uchar int vertex_indices",
        "end_header",
    ]
    cols = np.clip(np.rint(mesh.vertex_colors_rgb * 255.0), 0, 255).astype(int)
    for p, n, c in zip(mesh.vertices, mesh.vertex_normals, cols):
        lines.append(
            f"{p[0]:.8f} {p[1]:.8f} {p[2]:.8f} {n[0]:.6f} {n[1]:.6f} {n[2]:.6f} {c[0]} {c[1]} {c[2]}"
        )
    for f in mesh.faces:
        lines.append(f"3 {f[0]} {f[1]} {f[2]}")
    Path(path).write_text("\n".join(lines) + "\n")


def generate_model_library(models_dir, object_ids=None) -> list:
    """Write the PLY + metadata JSON for each library object; returns the ids."""
    models_dir = Path(models_dir)
    models_dir.mkdir(parents=True, exist_ok=True)
    ids = []
    for obj_id, name, builder in LIBRARY:
        if object_ids is not None and obj_id not in object_ids:
            continue
        mesh, symmetry = builder()
        ply_name = f"obj_{obj_id:06d}.ply"
        write_ply(mesh, models_dir / ply_name)
        meta = {"object_id": obj_id, "mesh": ply_name, "symmetry": symmetry, "units": "m", "name": name}
        (models_dir / f"obj_{obj_id:06d}.json").write_text(json.dumps(meta, indent=1))
        ids.append(obj_id)
    return ids


def main(argv=None):
    ap = argparse.ArgumentParser(description="Write the procedural object library")
    ap.add_argument("out", help="output models directory")
    args = ap.parse_args(argv)
    ids = generate_model_library(args.out)
    print(f"wrote {len(ids)} objects to {args.out}")


if __name__ == "__main__":
    main()
