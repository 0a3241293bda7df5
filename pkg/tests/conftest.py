import numpy as np
import pytest

from hyposcore import objmodel, procgen


@pytest.fixture(scope="session")
def models_dir(tmp_path_factory):
    path = tmp_path_factory.mktemp("models")
    procgen.generate_model_library(path)
    return path


@pytest.fixture(scope="session")
def library(models_dir):
    """{object_id: (ObjectModel, TriangleMesh)} for the procedural objects."""
    out = {}
    for oid in range(1, 9):
        out[oid] = objmodel.load_object_bundle(models_dir / f"obj_{oid:06d}.json")
    return out


@pytest.fixture(scope="session")
def box_model(library):
    return library[1]


def make_uv_sphere(radius=0.06, nu=96, nv=48, color=(0.5, 0.7, 0.9)):
    verts, colors, faces = [], [], []
    for i in range(nu + 1):
        for j in range(nv + 1):
            th = 2 * np.pi * i / nu
            ph = np.pi * j / nv
            verts.append(radius * np.array([np.sin(ph) * np.cos(th), np.sin(ph) * np.sin(th), np.cos(ph)]))
            colors.append(color)
    for i in range(nu):
        for j in range(nv):
            a = i * (nv + 1) + j
            b = (i + 1) * (nv + 1) + j
            faces.append([a, a + 1, b])
            faces.append([a + 1, b + 1, b])
    return objmodel._finalize_mesh(
        np.asarray(verts), np.asarray(colors, dtype=float), np.asarray(faces, np.int32), None
    )


@pytest.fixture(scope="session")
def sphere_mesh():
    return make_uv_sphere()
