"""Backend parity: the compiled kernels must reproduce the pure-numpy
fallback (bitwise for integer/selection outputs, tight allclose where
reduction order differs)."""

import numpy as np
import pytest

from hyposcore._kernels import fallback, get_backend

try:
    core = get_backend("compiled")
except RuntimeError:
    core = None

needs_core = pytest.mark.skipif(core is None, reason="compiled kernels unavailable")


def random_raster_inputs(seed, v=40, f=25, h=48, w=64, n_attr=5):
    rng = np.random.default_rng(seed)
    vx = rng.uniform(-8, w + 8, v)
    vy = rng.uniform(-8, h + 8, v)
    z = rng.uniform(0.4, 2.5, v)
    zinv = 1.0 / z
    attrs = rng.uniform(0, 1, (v, n_attr)) * zinv[:, None]
    faces = rng.integers(0, v, (f, 3)).astype(np.int32)
    return vx, vy, zinv, attrs, faces, h, w, n_attr


def run_raster(mod, args):
    vx, vy, zinv, attrs, faces, h, w, n_attr = args
    zb = np.zeros((h, w))
    ab = np.zeros((h, w, n_attr))
    ob = np.full((h, w), -1, np.int32)
    mod.raster_fill(vx, vy, zinv, attrs, faces, zb, ab, ob, 7)
    return zb, ab, ob


@needs_core
@pytest.mark.parametrize("seed", range(5))
def test_raster_fill_backends_bitwise_equal(seed):
    args = random_raster_inputs(seed)
    za, aa, oa = run_raster(fallback, args)
    zb, ab, ob = run_raster(core, args)
    assert np.array_equal(za, zb)
    assert np.array_equal(aa, ab)
    assert np.array_equal(oa, ob)
    assert (oa >= 0).any()  # something actually rasterized


def random_vote_inputs(seed, s=300, e=2500, n_model=40, n_alpha=30):
    rng = np.random.default_rng(seed)
    pts = rng.normal(0, 0.05, (s, 3))
    nrm = rng.normal(size=(s, 3))
    nrm /= np.linalg.norm(nrm, axis=1, keepdims=True)
    i = rng.integers(0, s, e)
    j = rng.integers(0, s, e)
    d = pts[j] - pts[i]
    dist = np.linalg.norm(d, axis=1)
    good = dist > 1e-9
    d, dist, i, j = d[good], dist[good], i[good], j[good]
    dn = d / dist[:, None]
    a1 = np.arccos(np.clip(np.sum(dn * nrm[i], 1), -1, 1))
    a2 = np.arccos(np.clip(np.sum(dn * nrm[j], 1), -1, 1))
    a3 = np.arccos(np.clip(np.sum(nrm[i] * nrm[j], 1), -1, 1))
    keys = fallback.ppf_pack_keys(dist, a1, a2, a3, 0.01, np.pi / 15)
    order = np.argsort(keys, kind="stable")
    em = rng.integers(0, n_model, len(keys)).astype(np.int32)[order]
    ea = fallback.alpha_bin(rng.uniform(-np.pi, np.pi, len(keys)), n_alpha).astype(np.int32)[order]
    refs = np.sort(rng.choice(s, 50, replace=False)).astype(np.int64)
    return (pts, nrm, refs, keys[order].astype(np.uint64), em, ea, 0.01, np.pi / 15, 0.25, n_model, n_alpha, 0.9)


@needs_core
@pytest.mark.parametrize("seed", range(5))
def test_ppf_vote_backends_bitwise_equal(seed):
    args = random_vote_inputs(seed)
    ra = fallback.ppf_vote_accumulate(*args)
    rb = core.ppf_vote_accumulate(*args)
    assert len(ra[0]) > 0
    for x, y in zip(ra, rb):
        assert np.array_equal(x, y)


@needs_core
@pytest.mark.parametrize("dtype", [np.float32, np.float64])
def test_bn_kernels_match_fallback(dtype):
    rng = np.random.default_rng(0)
    x = rng.normal(0, 2, (4000, 16)).astype(dtype)
    mu_a, var_a = fallback.bn_stats(x)
    mu_b, var_b = core.bn_stats(np.ascontiguousarray(x))
    assert np.allclose(mu_a, mu_b, atol=1e-10)
    assert np.allclose(var_a, var_b, rtol=1e-8, atol=1e-10)

    scale = rng.normal(1, 0.1, 16).astype(dtype)
    shift = rng.normal(0, 0.1, 16).astype(dtype)
    mean = mu_a.astype(dtype)
    inv = (1.0 / np.sqrt(var_a + 1e-5)).astype(dtype)

    xa = x.copy()
    ya, ma = fallback.bn_relu_apply(xa, mean, inv, scale, shift)
    xb = x.copy()
    yb, mb = core.bn_relu_apply(xb, mean, inv, scale, shift)
    assert np.array_equal(ma.astype(np.uint8), mb)
    tol = 1e-6 if dtype == np.float32 else 1e-14
    assert np.allclose(ya, yb, atol=tol)
    assert np.allclose(xa, xb, atol=tol)  # xhat left in place

    gy = rng.normal(size=x.shape).astype(dtype)
    ga = gy.copy()
    gsa, gha = fallback.bn_relu_bwd(ga, xa, ma.astype(np.uint8), inv, scale, True)
    gb = gy.copy()
    gsb, ghb = core.bn_relu_bwd(gb, xb, mb, inv, scale, True)
    assert np.allclose(gsa, gsb, rtol=1e-6, atol=1e-8)
    assert np.allclose(gha, ghb, rtol=1e-6, atol=1e-8)
    assert np.allclose(ga, gb, atol=5e-6 if dtype == np.float32 else 1e-13)


@needs_core
@pytest.mark.parametrize("dtype", [np.float32, np.float64])
def test_group_max_kernels_bitwise_equal(dtype):
    rng = np.random.default_rng(1)
    x = rng.normal(size=(200, 32, 24)).astype(dtype)
    # inject ties to pin first-max semantics
    x[0, :, 0] = 1.0
    ya, aa = fallback.group_max_fwd(x)
    yb, ab = core.group_max_fwd(np.ascontiguousarray(x))
    assert np.array_equal(ya, yb)
    assert np.array_equal(aa, ab)
    assert aa[0, 0] == 0

    gy = rng.normal(size=ya.shape).astype(dtype)
    gxa = fallback.group_max_bwd(gy.copy(), aa, 32)
    gxb = core.group_max_bwd(np.ascontiguousarray(gy.copy()), ab, 32)
    assert np.array_equal(gxa, gxb)
