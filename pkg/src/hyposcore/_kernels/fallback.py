"""Pure-numpy implementations of the hot kernels.

These are the reference semantics: the compiled extension in ``_core.pyx``
must produce identical buffers (same arithmetic, same scan order). Keep the
two files in lockstep.
"""

from __future__ import annotations

import numpy as np


def raster_fill(vx, vy, zinv, attrs_over_z, faces, zinv_buf, attr_buf, owner_buf, owner_offset):
    """Z-buffer triangle fill with perspective-correct attribute interpolation.

    Vertices are given in continuous pixel coordinates with per-vertex 1/z
    and attribute/z values. Pixel centers sit at (ix + 0.5, iy + 0.5). A
    nearer fragment strictly wins (zinv greater than the stored value).
    Buffers are updated in place; owner_buf records owner_offset + triangle
    index for covered pixels.
    """
    h, w = zinv_buf.shape
    for f in range(len(faces)):
        ia, ib, ic = faces[f]
        ax, ay = vx[ia], vy[ia]
        bx, by = vx[ib], vy[ib]
        cx, cy = vx[ic], vy[ic]

        area = (bx - ax) * (cy - ay) - (by - ay) * (cx - ax)
        if area == 0.0:
            continue

        x0 = max(0, int(np.ceil(min(ax, bx, cx) - 0.5)))
        x1 = min(w - 1, int(np.floor(max(ax, bx, cx) - 0.5)))
        y0 = max(0, int(np.ceil(min(ay, by, cy) - 0.5)))
        y1 = min(h - 1, int(np.floor(max(ay, by, cy) - 0.5)))
        if x1 < x0 or y1 < y0:
            continue

        px = np.arange(x0, x1 + 1, dtype=np.float64) + 0.5
        py = np.arange(y0, y1 + 1, dtype=np.float64) + 0.5
        px, py = np.meshgrid(px, py)

        w0 = (bx - px) * (cy - py) - (by - py) * (cx - px)
        w1 = (cx - px) * (ay - py) - (cy - py) * (ax - px)
        w2 = (ax - px) * (by - py) - (ay - py) * (bx - px)
        inside = ((w0 >= 0) & (w1 >= 0) & (w2 >= 0)) | ((w0 <= 0) & (w1 <= 0) & (w2 <= 0))
        if not inside.any():
            continue

        w0 = w0 / area
        w1 = w1 / area
        w2 = w2 / area
        zi = w0 * zinv[ia] + w1 * zinv[ib] + w2 * zinv[ic]

        tile = zinv_buf[y0 : y1 + 1, x0 : x1 + 1]
        win = inside & (zi > tile)
        if not win.any():
            continue
        tile[win] = zi[win]
        owner_buf[y0 : y1 + 1, x0 : x1 + 1][win] = owner_offset + f
        interp = (
            w0[..., None] * attrs_over_z[ia]
            + w1[..., None] * attrs_over_z[ib]
            + w2[..., None] * attrs_over_z[ic]
        )
        attr_buf[y0 : y1 + 1, x0 : x1 + 1][win] = interp[win]


def ppf_pack_keys(dist, a1, a2, a3, dist_step, angle_step):
    """Quantize continuous pair features and pack them into uint64 keys."""
    db = np.floor(np.asarray(dist) / dist_step).astype(np.uint64)
    b1 = np.floor(np.asarray(a1) / angle_step).astype(np.uint64)
    b2 = np.floor(np.asarray(a2) / angle_step).astype(np.uint64)
    b3 = np.floor(np.asarray(a3) / angle_step).astype(np.uint64)
    return (db << np.uint64(24)) | (b1 << np.uint64(16)) | (b2 << np.uint64(8)) | b3


def ref_frame_rotation(n):
    """Rotation taking unit vector n onto +x; fixed formula shared by backends."""
    c, a, b = float(n[0]), float(n[1]), float(n[2])
    if 1.0 + c < 1e-9:
        return np.array([[-1.0, 0.0, 0.0], [0.0, -1.0, 0.0], [0.0, 0.0, 1.0]])
    k = 1.0 / (1.0 + c)
    return np.array(
        [
            [c, a, b],
            [-a, 1.0 - a * a * k, -a * b * k],
            [-b, -a * b * k, 1.0 - b * b * k],
        ]
    )


def bn_stats(x):
    """Per-column mean and biased variance, accumulated in double precision.

    Two-pass so the variance is free of the E[x^2]-mu^2 cancellation (the
    finite-difference gradient oracle needs the forward smooth to ~1e-13).
    """
    mu = x.mean(axis=0, dtype=np.float64)
    d = x - mu.astype(x.dtype)
    var = np.einsum("ij,ij->j", d, d, dtype=np.float64) / x.shape[0]
    return mu, var


def bn_relu_apply(x, mean, inv, scale, shift):
    """Normalize x in place (it becomes xhat) and return (relu(scale*xhat+shift), mask)."""
    x -= mean
    x *= inv
    y = x * scale
    y += shift
    mask = y > 0
    y *= mask
    return y, mask.astype(np.uint8)


def bn_relu_bwd(gy, xhat, mask, inv, scale, train):
    """Backward through relu+affine+normalization; gy becomes gx in place.

    Returns (gscale, gshift) accumulated in double precision.
    """
    gy *= mask  # relu
    gscale = np.einsum("ij,ij->j", gy, xhat, dtype=np.float64)
    gshift = gy.sum(axis=0, dtype=np.float64)
    gy *= scale
    if train:
        m = gy.shape[0]
        gy -= (gshift * scale / m).astype(gy.dtype)
        gy -= xhat * ((gscale * scale / m).astype(gy.dtype))
    gy *= inv
    return gscale, gshift


def group_max_fwd(x):
    """Max over the middle axis of (G, n, C) with first-max argmax."""
    arg = np.argmax(x, axis=1).astype(np.int32)
    y = np.take_along_axis(x, arg[:, None, :], axis=1)[:, 0, :]
    return np.ascontiguousarray(y), arg


def group_max_bwd(gy, arg, n):
    g, c = gy.shape
    gx = np.zeros((g, n, c), dtype=gy.dtype)
    np.put_along_axis(gx, arg[:, None, :].astype(np.int64), gy[:, None, :], axis=1)
    return gx


def alpha_bin(alpha, n_alpha: int):
    """Planar angle in [-pi, pi) -> integer bin; shared by table build and voting."""
    b = np.floor((np.asarray(alpha) + np.pi) / (2.0 * np.pi) * n_alpha).astype(np.int64)
    return np.clip(b, 0, n_alpha - 1)


def ppf_vote_accumulate(
    points,
    normals,
    ref_indices,
    keys,
    entry_model,
    entry_alpha_bin,
    dist_step,
    angle_step,
    max_dist,
    n_model,
    n_alpha,
    rel_thresh,
):
    """Drost-style voting over scene point pairs against a sorted feature table.

    For each reference scene point, every other scene point within max_dist
    votes for (model reference index, planar angle bin) via matching table
    entries. Planar angles are pre-binned on both sides, so a vote lands in
    bin (scene_bin - model_bin) mod n_alpha. Peaks with votes >=
    rel_thresh * max are emitted.

    Returns (ref_scene_index, model_index, alpha, votes) arrays, where alpha
    is the emitted bin center in [-pi, pi).
    """
    out_ref, out_model, out_alpha, out_votes = [], [], [], []
    two_pi = 2.0 * np.pi
    for sr in ref_indices:
        p_r = points[sr]
        n_r = normals[sr]
        rot = ref_frame_rotation(n_r)

        d = points - p_r
        dist = np.sqrt(d[:, 0] ** 2 + d[:, 1] ** 2 + d[:, 2] ** 2)
        ok = (dist > 1e-9) & (dist <= max_dist)
        if not ok.any():
            continue
        d = d[ok]
        dn = d / dist[ok, None]
        nd = normals[ok]
        a1 = np.arccos(np.clip(dn @ n_r, -1.0, 1.0))
        a2 = np.arccos(np.clip(np.sum(dn * nd, axis=1), -1.0, 1.0))
        a3 = np.arccos(np.clip(nd @ n_r, -1.0, 1.0))
        pair_keys = ppf_pack_keys(dist[ok], a1, a2, a3, dist_step, angle_step)

        dl = d @ rot.T
        sbin = alpha_bin(np.arctan2(dl[:, 2], dl[:, 1]), n_alpha)

        lo = np.searchsorted(keys, pair_keys, side="left")
        hi = np.searchsorted(keys, pair_keys, side="right")
        count = hi - lo
        total = int(count.sum())
        if total == 0:
            continue
        cum = np.cumsum(count)
        start = cum - count
        flat = np.arange(total, dtype=np.int64) - np.repeat(start, count) + np.repeat(lo, count)
        pair_of = np.repeat(np.arange(len(dl), dtype=np.int64), count)

        abin = (sbin[pair_of] - entry_alpha_bin[flat]) % n_alpha

        votes = np.zeros(n_model * n_alpha, dtype=np.int32)
        np.add.at(votes, entry_model[flat].astype(np.int64) * n_alpha + abin, 1)

        vmax = int(votes.max())
        if vmax <= 0:
            continue
        thresh = rel_thresh * vmax
        peaks = np.nonzero(votes >= thresh)[0]
        for p in peaks:
            a = (int(p) % n_alpha) * two_pi / n_alpha
            if a >= np.pi:
                a -= two_pi
            out_ref.append(int(sr))
            out_model.append(int(p // n_alpha))
            out_alpha.append(a)
            out_votes.append(int(votes[p]))

    return (
        np.asarray(out_ref, dtype=np.int64),
        np.asarray(out_model, dtype=np.int32),
        np.asarray(out_alpha, dtype=np.float64),
        np.asarray(out_votes, dtype=np.int32),
    )
