"""Pose hypothesis generation: point-pair-feature voting with pose
clustering, single-correspondence oriented-feature alignment, and trimmed
point-to-point ICP refinement.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy.spatial import cKDTree

from . import _kernels
from .geom import (
    CameraIntrinsics,
    PointCloud,
    RigidTransform,
    compose,
    matrix_from_quat,
    quat_from_matrix,
    rotation_about_axis,
    rotation_geodesic,
)
from .objmodel import ObjectModel

DEFAULT_DIST_STEP_FRAC = 0.05
DEFAULT_ANGLE_STEP = np.pi / 15.0
N_ALPHA_BINS = 30
PEAK_REL_THRESH = 0.9


@dataclass
class PoseHypothesis:
    """A candidate 6D pose with its provenance and generator-side quality."""

    transform: RigidTransform
    source: str = "ppf"  # "ppf" | "pair" | "gt"
    prior_score: float = 0.0


@dataclass
class OrientedFeature:
    """Point with a surface normal, an in-plane orientation, and a descriptor.

    Model-side features carry model-frame metric positions; observation-side
    features carry (u, v, 0) pixel coordinates in `position` and are
    back-projected against the observed depth when a pose is constructed.
    """

    position: np.ndarray
    normal: np.ndarray
    orientation: np.ndarray
    descriptor: np.ndarray

    def __post_init__(self):
        self.position = np.asarray(self.position, dtype=np.float64).reshape(3)
        self.normal = np.asarray(self.normal, dtype=np.float64).reshape(3)
        self.orientation = np.asarray(self.orientation, dtype=np.float64).reshape(3)
        self.descriptor = np.asarray(self.descriptor, dtype=np.float64).reshape(-1)
        if abs(np.dot(self.normal, self.orientation)) > 1e-5:
            raise ValueError("orientation must be orthogonal to the normal")


@dataclass
class PpfTable:
    """Hashed oriented point-pair features of a model cloud.

    keys are packed quantized (distance, angle, angle, angle) tuples sorted
    ascending; ref_index/pair_index/alpha/alpha_bin run parallel to keys.
    """

    keys: np.ndarray
    ref_index: np.ndarray
    pair_index: np.ndarray
    alpha: np.ndarray
    alpha_bin: np.ndarray  # planar angle pre-binned into N_ALPHA_BINS
    dist_step: float
    angle_step: float
    n_points: int
    max_pair_dist: float
    ref_frames: np.ndarray  # (n_points, 3, 3): rotation taking each normal to +x
    points: np.ndarray      # (n_points, 3) model positions

    def lookup(self, key: int):
        """All (ref, pair, alpha) entries stored under a packed key."""
        lo = np.searchsorted(self.keys, key, side="left")
        hi = np.searchsorted(self.keys, key, side="right")
        return self.ref_index[lo:hi], self.pair_index[lo:hi], self.alpha[lo:hi]


def ppf_feature(p1, n1, p2, n2):
    """Continuous pair feature (|d|, angle(n1,d), angle(n2,d), angle(n1,n2)).

    Angles are in [0, pi]. Returns None for coincident points.
    """
    p1 = np.asarray(p1, dtype=np.float64)
    p2 = np.asarray(p2, dtype=np.float64)
    d = p2 - p1
    dist = float(np.linalg.norm(d))
    if dist <= 1e-9:
        return None
    dn = d / dist
    a1 = float(np.arccos(np.clip(np.dot(dn, n1), -1.0, 1.0)))
    a2 = float(np.arccos(np.clip(np.dot(dn, n2), -1.0, 1.0)))
    a3 = float(np.arccos(np.clip(np.dot(np.asarray(n1), np.asarray(n2)), -1.0, 1.0)))
    return dist, a1, a2, a3


def quantize_ppf(feature, dist_step: float, angle_step: float) -> tuple:
    """Feature tuple -> integer bins with the table's steps."""
    dist, a1, a2, a3 = feature
    return (
        int(np.floor(dist / dist_step)),
        int(np.floor(a1 / angle_step)),
        int(np.floor(a2 / angle_step)),
        int(np.floor(a3 / angle_step)),
    )


def pack_ppf_key(bins) -> int:
    db, b1, b2, b3 = bins
    return (int(db) << 24) | (int(b1) << 16) | (int(b2) << 8) | int(b3)


def build_ppf_table(
    model: ObjectModel,
    dist_step_frac: float = DEFAULT_DIST_STEP_FRAC,
    angle_step: float = DEFAULT_ANGLE_STEP,
    *,
    cloud: PointCloud | None = None,
) -> PpfTable:
    """Hash every ordered point pair of the model cloud.

    `cloud` may override the model's prepared cloud (e.g. a further
    downsampled copy for speed).
    """
    cloud = cloud if cloud is not None else model.cloud
    pts = cloud.positions
    nrm = cloud.normals
    m = len(pts)
    dist_step = dist_step_frac * model.diameter

    frames = np.stack([_kernels.ref_frame_rotation(n) for n in nrm])

    keys_all, ref_all, pair_all, alpha_all = [], [], [], []
    for i in range(m):
        d = pts - pts[i]
        dist = np.sqrt(np.sum(d * d, axis=1))
        ok = dist > 1e-9
        if not ok.any():
            continue
        dn = d[ok] / dist[ok, None]
        a1 = np.arccos(np.clip(dn @ nrm[i], -1.0, 1.0))
        a2 = np.arccos(np.clip(np.sum(dn * nrm[ok], axis=1), -1.0, 1.0))
        a3 = np.arccos(np.clip(nrm[ok] @ nrm[i], -1.0, 1.0))
        keys = _kernels.ppf_pack_keys(dist[ok], a1, a2, a3, dist_step, angle_step)

        local = d[ok] @ frames[i].T
        alpha = np.arctan2(local[:, 2], local[:, 1])

        keys_all.append(keys)
        ref_all.append(np.full(ok.sum(), i, dtype=np.int32))
        pair_all.append(np.nonzero(ok)[0].astype(np.int32))
        alpha_all.append(alpha)

    keys = np.concatenate(keys_all)
    order = np.argsort(keys, kind="stable")
    alpha = np.concatenate(alpha_all)[order]
    return PpfTable(
        keys=keys[order],
        ref_index=np.concatenate(ref_all)[order],
        pair_index=np.concatenate(pair_all)[order],
        alpha=alpha,
        alpha_bin=_kernels.alpha_bin(alpha, N_ALPHA_BINS).astype(np.int32),
        dist_step=dist_step,
        angle_step=angle_step,
        n_points=m,
        max_pair_dist=model.diameter * 1.02,
        ref_frames=frames,
        points=pts.copy(),
    )


def ppf_vote(
    scene: PointCloud, table: PpfTable, ref_rate: float, rng, min_votes: int = 3,
    max_refs: int | None = None,
) -> list:
    """Drost voting: returns raw [(RigidTransform, votes), ...].

    Each sampled scene reference point accumulates votes in (model point,
    planar angle) space over matching table entries; the argmax bin plus any
    bin above 90% of it are emitted as poses. Peaks below min_votes are
    discarded as noise. Every scene point within the model diameter of a
    reference acts as its paired point; max_refs bounds only the reference
    sample.
    """
    s = len(scene)
    n_ref = int(round(ref_rate * s))
    if max_refs is not None:
        n_ref = min(n_ref, max_refs)
    if n_ref <= 0 or s == 0:
        return []
    rng = np.random.default_rng(rng)
    refs = np.sort(rng.choice(s, size=min(n_ref, s), replace=False)).astype(np.int64)

    ref_idx, model_idx, alpha, votes = _kernels.ppf_vote_accumulate(
        np.ascontiguousarray(scene.positions),
        np.ascontiguousarray(scene.normals),
        refs,
        table.keys,
        np.ascontiguousarray(table.ref_index),
        np.ascontiguousarray(table.alpha_bin),
        table.dist_step,
        table.angle_step,
        table.max_pair_dist,
        table.n_points,
        N_ALPHA_BINS,
        PEAK_REL_THRESH,
    )

    out = []
    for si, mi, al, v in zip(ref_idx, model_idx, alpha, votes):
        if v < min_votes:
            continue
        scene_rot = _kernels.ref_frame_rotation(scene.normals[si])
        t_s = RigidTransform(scene_rot, -scene_rot @ scene.positions[si])
        t_m = RigidTransform(table.ref_frames[mi], -table.ref_frames[mi] @ table.points[mi])
        rx = RigidTransform(rotation_about_axis([1.0, 0.0, 0.0], al), np.zeros(3))
        pose = compose(t_s.inverse(), compose(rx, t_m))
        out.append((pose, int(v)))
    return out


def pose_distance(a: RigidTransform, b: RigidTransform):
    return rotation_geodesic(a.rotation, b.rotation), float(np.linalg.norm(a.translation - b.translation))


def cluster_poses(raw: list, trans_thresh: float, rot_thresh: float, k: int = 100) -> list:
    """Greedy agglomeration of raw (pose, votes) into at most k hypotheses.

    Poses are processed by decreasing votes (stable on ties); each joins the
    first cluster whose seed is within both thresholds, else founds one.
    Cluster poses are vote-weighted averages (sign-aligned quaternion mean,
    translation mean); clusters are ranked by summed votes.
    """
    if trans_thresh <= 0 or rot_thresh <= 0:
        raise ValueError("thresholds must be positive")
    if not raw:
        return []
    votes = np.array([v for _, v in raw], dtype=np.float64)
    order = np.argsort(-votes, kind="stable")
    quats = np.stack([quat_from_matrix(raw[i][0].rotation) for i in order])
    trans = np.stack([raw[i][0].translation for i in order])
    v_sorted = votes[order]

    # seed arrays grow as clusters are founded; geodesic = 2*acos(|q.q_seed|)
    cos_thresh = np.cos(rot_thresh / 2.0)
    seed_q = np.empty((len(raw), 4))
    seed_t = np.empty((len(raw), 3))
    n_seed = 0
    assign = np.empty(len(raw), dtype=np.int64)
    for i in range(len(raw)):
        if n_seed:
            near_rot = np.abs(seed_q[:n_seed] @ quats[i]) >= cos_thresh
            d = seed_t[:n_seed] - trans[i]
            near_tr = d[:, 0] ** 2 + d[:, 1] ** 2 + d[:, 2] ** 2 <= trans_thresh * trans_thresh
            hits = np.nonzero(near_rot & near_tr)[0]
            if len(hits):
                assign[i] = hits[0]
                continue
        seed_q[n_seed] = quats[i]
        seed_t[n_seed] = trans[i]
        assign[i] = n_seed
        n_seed += 1

    clusters = []
    for ci in range(n_seed):
        member = assign == ci
        w = v_sorted[member]
        w_sum = float(w.sum())
        weights = w / w_sum if w_sum > 0 else np.full(len(w), 1.0 / len(w))
        q_mem = quats[member]
        q_mem = np.where((q_mem @ seed_q[ci])[:, None] < 0, -q_mem, q_mem)
        q_acc = weights @ q_mem
        q_acc /= np.linalg.norm(q_acc)
        t_acc = weights @ trans[member]
        clusters.append((RigidTransform(matrix_from_quat(q_acc), t_acc), w_sum))

    clusters.sort(key=lambda c: -c[1])
    return [PoseHypothesis(transform=p, source="ppf", prior_score=v) for p, v in clusters[:k]]


# ---------------------------------------------------------------------------
# oriented-feature correspondences


def _feature_basis(normal: np.ndarray, orientation: np.ndarray) -> np.ndarray:
    """Right-handed orthonormal basis with columns (orientation, n x o, n)."""
    n = normal / np.linalg.norm(normal)
    o = orientation - np.dot(orientation, n) * n
    o = o / np.linalg.norm(o)
    return np.column_stack([o, np.cross(n, o), n])


def pose_from_oriented_pair(
    model_feat: OrientedFeature,
    obs_feat: OrientedFeature,
    k: CameraIntrinsics,
    obs_depth: np.ndarray,
) -> PoseHypothesis | None:
    """Unique rigid transform aligning a matched model/observation feature pair.

    The observation feature's position holds pixel coordinates (u, v, _);
    returns None when the observed depth there is invalid.
    """
    u, v = float(obs_feat.position[0]), float(obs_feat.position[1])
    col, row = int(np.floor(u)), int(np.floor(v))
    if not (0 <= col < k.width and 0 <= row < k.height):
        return None
    z = float(obs_depth[row, col])
    if z <= 0:
        return None
    p_obs = k.backproject(u, v, z)

    b_model = _feature_basis(model_feat.normal, model_feat.orientation)
    b_obs = _feature_basis(obs_feat.normal, obs_feat.orientation)
    rot = b_obs @ b_model.T
    t = p_obs - rot @ model_feat.position
    return PoseHypothesis(transform=RigidTransform(rot, t), source="pair", prior_score=0.0)


def match_descriptors(query: np.ndarray, train: np.ndarray, ratio: float = 0.8) -> list:
    """Nearest-neighbor matching with Lowe's ratio test; returns index pairs."""
    if len(query) == 0 or len(train) < 2:
        return []
    tree = cKDTree(train)
    dist, idx = tree.query(query, k=2)
    out = []
    for qi in range(len(query)):
        if dist[qi, 0] <= ratio * dist[qi, 1]:
            out.append((qi, int(idx[qi, 0])))
    return out


# ---------------------------------------------------------------------------
# ICP refinement


@dataclass
class IcpResult:
    pose: PoseHypothesis
    rms_history: list
    degenerate: bool  # too few correspondences; pose returned unchanged


def _kabsch(src: np.ndarray, dst: np.ndarray) -> RigidTransform:
    mu_s = src.mean(axis=0)
    mu_d = dst.mean(axis=0)
    h = (src - mu_s).T @ (dst - mu_d)
    u, _, vt = np.linalg.svd(h)
    d = np.sign(np.linalg.det(vt.T @ u.T))
    r = vt.T @ np.diag([1.0, 1.0, d]) @ u.T
    return RigidTransform(r, mu_d - r @ mu_s)


def icp_refine(
    model_cloud: PointCloud,
    scene: PointCloud,
    init: PoseHypothesis,
    max_iter: int = 30,
    tol: float = 1e-6,
    *,
    min_correspondences: int = 10,
) -> IcpResult:
    """Trimmed point-to-point ICP from an initial hypothesis.

    Correspondences beyond 2.5x the scene's median point spacing are
    discarded. An update is accepted only if it lowers the trimmed RMS, so
    the RMS history is non-increasing.
    """
    if len(scene) < min_correspondences:
        return IcpResult(init, [], degenerate=True)
    tree = cKDTree(scene.positions)
    spacing_d, _ = tree.query(scene.positions, k=2)
    inlier_radius = 2.5 * max(float(np.median(spacing_d[:, 1])), 1e-6)

    src = model_cloud.positions
    current = init.transform

    def correspondences(t: RigidTransform):
        moved = t.apply(src)
        dist, idx = tree.query(moved)
        ok = dist <= inlier_radius
        return moved, idx, ok, dist

    moved, idx, ok, dist = correspondences(current)
    if int(ok.sum()) < min_correspondences:
        return IcpResult(init, [], degenerate=True)
    rms = float(np.sqrt(np.mean(dist[ok] ** 2)))
    history = [rms]

    for _ in range(max_iter):
        step = _kabsch(moved[ok], scene.positions[idx[ok]])
        candidate = compose(step, current)
        moved_c, idx_c, ok_c, dist_c = correspondences(candidate)
        if int(ok_c.sum()) < min_correspondences:
            break
        rms_c = float(np.sqrt(np.mean(dist_c[ok_c] ** 2)))
        if rms_c > rms:
            break
        improved = rms - rms_c
        current, moved, idx, ok, dist, rms = candidate, moved_c, idx_c, ok_c, dist_c, rms_c
        history.append(rms)
        if improved < tol:
            break

    refined = PoseHypothesis(transform=current, source=init.source, prior_score=init.prior_score)
    return IcpResult(refined, history, degenerate=False)
