"""Pose-error metrics (VSD, MSSD, MSPD) and average-recall aggregation.

Threshold grids follow the 2019 BOP-challenge convention and live in
MetricThresholds so tests and the CLI pin one source of truth.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .geom import CameraIntrinsics, RigidTransform, compose
from .objmodel import ObjectModel
from .render import visibility_mask

DEFAULT_DELTA = 0.015  # visibility tolerance, meters


def _frac_grid():
    return tuple(np.round(np.arange(0.05, 0.501, 0.05), 4).tolist())


@dataclass(frozen=True)
class MetricThresholds:
    vsd_taus: tuple = field(default_factory=_frac_grid)     # fractions of diameter
    vsd_thetas: tuple = field(default_factory=_frac_grid)   # in (0, 1]
    mssd_thetas: tuple = field(default_factory=_frac_grid)  # fractions of diameter
    mspd_thetas: tuple = field(default_factory=lambda: tuple(float(5 * k) for k in range(1, 11)))  # multiples of r
    delta: float = DEFAULT_DELTA

    def __post_init__(self):
        for name in ("vsd_taus", "vsd_thetas", "mssd_thetas", "mspd_thetas"):
            vals = getattr(self, name)
            if not vals or any(v <= 0 for v in vals):
                raise ValueError(f"{name} must be nonempty and positive")


@dataclass
class EvalRecord:
    """Per (frame, object) errors; e_vsd holds one value per tau."""

    frame: int
    obj_id: int
    e_vsd: tuple
    e_mssd: float
    e_mspd: float
    gt_pose: RigidTransform | None = None
    est_pose: RigidTransform | None = None
    vsd_valid: bool = True  # False when both visibility masks were empty


def vsd(d_hat: np.ndarray, d_gt: np.ndarray, depth_obs: np.ndarray, tau: float, delta: float):
    """Visible surface discrepancy between two rendered distance maps.

    Returns (error in [0, 1], valid). A pixel in the union of the two
    visibility masks scores 0 only when both poses see it and their depths
    agree within tau. An empty union makes the error undefined: reported as
    (1.0, False).
    """
    v_hat = visibility_mask(d_hat, depth_obs, delta)
    v_gt = visibility_mask(d_gt, depth_obs, delta)
    union = v_hat | v_gt
    n = int(union.sum())
    if n == 0:
        return 1.0, False
    both = v_hat & v_gt
    good = int((both & (np.abs(d_hat - d_gt) < tau)).sum())
    return (n - good) / n, True


def _apply_elementwise(t: RigidTransform, pts: np.ndarray):
    """Rigid transform with fixed-order scalar arithmetic (no BLAS), so a
    plain per-point loop oracle reproduces the result bitwise."""
    r, tr = t.rotation, t.translation
    x, y, z = pts[:, 0], pts[:, 1], pts[:, 2]
    return (
        r[0, 0] * x + r[0, 1] * y + r[0, 2] * z + tr[0],
        r[1, 0] * x + r[1, 1] * y + r[1, 2] * z + tr[1],
        r[2, 0] * x + r[2, 1] * y + r[2, 2] * z + tr[2],
    )


def mssd(est: RigidTransform, gt: RigidTransform, model: ObjectModel) -> float:
    """Max 3D surface distance, minimized over the symmetry set."""
    pts = model.cloud.positions
    ex, ey, ez = _apply_elementwise(est, pts)
    best = np.inf
    for t_sym in model.symmetry:
        gx, gy, gz = _apply_elementwise(compose(gt, t_sym), pts)
        dx, dy, dz = ex - gx, ey - gy, ez - gz
        dist = np.sqrt(dx * dx + dy * dy + dz * dz)
        best = min(best, float(dist.max()))
    return best


def mspd(est: RigidTransform, gt: RigidTransform, model: ObjectModel, k: CameraIntrinsics) -> float:
    """Max 2D reprojection distance in pixels, minimized over the symmetry
    set. Any point behind the camera under either pose makes the estimate a
    failure (+inf)."""
    pts = model.cloud.positions
    ex, ey, ez = _apply_elementwise(est, pts)
    if not (ez > 0).all():
        return np.inf
    ue = k.fx * ex / ez + k.cx
    ve = k.fy * ey / ez + k.cy
    best = np.inf
    for t_sym in model.symmetry:
        gx, gy, gz = _apply_elementwise(compose(gt, t_sym), pts)
        if not (gz > 0).all():
            return np.inf
        du = ue - (k.fx * gx / gz + k.cx)
        dv = ve - (k.fy * gy / gz + k.cy)
        dist = np.sqrt(du * du + dv * dv)
        best = min(best, float(dist.max()))
    return best


def average_recall(records: list, th: MetricThresholds, diameters: dict, image_width: int):
    """BOP-style AR: per-metric recall averaged over the threshold grids,
    then averaged over the three metrics.

    diameters maps object id -> diameter (meters); mspd thresholds scale by
    r = image_width / 640.
    """
    if not records:
        raise ValueError("no evaluation records")
    r_scale = image_width / 640.0

    vsd_hits = 0
    vsd_total = 0
    for rec in records:
        for ei, _tau in enumerate(th.vsd_taus):
            for theta in th.vsd_thetas:
                vsd_total += 1
                if rec.e_vsd[ei] < theta:
                    vsd_hits += 1
    ar_vsd = vsd_hits / vsd_total

    mssd_hits = 0
    mspd_hits = 0
    for rec in records:
        diam = diameters[rec.obj_id]
        for theta in th.mssd_thetas:
            if rec.e_mssd < theta * diam:
                mssd_hits += 1
        for theta in th.mspd_thetas:
            if rec.e_mspd < theta * r_scale:
                mspd_hits += 1
    ar_mssd = mssd_hits / (len(records) * len(th.mssd_thetas))
    ar_mspd = mspd_hits / (len(records) * len(th.mspd_thetas))

    ar = (ar_vsd + ar_mssd + ar_mspd) / 3.0
    return {"AR_vsd": ar_vsd, "AR_mssd": ar_mssd, "AR_mspd": ar_mspd, "AR": ar}


def records_to_csv_rows(records: list, th: MetricThresholds):
    header = ["frame", "obj_id", "e_mssd_m", "e_mspd_px"] + [
        f"e_vsd_tau{int(round(t * 100)):02d}" for t in th.vsd_taus
    ]
    rows = [header]
    for rec in sorted(records, key=lambda r: (r.frame, r.obj_id)):
        rows.append(
            [rec.frame, rec.obj_id, repr(float(rec.e_mssd)), repr(float(rec.e_mspd))]
            + [repr(float(v)) for v in rec.e_vsd]
        )
    return rows
