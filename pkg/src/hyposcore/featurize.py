"""Per-hypothesis point-difference sets: project the model, sample the
observation, and emit the unordered 7-channel difference vectors the scoring
network consumes.

Channel order (fixed): [u_norm, v_norm, dh, ds, dv, dd, ncos]
  u_norm, v_norm  projected image coordinates, normalized per set to zero
                  mean / unit variance (the grouping space for the network)
  dh              signed circular hue difference, model - observation, in [-0.5, 0.5)
  ds, dv          signed saturation / value differences in [-1, 1]
  dd              signed depth difference in meters (model - observation), unclamped
  ncos            cosine between transformed model normal and observed normal
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .geom import CameraIntrinsics, RigidTransform, hue_difference
from .hypo import PoseHypothesis
from .objmodel import ObjectModel
from .render import Observation

CHANNELS = ("u_norm", "v_norm", "dh", "ds", "dv", "dd", "ncos")
N_MIN_DEFAULT = 32


@dataclass
class ProjectedModel:
    """Model points surviving projection under one hypothesis."""

    y: np.ndarray            # (N, 2) real-valued pixel coordinates
    z: np.ndarray            # (N,) camera-frame depth, > 0
    normals: np.ndarray      # (N, 3) transformed unit normals, camera frame
    hsv: np.ndarray          # (N, 3) model color, unchanged by projection
    model_indices: np.ndarray  # (N,) indices into the model cloud

    def __len__(self):
        return len(self.z)


@dataclass
class PointDifferenceSet:
    """Unordered set of per-point differences for one hypothesis."""

    data: np.ndarray                   # (N, 7) float32, channel order CHANNELS
    hypothesis: PoseHypothesis | None = None
    model_indices: np.ndarray | None = None   # per-row model cloud index
    pixel_indices: np.ndarray | None = None   # per-row flat observation pixel index

    def __len__(self):
        return len(self.data)


def project_model(
    model: ObjectModel,
    h: PoseHypothesis | RigidTransform,
    k: CameraIntrinsics,
    occlusion_filter: str = "backface",
) -> ProjectedModel:
    """Transform and project every model point, dropping points behind the
    camera, outside the image, or (with the backface filter) facing away."""
    t = h.transform if isinstance(h, PoseHypothesis) else h
    pts = t.apply(model.cloud.positions)
    normals = t.apply_to_directions(model.cloud.normals)

    keep = pts[:, 2] > 0
    if occlusion_filter == "backface":
        keep &= normals[:, 2] < 0
    elif occlusion_filter != "none":
        raise ValueError(f"unknown occlusion filter {occlusion_filter!r}")

    # pixel (r, c) spans [c, c+1) x [r, r+1): floor maps continuous
    # coordinates to the pixel whose center sample they fall on
    uv, z, _ = k.project(pts)
    col = np.floor(uv[:, 0]).astype(np.int64)
    row = np.floor(uv[:, 1]).astype(np.int64)
    keep &= (col >= 0) & (col < k.width) & (row >= 0) & (row < k.height)

    idx = np.nonzero(keep)[0]
    return ProjectedModel(
        y=uv[idx],
        z=z[idx],
        normals=normals[idx],
        hsv=model.cloud.colors_hsv[idx],
        model_indices=idx,
    )


@dataclass
class AlignmentSamples:
    """Raw per-point model/observation samples prior to differencing.

    Kept separate from PointDifferenceSet so training-time color jitter can
    re-derive the HSV difference channels without re-projecting.
    """

    uv: np.ndarray
    model_hsv: np.ndarray
    obs_hsv: np.ndarray
    dd: np.ndarray
    ncos: np.ndarray
    model_indices: np.ndarray
    pixel_indices: np.ndarray

    def __len__(self):
        return len(self.dd)


def sample_alignment(proj: ProjectedModel, obs: Observation) -> AlignmentSamples:
    """Nearest-pixel observation lookup; drops points on invalid pixels."""
    h, w = obs.depth.shape
    col = np.floor(proj.y[:, 0]).astype(np.int64)
    row = np.floor(proj.y[:, 1]).astype(np.int64)
    np.clip(col, 0, w - 1, out=col)
    np.clip(row, 0, h - 1, out=row)

    depth_obs = obs.depth[row, col]
    n_obs = obs.normals[row, col]
    ok = (depth_obs > 0) & (np.sum(n_obs * n_obs, axis=1) > 0.25)

    return AlignmentSamples(
        uv=proj.y[ok],
        model_hsv=proj.hsv[ok],
        obs_hsv=obs.hsv[row[ok], col[ok]],
        dd=proj.z[ok] - depth_obs[ok],
        ncos=np.clip(np.sum(proj.normals[ok] * n_obs[ok], axis=1), -1.0, 1.0),
        model_indices=proj.model_indices[ok],
        pixel_indices=row[ok] * w + col[ok],
    )


def normalize_coords(uv: np.ndarray) -> np.ndarray:
    """Zero-mean / unit-variance image coordinates per set; all-zero for N < 2
    or degenerate spreads."""
    if len(uv) == 0:
        return np.zeros((0, 2))
    mean = uv.mean(axis=0)
    std = uv.std(axis=0)
    out = np.zeros_like(uv)
    for c in range(2):
        if len(uv) > 1 and std[c] > 1e-12:
            out[:, c] = (uv[:, c] - mean[c]) / std[c]
    return out


def differences_from_samples(samples: AlignmentSamples, hypothesis=None) -> PointDifferenceSet:
    data = np.empty((len(samples), 7), dtype=np.float32)
    data[:, 0:2] = normalize_coords(samples.uv)
    data[:, 2] = hue_difference(samples.model_hsv[:, 0], samples.obs_hsv[:, 0])
    data[:, 3] = samples.model_hsv[:, 1] - samples.obs_hsv[:, 1]
    data[:, 4] = samples.model_hsv[:, 2] - samples.obs_hsv[:, 2]
    data[:, 5] = samples.dd
    data[:, 6] = samples.ncos
    return PointDifferenceSet(
        data=data,
        hypothesis=hypothesis,
        model_indices=samples.model_indices,
        pixel_indices=samples.pixel_indices,
    )


def point_differences(proj: ProjectedModel, obs: Observation, hypothesis=None) -> PointDifferenceSet:
    return differences_from_samples(sample_alignment(proj, obs), hypothesis)


def featurize_batch(
    model: ObjectModel,
    hypotheses: list,
    obs: Observation,
    occlusion_filter: str = "backface",
) -> list:
    """One PointDifferenceSet per hypothesis, order preserved. Hypotheses with
    no surviving points yield empty sets; callers treat those as sentinels."""
    out = []
    for h in hypotheses:
        proj = project_model(model, h, obs.intrinsics, occlusion_filter)
        out.append(point_differences(proj, obs, hypothesis=h))
    return out
