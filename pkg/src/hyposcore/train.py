"""Pose-error targets, the expected-error selection loss, color jitter,
Adam, and the training loop for the scoring networks.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from scipy.spatial import cKDTree

from .geom import RigidTransform, hsv_to_rgb
from .hypo import PoseHypothesis
from .net import (
    DEFAULT_CHANNELS,
    GroupPlan,
    NetworkWeights,
    backward_batch,
    forward_batch,
    init_weights,
    save_weights,
)
from .objmodel import ObjectModel
from .render import Observation

LOG_ERROR_FLOOR = 1e-4  # meters added inside the log so a perfect pose stays finite
SENTINEL_SCORE = -np.inf


# ---------------------------------------------------------------------------
# pose error targets


def add_error(est: RigidTransform, gt: RigidTransform, model: ObjectModel) -> float:
    """Mean per-point distance between the two transformed model clouds."""
    pts = model.cloud.positions
    d = est.apply(pts) - gt.apply(pts)
    return float(np.mean(np.sqrt(np.sum(d * d, axis=1))))


def add_s_error(est: RigidTransform, gt: RigidTransform, model: ObjectModel) -> float:
    """Symmetric variant: mean nearest-neighbor distance into the gt cloud."""
    pts = model.cloud.positions
    tree = cKDTree(gt.apply(pts))
    dist, _ = tree.query(est.apply(pts))
    return float(np.mean(dist))


@dataclass
class HypothesisError:
    add: float
    eps: float
    symmetric_used: bool


def hypothesis_errors(hypotheses: list, gt: RigidTransform, model: ObjectModel) -> list:
    """Log-transformed pose error per hypothesis (ADD, or ADD-S when the
    object is symmetric)."""
    out = []
    for h in hypotheses:
        t = h.transform if isinstance(h, PoseHypothesis) else h
        err = add_s_error(t, gt, model) if model.is_symmetric else add_error(t, gt, model)
        out.append(HypothesisError(add=err, eps=float(np.log(err + LOG_ERROR_FLOOR)), symmetric_used=model.is_symmetric))
    return out


def selection_loss(scores, errors):
    """Expected pose error under the softmax over scores.

    Returns (loss, dLoss/dscores). Inputs must already exclude sentinel
    (-inf) entries. Computed in double precision; the gradient is
    p_i * (eps_i - loss).
    """
    s = np.asarray(scores, dtype=np.float64)
    e = np.asarray(errors, dtype=np.float64)
    if len(s) == 0 or len(s) != len(e):
        raise ValueError("scores and errors must be equal-length and nonempty")
    z = s - s.max()
    p = np.exp(z)
    p /= p.sum()
    loss = float(np.dot(p, e))
    return loss, p * (e - loss)


# ---------------------------------------------------------------------------
# Adam


def adam_step(params: dict, grads: dict, state: dict, lr: float, beta1: float = 0.9,
              beta2: float = 0.999, eps: float = 1e-8, t: int = 1) -> None:
    """One Adam update (bias-corrected), applied in place to params."""
    for name, g in grads.items():
        p = params[name]
        g = np.asarray(g, dtype=np.float64)
        if name not in state:
            state[name] = (np.zeros_like(g), np.zeros_like(g))
        m, v = state[name]
        m = beta1 * m + (1.0 - beta1) * g
        v = beta2 * v + (1.0 - beta2) * g * g
        state[name] = (m, v)
        m_hat = m / (1.0 - beta1**t)
        v_hat = v / (1.0 - beta2**t)
        p -= (lr * m_hat / (np.sqrt(v_hat) + eps)).astype(p.dtype)


# ---------------------------------------------------------------------------
# color jitter


@dataclass(frozen=True)
class JitterParams:
    brightness: float = 0.0   # additive value offset
    contrast: float = 1.0     # value scale about the pivot mean
    saturation: float = 1.0   # saturation scale
    hue: float = 0.0          # additive hue shift (wraps)


def sample_jitter(rng, brightness: float, contrast: float, saturation: float, hue: float) -> JitterParams:
    return JitterParams(
        brightness=float(rng.uniform(-brightness, brightness)),
        contrast=float(rng.uniform(max(0.0, 1.0 - contrast), 1.0 + contrast)),
        saturation=float(rng.uniform(max(0.0, 1.0 - saturation), 1.0 + saturation)),
        hue=float(rng.uniform(-hue, hue)),
    )


def apply_jitter_hsv(hsv: np.ndarray, p: JitterParams, value_pivot: float | None = None) -> np.ndarray:
    """Jitter an (..., 3) HSV array. Hue wraps; saturation/value clamp.

    Contrast scales the value channel about value_pivot (the array's own
    mean when not supplied, e.g. the full-image mean for observations).
    """
    out = np.array(hsv, dtype=np.float64, copy=True)
    pivot = float(out[..., 2].mean()) if value_pivot is None else float(value_pivot)
    out[..., 0] = (out[..., 0] + p.hue) % 1.0
    out[..., 1] = np.clip(out[..., 1] * p.saturation, 0.0, 1.0)
    v = pivot + p.contrast * (out[..., 2] - pivot)
    out[..., 2] = np.clip(v + p.brightness, 0.0, 1.0)
    return out


def color_jitter(obs: Observation, model: ObjectModel | None, cfg: "TrainConfig", rng):
    """Augmentation for one frame: observation-only jitter plus, when a model
    is given, one joint perturbation applied identically to the model colors
    and the observation (the joint component cannot change model-vs-frame
    hue differences)."""
    rng = np.random.default_rng(rng)
    p_obs = sample_jitter(rng, cfg.jitter_brightness, cfg.jitter_contrast, cfg.jitter_saturation, cfg.jitter_hue)
    hsv = apply_jitter_hsv(obs.hsv, p_obs)
    jittered_model = None
    if model is not None:
        f = cfg.joint_jitter
        p_joint = sample_jitter(rng, f, f, f, f)
        hsv = apply_jitter_hsv(hsv, p_joint)
        cloud = model.cloud
        new_colors = apply_jitter_hsv(cloud.colors_hsv, p_joint)
        jittered_cloud = cloud.__class__(cloud.positions.copy(), cloud.normals.copy(), new_colors)
        jittered_model = ObjectModel(
            cloud=jittered_cloud, diameter=model.diameter, symmetry=model.symmetry,
            is_symmetric=model.is_symmetric, object_id=model.object_id,
        )
    new_obs = Observation(
        rgb=hsv_to_rgb(hsv), hsv=hsv, depth=obs.depth.copy(), normals=obs.normals.copy(), intrinsics=obs.intrinsics
    )
    return new_obs, jittered_model


# ---------------------------------------------------------------------------
# training loop


@dataclass(frozen=True)
class TrainConfig:
    lr: float = 3e-4
    epochs: int = 100
    lr_drop_epochs: tuple = (30, 80)
    drop_factor: float = 0.1
    beta1: float = 0.9
    beta2: float = 0.999
    adam_eps: float = 1e-8
    jitter_brightness: float = 0.2
    jitter_contrast: float = 0.2
    jitter_saturation: float = 0.2
    jitter_hue: float = 0.05
    joint_jitter: float = 0.5
    val_fraction: float = 0.1
    n_min: int = 32
    seed: int = 0


def lr_at_epoch(cfg: TrainConfig, epoch: int) -> float:
    """Learning rate for a 1-based epoch under the step schedule."""
    drops = sum(1 for d in cfg.lr_drop_epochs if epoch > d)
    return cfg.lr * cfg.drop_factor**drops


@dataclass
class HypothesisSample:
    """One frame/object training unit: a hypothesis set with its error targets.

    `sets` holds static 7-channel feature arrays; alternatively
    `make_sets(jitter_obs, jitter_joint)` builds them on demand (the cached
    training path re-derives color channels under jitter). `plan` may carry
    precomputed grouping for the hierarchical network.
    """

    frame: int
    obj_id: int
    eps: np.ndarray
    sets: list | None = None
    make_sets: object = None
    plan: GroupPlan | None = None

    def realize(self, jitter_obs=None, jitter_joint=None) -> list:
        if self.make_sets is not None:
            return self.make_sets(jitter_obs, jitter_joint)
        return self.sets


def _subset_plan(plan: GroupPlan, keep: np.ndarray) -> GroupPlan:
    return GroupPlan(
        plan.sa1_centroids[keep], plan.sa1_groups[keep], plan.sa2_centroids[keep], plan.sa2_groups[keep]
    )


def _select_channels(sets: list, channels) -> list:
    if tuple(channels) == DEFAULT_CHANNELS:
        return sets
    cols = [DEFAULT_CHANNELS.index(c) for c in channels]
    return [s[:, cols] for s in sets]


def score_hypotheses(weights: NetworkWeights, sets: list, n_min: int = 32) -> np.ndarray:
    """Eval-mode scores with -inf sentinels for undersized sets."""
    scores = np.full(len(sets), SENTINEL_SCORE)
    keep = [i for i, s in enumerate(sets) if len(s) >= n_min]
    if keep:
        sel = _select_channels([np.asarray(sets[i].data if hasattr(sets[i], "data") else sets[i]) for i in keep],
                               weights.channels)
        vals, _ = forward_batch(weights, sel, mode="eval")
        for i, v in zip(keep, vals):
            scores[i] = float(v)
    return scores


def _sample_loss(weights, sample, cfg, mode, rng=None):
    """Forward + selection loss for one sample; returns (loss, cache, keep, dscores)."""
    if mode == "train":
        jp_obs = sample_jitter(rng, cfg.jitter_brightness, cfg.jitter_contrast, cfg.jitter_saturation, cfg.jitter_hue)
        jp_joint = sample_jitter(rng, cfg.joint_jitter, cfg.joint_jitter, cfg.joint_jitter, cfg.joint_jitter)
        sets = sample.realize(jp_obs, jp_joint)
    else:
        sets = sample.realize(None, None)
    keep = np.array([len(s) >= cfg.n_min for s in sets], dtype=bool)
    if not keep.any():
        return None
    kept_sets = _select_channels([sets[i] for i in np.nonzero(keep)[0]], weights.channels)
    plan = None
    if sample.plan is not None and mode == "train":
        plan = _subset_plan(sample.plan, keep)
    scores, cache = forward_batch(
        weights, kept_sets, mode=mode, rng=rng, plan=plan, update_running=(mode == "train")
    )
    loss, dscores = selection_loss(scores, sample.eps[keep])
    return loss, cache, keep, dscores


def fit(
    samples: list,
    arch: str,
    cfg: TrainConfig,
    channels=DEFAULT_CHANNELS,
    checkpoint_dir=None,
    progress=None,
):
    """Train a scoring network; returns (best_weights, log_rows).

    The per-step unit is one frame's full hypothesis set. Validation frames
    are split off stratified by object id; the checkpoint with the lowest
    validation loss is returned. log_rows are (epoch, train_loss, val_loss, lr).
    """
    if not samples:
        raise ValueError("empty training dataset")
    rng = np.random.default_rng(cfg.seed)

    by_obj = {}
    for i, s in enumerate(samples):
        by_obj.setdefault(s.obj_id, []).append(i)
    val_idx = []
    for obj in sorted(by_obj):
        group = np.array(by_obj[obj])
        group = group[rng.permutation(len(group))]
        n_val = int(round(cfg.val_fraction * len(group)))
        val_idx.extend(group[:n_val].tolist())
    val_set = sorted(val_idx)
    train_set = sorted(set(range(len(samples))) - set(val_set))
    if not train_set:
        train_set, val_set = val_set, []

    weights = init_weights(arch, rng, channels=channels)
    if any(not np.all(np.isfinite(s.eps)) for s in samples):
        raise ValueError("non-finite error targets in dataset")

    state = {}
    t = 0
    log_rows = []
    best = (np.inf, -1, None)
    checkpoint_dir = Path(checkpoint_dir) if checkpoint_dir is not None else None
    if checkpoint_dir is not None:
        checkpoint_dir.mkdir(parents=True, exist_ok=True)

    for epoch in range(1, cfg.epochs + 1):
        lr = lr_at_epoch(cfg, epoch)
        order = rng.permutation(len(train_set))
        train_losses = []
        for oi in order:
            sample = samples[train_set[oi]]
            out = _sample_loss(weights, sample, cfg, "train", rng)
            if out is None:
                continue
            loss, cache, keep, dscores = out
            grads = backward_batch(cache, dscores)
            t += 1
            adam_step(weights.tensors, grads, state, lr, cfg.beta1, cfg.beta2, cfg.adam_eps, t)
            train_losses.append(loss)

        val_losses = []
        for vi in val_set:
            out = _sample_loss(weights, samples[vi], cfg, "eval")
            if out is not None:
                val_losses.append(out[0])

        train_loss = float(np.mean(train_losses)) if train_losses else np.nan
        val_loss = float(np.mean(val_losses)) if val_losses else train_loss
        log_rows.append((epoch, train_loss, val_loss, lr))
        if progress is not None:
            progress(epoch, train_loss, val_loss, lr)

        if checkpoint_dir is not None:
            (checkpoint_dir / f"epoch_{epoch}.zphw").write_bytes(save_weights(weights))
        if val_loss < best[0]:
            best = (val_loss, epoch, save_weights(weights))

    if best[2] is None:
        best = (np.nan, cfg.epochs, save_weights(weights))
    if checkpoint_dir is not None:
        (checkpoint_dir / "best.zphw").write_bytes(best[2])

    from .net import load_weights

    return load_weights(best[2]), log_rows


def write_training_log(path, log_rows) -> None:
    with Path(path).open("w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["epoch", "train_loss", "val_loss", "lr"])
        for row in log_rows:
            writer.writerow(row)
