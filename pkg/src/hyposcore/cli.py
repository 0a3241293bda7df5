"""Batch pipeline: dataset synthesis, hypothesis generation, training,
scoring, and evaluation.

Subcommands: gen-data, hypo, train, score, eval, all.
Exit codes: 0 success, 1 usage error, 2 data error, 3 numeric failure.
"""

from __future__ import annotations

import argparse
import json
import sys
from concurrent.futures import ThreadPoolExecutor
from dataclasses import replace
from pathlib import Path

import numpy as np

from . import dataio, featurize, hypo, metrics, net, render, train as train_mod
from .config import PipelineConfig, load_config
from .geom import PointCloud, RigidTransform, voxel_downsample
from .objmodel import load_object_bundle
from .train import HypothesisSample, TrainConfig

MODEL_PREP_SEED = 0  # object clouds must be identical across all commands

# stream tags for per-frame rng derivation
_STREAM_GEN, _STREAM_HYPO, _STREAM_SCORE = 1, 2, 4


class DataError(Exception):
    """Missing or inconsistent input data (exit code 2)."""


# set by tests to record every model file the pipeline touches
file_audit = None


def _audit(path):
    if file_audit is not None:
        file_audit.append(str(path))


def _rng(seed: int, *key) -> np.random.Generator:
    return np.random.default_rng(np.random.SeedSequence([int(seed)] + [int(k) for k in key]))


def _load_models(models_dir, ids) -> dict:
    models_dir = Path(models_dir)
    out = {}
    for oid in sorted(set(int(i) for i in ids)):
        meta = models_dir / f"obj_{oid:06d}.json"
        if not meta.exists():
            raise DataError(f"model metadata not found: {meta}")
        out[oid] = load_object_bundle(meta, seed=MODEL_PREP_SEED, audit=_audit)
    return out


def _model_ids_present(models_dir) -> list:
    return sorted(int(p.stem.split("_")[1]) for p in Path(models_dir).glob("obj_*.json"))


def _scene_reader(cfg: PipelineConfig) -> dataio.SceneReader:
    dirs = dataio.scene_dirs(cfg.dataset)
    if not dirs:
        raise DataError(f"no scenes under {cfg.dataset}; run gen-data first")
    return dataio.SceneReader(dirs[0])


def _targets(cfg: PipelineConfig, reader, object_ids) -> list:
    """(frame, obj_id, gt_pose) for sufficiently visible ground-truth objects."""
    targets = []
    wanted = set(object_ids)
    for frame in reader.frames():
        for entry in reader.ground_truth(frame).entries:
            if entry.object_id in wanted and entry.visible_fraction >= cfg.hypo.min_visib:
                targets.append((frame, entry.object_id, entry.pose))
    return targets


def _parallel_map(fn, items, threads):
    if threads <= 1:
        return [fn(it) for it in items]
    with ThreadPoolExecutor(max_workers=threads) as pool:
        return list(pool.map(fn, items))


# ---------------------------------------------------------------------------
# gen-data


def cmd_gen_data(cfg: PipelineConfig) -> None:
    model_ids = _model_ids_present(cfg.models)
    if not model_ids:
        raise DataError(f"no obj_*.json models under {cfg.models}")
    train_ids = [i for i in cfg.train_objects if i in model_ids]
    test_ids = [i for i in cfg.test_objects if i in model_ids]
    if not train_ids or not test_ids:
        raise DataError("both train and test object splits must be nonempty")
    if set(train_ids) & set(test_ids):
        raise DataError("train/test object splits overlap")

    models = _load_models(cfg.models, train_ids + test_ids)
    library = [models[oid] for oid in sorted(models)]

    scene_dir = Path(cfg.dataset) / "scenes" / "000000"
    writer = dataio.SceneWriter(scene_dir)
    for frame in range(cfg.n_scenes):
        obs, gt = render.synthesize_scene(library, _rng(cfg.seed, _STREAM_GEN, frame), cfg.scene)
        writer.add_frame(frame, obs, gt)
    writer.finalize()

    dataio.write_manifest(cfg.dataset, "train", train_ids)
    dataio.write_manifest(cfg.dataset, "test", test_ids)
    print(f"gen-data: wrote {cfg.n_scenes} frames to {scene_dir}, "
          f"train objects {train_ids}, test objects {test_ids}")


# ---------------------------------------------------------------------------
# hypo


def _ppf_scene_cloud(obs, model, cfg: PipelineConfig, rng) -> PointCloud:
    leaf = cfg.hypo.scene_sd * model.diameter
    cloud = render.observation_to_cloud(obs, leaf, max_points=cfg.hypo.max_scene_points, rng=rng)
    if cfg.hypo.max_depth > 0 and len(cloud):
        keep = cloud.positions[:, 2] <= cfg.hypo.max_depth
        cloud = PointCloud(cloud.positions[keep], cloud.normals[keep], cloud.colors_hsv[keep])
    return cloud


def _hypotheses_for_target(cfg, reader, models, tables, frame, obj_id, gt_pose):
    try:
        obs = reader.load_observation(frame)
    except FileNotFoundError as e:
        print(f"warning: frame {frame} skipped ({e})", file=sys.stderr)
        return []
    model, mesh = models[obj_id]
    rng = _rng(cfg.seed, _STREAM_HYPO, frame, obj_id)
    cloud = _ppf_scene_cloud(obs, model, cfg, rng)
    raw = hypo.ppf_vote(
        cloud, tables[obj_id], cfg.hypo.ref_rate, rng,
        min_votes=cfg.hypo.min_votes, max_refs=cfg.hypo.max_refs,
    )
    hyps = hypo.cluster_poses(
        raw,
        trans_thresh=cfg.hypo.cluster_trans_frac * model.diameter,
        rot_thresh=np.radians(cfg.hypo.cluster_rot_deg),
        k=cfg.hypo.top_k,
    )
    if cfg.hypo.oriented_pairs:
        hyps.extend(_oriented_pair_hypotheses(obs, model, rng))
    if cfg.inject_gt:
        hyps.append(hypo.PoseHypothesis(transform=gt_pose, source="gt", prior_score=0.0))

    records = []
    for h in hyps:
        rec = {"frame": frame, "obj_id": obj_id, "source": h.source, "score": float(h.prior_score)}
        rec.update(dataio.pose_to_record(h.transform))
        records.append(rec)
    return records


def _oriented_pair_hypotheses(obs, model, rng, max_hyps: int = 50) -> list:
    """Toy oriented-feature correspondences (local HSV histogram descriptors)."""
    obs_feats = _observation_features(obs, spacing=10)
    model_feats = _model_features(model, rng)
    if not obs_feats or not model_feats:
        return []
    matches = hypo.match_descriptors(
        np.stack([f.descriptor for f in obs_feats]),
        np.stack([f.descriptor for f in model_feats]),
    )
    out = []
    for oi, mi in matches[:max_hyps]:
        h = hypo.pose_from_oriented_pair(model_feats[mi], obs_feats[oi], obs.intrinsics, obs.depth)
        if h is not None:
            out.append(h)
    return out


def _hsv_histogram(hsv_rows: np.ndarray, bins: int = 3) -> np.ndarray:
    hist, _ = np.histogramdd(hsv_rows, bins=(bins, bins, bins), range=((0, 1), (0, 1), (0, 1)))
    flat = hist.reshape(-1)
    total = flat.sum()
    return flat / total if total > 0 else flat


def _observation_features(obs, spacing: int, window: int = 7) -> list:
    h, w = obs.depth.shape
    gy, gx = np.gradient(obs.hsv[:, :, 2])
    feats = []
    half = window // 2
    for row in range(half + 1, h - half - 1, spacing):
        for col in range(half + 1, w - half - 1, spacing):
            if obs.depth[row, col] <= 0:
                continue
            normal = obs.normals[row, col]
            if np.dot(normal, normal) < 0.25:
                continue
            grad = np.array([gx[row, col], gy[row, col], 0.0])
            # lift the image-gradient direction onto the tangent plane
            tang = grad - np.dot(grad, normal) * normal
            n_t = np.linalg.norm(tang)
            if n_t < 1e-9:
                continue
            patch = obs.hsv[row - half : row + half + 1, col - half : col + half + 1].reshape(-1, 3)
            feats.append(
                hypo.OrientedFeature(
                    position=[col + 0.5, row + 0.5, 0.0], normal=normal, orientation=tang / n_t,
                    descriptor=_hsv_histogram(patch),
                )
            )
    return feats


def _model_features(model, rng, count: int = 100, radius_frac: float = 0.12) -> list:
    cloud = model.cloud
    n = len(cloud)
    idx = rng.choice(n, size=min(count, n), replace=False)
    radius = radius_frac * model.diameter
    from scipy.spatial import cKDTree

    tree = cKDTree(cloud.positions)
    feats = []
    for i in idx:
        nbrs = tree.query_ball_point(cloud.positions[i], radius)
        if len(nbrs) < 4:
            continue
        normal = cloud.normals[i]
        # dominant direction of local value variation, projected to the tangent plane
        rel = cloud.positions[nbrs] - cloud.positions[i]
        vals = cloud.colors_hsv[nbrs, 2] - cloud.colors_hsv[nbrs, 2].mean()
        grad = rel.T @ vals
        tang = grad - np.dot(grad, normal) * normal
        n_t = np.linalg.norm(tang)
        if n_t < 1e-9:
            helper = np.array([1.0, 0.0, 0.0]) if abs(normal[0]) < 0.9 else np.array([0.0, 1.0, 0.0])
            tang = np.cross(normal, helper)
            n_t = np.linalg.norm(tang)
        feats.append(
            hypo.OrientedFeature(
                position=cloud.positions[i], normal=normal, orientation=tang / n_t,
                descriptor=_hsv_histogram(cloud.colors_hsv[nbrs]),
            )
        )
    return feats


def cmd_hypotheses(cfg: PipelineConfig) -> Path:
    reader = _scene_reader(cfg)
    train_ids = dataio.read_manifest(cfg.dataset, "train")
    test_ids = dataio.read_manifest(cfg.dataset, "test")
    models = _load_models(cfg.models, train_ids + test_ids)

    tables = {}
    for oid, (model, _) in models.items():
        leaf = cfg.hypo.model_sd * model.diameter
        cloud = voxel_downsample(model.cloud, leaf) if leaf > 0 else model.cloud
        tables[oid] = hypo.build_ppf_table(
            model, cfg.hypo.ppf_dist_step_frac, np.radians(cfg.hypo.ppf_angle_step_deg), cloud=cloud
        )

    targets = _targets(cfg, reader, models.keys())
    results = _parallel_map(
        lambda t: _hypotheses_for_target(cfg, reader, models, tables, *t), targets, cfg.threads
    )
    records = [rec for group in sorted(zip([t[:2] for t in targets], results)) for rec in group[1]]

    out_path = Path(cfg.output) / "hypotheses.jsonl"
    dataio.write_jsonl(out_path, records)
    print(f"hypo: wrote {len(records)} hypotheses for {len(targets)} targets to {out_path}")
    return out_path


# ---------------------------------------------------------------------------
# train


def _grouped_hypotheses(cfg: PipelineConfig, allowed_ids) -> dict:
    path = Path(cfg.output) / "hypotheses.jsonl"
    if not path.exists():
        raise DataError(f"hypotheses file not found: {path}; run hypo first")
    groups = {}
    allowed = set(int(i) for i in allowed_ids)
    for rec in dataio.read_jsonl(path):
        if int(rec["obj_id"]) in allowed:
            key = (int(rec["frame"]), int(rec["obj_id"]))
            groups.setdefault(key, []).append(
                hypo.PoseHypothesis(
                    transform=dataio.pose_from_record(rec),
                    source=rec.get("source", "ppf"),
                    prior_score=float(rec.get("score", 0.0)),
                )
            )
    return groups


_SOURCE_CODES = {"ppf": 0.0, "pair": 1.0, "gt": 2.0}
_SOURCE_NAMES = {v: k for k, v in _SOURCE_CODES.items()}


def _build_sample_cache(cfg, reader, models, frame, obj_id, hyps, path: Path) -> None:
    obs = reader.load_observation(frame)
    model, _ = models[obj_id]
    gt_pose = next(
        e.pose for e in reader.ground_truth(frame).entries if e.object_id == obj_id
    )
    errors = train_mod.hypothesis_errors(hyps, gt_pose, model)

    tensors = {
        "meta": np.array([len(hyps), obs.hsv[:, :, 2].mean(), model.cloud.colors_hsv[:, 2].mean()]),
        "eps": np.array([e.eps for e in errors]),
    }
    coord_sets = []
    usable = []
    for i, h in enumerate(hyps):
        proj = featurize.project_model(model, h, obs.intrinsics, cfg.featurize.occlusion_filter)
        samples = featurize.sample_alignment(proj, obs)
        uvn = featurize.normalize_coords(samples.uv)
        tensors[f"h{i:03d}.uvn"] = uvn
        tensors[f"h{i:03d}.dd"] = samples.dd
        tensors[f"h{i:03d}.ncos"] = samples.ncos
        tensors[f"h{i:03d}.mhsv"] = samples.model_hsv
        tensors[f"h{i:03d}.ohsv"] = samples.obs_hsv
        tensors[f"h{i:03d}.src"] = np.array([_SOURCE_CODES.get(h.source, 0.0)])
        if len(samples) >= cfg.featurize.n_min:
            coord_sets.append(uvn.astype(np.float64))
            usable.append(i)

    if usable:
        plan = net.build_group_plan(coord_sets)
        tensors["plan.idx"] = np.array(usable, dtype=np.float32)
        tensors["plan.g1c"] = plan.sa1_centroids
        tensors["plan.g1g"] = plan.sa1_groups
        tensors["plan.g2c"] = plan.sa2_centroids
        tensors["plan.g2g"] = plan.sa2_groups
    path.write_bytes(net.write_container("featcache", tensors))


def _sample_from_cache(cfg, frame, obj_id, path: Path) -> HypothesisSample | None:
    tag, tensors = net.read_container(path.read_bytes())
    if tag != "featcache":
        raise DataError(f"{path} is not a feature cache")
    n_hyps = int(tensors["meta"][0])
    obs_pivot = float(tensors["meta"][1])
    model_pivot = float(tensors["meta"][2])
    eps = tensors["eps"].astype(np.float64)

    hyps = []
    for i in range(n_hyps):
        hyps.append(
            {
                "uvn": tensors[f"h{i:03d}.uvn"],
                "dd": tensors[f"h{i:03d}.dd"],
                "ncos": tensors[f"h{i:03d}.ncos"],
                "mhsv": tensors[f"h{i:03d}.mhsv"].astype(np.float64),
                "ohsv": tensors[f"h{i:03d}.ohsv"].astype(np.float64),
            }
        )

    plan = None
    plan_idx = None
    if "plan.g1c" in tensors:
        plan = net.GroupPlan(
            tensors["plan.g1c"].astype(np.int32),
            tensors["plan.g1g"].astype(np.int32),
            tensors["plan.g2c"].astype(np.int32),
            tensors["plan.g2g"].astype(np.int32),
        )
        plan_idx = tensors["plan.idx"].astype(np.int64)

    def make_sets(jp_obs, jp_joint):
        sets = []
        for h in hyps:
            mh, oh = h["mhsv"], h["ohsv"]
            if jp_obs is not None:
                oh = train_mod.apply_jitter_hsv(oh, jp_obs, value_pivot=obs_pivot)
            if jp_joint is not None:
                # the obs-side pivot tracks the additive brightness of the first stage
                shifted = obs_pivot + (jp_obs.brightness if jp_obs is not None else 0.0)
                oh = train_mod.apply_jitter_hsv(oh, jp_joint, value_pivot=shifted)
                mh = train_mod.apply_jitter_hsv(mh, jp_joint, value_pivot=model_pivot)
            n = len(h["dd"])
            data = np.empty((n, 7), dtype=np.float32)
            data[:, 0:2] = h["uvn"]
            data[:, 2] = ((mh[:, 0] - oh[:, 0] + 0.5) % 1.0) - 0.5
            data[:, 3] = mh[:, 1] - oh[:, 1]
            data[:, 4] = mh[:, 2] - oh[:, 2]
            data[:, 5] = h["dd"]
            data[:, 6] = h["ncos"]
            sets.append(data)
        return sets

    # the cached plan covers only usable (>= n_min) hypotheses; fit filters by
    # the same rule, so expand the plan back onto the full index range
    full_plan = None
    if plan is not None:
        k1 = plan.sa1_centroids.shape[1]
        n1 = plan.sa1_groups.shape[2]
        k2 = plan.sa2_centroids.shape[1]
        g1c = np.zeros((n_hyps, k1), dtype=np.int32)
        g1g = np.zeros((n_hyps, k1, n1), dtype=np.int32)
        g2c = np.zeros((n_hyps, k2), dtype=np.int32)
        g2g = np.zeros((n_hyps, k2, plan.sa2_groups.shape[2]), dtype=np.int32)
        g1c[plan_idx] = plan.sa1_centroids
        g1g[plan_idx] = plan.sa1_groups
        g2c[plan_idx] = plan.sa2_centroids
        g2g[plan_idx] = plan.sa2_groups
        full_plan = net.GroupPlan(g1c, g1g, g2c, g2g)

    return HypothesisSample(frame=frame, obj_id=obj_id, eps=eps, make_sets=make_sets, plan=full_plan)


def cmd_train(cfg: PipelineConfig) -> Path:
    reader = _scene_reader(cfg)
    train_ids = dataio.read_manifest(cfg.dataset, "train")
    models = _load_models(cfg.models, train_ids)
    groups = _grouped_hypotheses(cfg, train_ids)
    if not groups:
        raise DataError("no hypotheses for train-manifest objects")

    cache_dir = Path(cfg.output) / "feature_cache"
    cache_dir.mkdir(parents=True, exist_ok=True)
    samples = []
    for (frame, obj_id), hyps in sorted(groups.items()):
        path = cache_dir / f"{frame:06d}_{obj_id:02d}.zphw"
        if not path.exists():
            _build_sample_cache(cfg, reader, models, frame, obj_id, hyps, path)
        sample = _sample_from_cache(cfg, frame, obj_id, path)
        if sample is not None:
            samples.append(sample)

    weights_dir = Path(cfg.output) / "weights"
    # the run seed drives training; n_min must match the cache-build filter
    train_cfg = replace(cfg.train, seed=cfg.seed, n_min=cfg.featurize.n_min)
    best, log_rows = train_mod.fit(
        samples,
        cfg.arch,
        train_cfg,
        channels=tuple(cfg.channels),
        checkpoint_dir=weights_dir,
        progress=lambda e, tl, vl, lr: print(f"epoch {e}: train {tl:.4f} val {vl:.4f} lr {lr:g}"),
    )
    train_mod.write_training_log(weights_dir / "log.csv", log_rows)
    print(f"train: {len(samples)} samples, best checkpoint at {weights_dir / 'best.zphw'}")
    return weights_dir / "best.zphw"


# ---------------------------------------------------------------------------
# score


def _score_target(cfg, reader, models, weights, groups, frame, obj_id):
    key = (frame, obj_id)
    hyps = groups.get(key, [])
    if not cfg.inject_gt:
        hyps = [h for h in hyps if h.source != "gt"]
    if not hyps:
        return {"frame": frame, "obj_id": obj_id, "status": "none"}
    model, _ = models[obj_id]
    obs = reader.load_observation(frame)

    if cfg.score.selector == "prior":
        ppf_only = [h for h in hyps if h.source == "ppf"] or hyps
        best_i = int(np.argmax([h.prior_score for h in ppf_only]))
        winner = ppf_only[best_i]
        win_score = winner.prior_score
    else:
        sets = featurize.featurize_batch(model, hyps, obs, cfg.featurize.occlusion_filter)
        scores = train_mod.score_hypotheses(weights, sets, n_min=cfg.featurize.n_min)
        if not np.isfinite(scores).any():
            return {"frame": frame, "obj_id": obj_id, "status": "none"}
        best_i = int(np.argmax(scores))
        winner = hyps[best_i]
        win_score = float(scores[best_i])

    refined = winner
    if cfg.score.icp:
        rng = _rng(cfg.seed, _STREAM_SCORE, frame, obj_id)
        leaf = cfg.hypo.scene_sd * model.diameter
        cloud = render.observation_to_cloud(obs, leaf, max_points=cfg.hypo.max_scene_points, rng=rng)
        if len(cloud):
            center = winner.transform.apply(model.cloud.positions.mean(axis=0))
            near = np.linalg.norm(cloud.positions - center, axis=1) <= 1.5 * model.diameter
            cropped = PointCloud(cloud.positions[near], cloud.normals[near], cloud.colors_hsv[near])
            result = hypo.icp_refine(
                model.cloud, cropped, winner, max_iter=cfg.score.icp_max_iter, tol=cfg.score.icp_tol
            )
            refined = result.pose

    rec = {
        "frame": frame, "obj_id": obj_id, "status": "ok",
        "score": win_score, "source": winner.source,
    }
    rec.update(dataio.pose_to_record(refined.transform))
    raw = dataio.pose_to_record(winner.transform)
    rec["R_raw"] = raw["R"]
    rec["t_mm_raw"] = raw["t_mm"]
    return rec


def cmd_score(cfg: PipelineConfig) -> Path:
    reader = _scene_reader(cfg)
    if cfg.score.objects == "all":
        ids = dataio.read_manifest(cfg.dataset, "train") + dataio.read_manifest(cfg.dataset, "test")
    else:
        ids = dataio.read_manifest(cfg.dataset, cfg.score.objects)
    models = _load_models(cfg.models, ids)

    weights_path = Path(cfg.output) / "weights" / "best.zphw"
    weights = None
    if cfg.score.selector == "net":
        if not weights_path.exists():
            raise DataError(f"weights not found: {weights_path}; run train first")
        weights = net.load_weights(weights_path.read_bytes())

    groups = _grouped_hypotheses(cfg, ids)
    targets = _targets(cfg, reader, ids)
    records = _parallel_map(
        lambda t: _score_target(cfg, reader, models, weights, groups, t[0], t[1]), targets, cfg.threads
    )
    records.sort(key=lambda r: (r["frame"], r["obj_id"]))
    out_path = Path(cfg.output) / "estimates.jsonl"
    dataio.write_jsonl(out_path, records)
    n_ok = sum(1 for r in records if r["status"] == "ok")
    print(f"score: {n_ok}/{len(records)} estimates to {out_path}")
    return out_path


# ---------------------------------------------------------------------------
# eval


def _eval_target(cfg, reader, models, est_by_key, frame, obj_id, gt_pose, overlay_dir):
    model, mesh = models[obj_id]
    th = cfg.thresholds
    rec = est_by_key.get((frame, obj_id))
    if rec is None or rec.get("status") != "ok":
        return metrics.EvalRecord(
            frame=frame, obj_id=obj_id,
            e_vsd=tuple(1.0 for _ in th.vsd_taus), e_mssd=np.inf, e_mspd=np.inf,
            gt_pose=gt_pose, est_pose=None, vsd_valid=False,
        )
    est_pose = dataio.pose_from_record(rec)
    obs = reader.load_observation(frame)
    k = obs.intrinsics

    d_est = render.rasterize([(mesh, est_pose)], k).object_depths[0]
    d_gt = render.rasterize([(mesh, gt_pose)], k).object_depths[0]
    e_vsd = []
    valid = True
    for tau in th.vsd_taus:
        e, ok = metrics.vsd(d_est, d_gt, obs.depth, tau * model.diameter, th.delta)
        e_vsd.append(e)
        valid = valid and ok

    if overlay_dir is not None:
        _write_overlay(overlay_dir / f"{frame:06d}_{obj_id:02d}.png", obs, mesh, est_pose, k)

    return metrics.EvalRecord(
        frame=frame, obj_id=obj_id, e_vsd=tuple(e_vsd),
        e_mssd=metrics.mssd(est_pose, gt_pose, model),
        e_mspd=metrics.mspd(est_pose, gt_pose, model, k),
        gt_pose=gt_pose, est_pose=est_pose, vsd_valid=valid,
    )


def _write_overlay(path, obs, mesh, pose, k) -> None:
    res = render.rasterize([(mesh, pose)], k, light=np.array([0.3, 0.7, 0.6]))
    covered = res.object_depths[0] > 0
    out = obs.rgb.copy()
    out[covered] = 0.45 * out[covered] + 0.55 * res.observation.rgb[covered]
    dataio.write_rgb_png(path, out)


def cmd_eval(cfg: PipelineConfig) -> dict:
    reader = _scene_reader(cfg)
    est_path = Path(cfg.output) / "estimates.jsonl"
    if not est_path.exists():
        raise DataError(f"estimates not found: {est_path}; run score first")
    est_records = dataio.read_jsonl(est_path)
    est_by_key = {(int(r["frame"]), int(r["obj_id"])): r for r in est_records}

    ids = sorted(set(int(r["obj_id"]) for r in est_records))
    models = _load_models(cfg.models, ids)
    targets = _targets(cfg, reader, ids)
    target_keys = {(f, o) for f, o, _ in targets}
    for key in est_by_key:
        if key not in target_keys:
            print(f"warning: estimate for unknown target frame={key[0]} obj={key[1]}", file=sys.stderr)
    for key in sorted(target_keys - set(est_by_key)):
        print(f"warning: no estimate for target frame={key[0]} obj={key[1]}", file=sys.stderr)

    overlay_dir = Path(cfg.output) / "overlays"
    overlay_dir.mkdir(parents=True, exist_ok=True)
    records = _parallel_map(
        lambda t: _eval_target(cfg, reader, models, est_by_key, t[0], t[1], t[2], overlay_dir),
        targets,
        cfg.threads,
    )

    rows = metrics.records_to_csv_rows(records, cfg.thresholds)
    csv_path = Path(cfg.output) / "results.csv"
    with csv_path.open("w") as fh:
        for row in rows:
            fh.write(",".join(str(c) for c in row) + "\n")

    diameters = {oid: models[oid][0].diameter for oid in models}
    summary = metrics.average_recall(records, cfg.thresholds, diameters, cfg.scene.width)
    summary_path = Path(cfg.output) / "summary.json"
    summary_path.write_text(json.dumps(summary, sort_keys=True))
    print("eval:", json.dumps(summary, sort_keys=True))
    return summary


# ---------------------------------------------------------------------------
# entry point


def _apply_flag_overrides(cfg: PipelineConfig, args) -> PipelineConfig:
    if args.seed is not None:
        cfg = replace(cfg, seed=args.seed)
    if args.threads is not None:
        cfg = replace(cfg, threads=args.threads)
    if args.icp is not None:
        cfg = replace(cfg, score=replace(cfg.score, icp=args.icp == "on"))
    if args.inject_gt is not None:
        cfg = replace(cfg, inject_gt=args.inject_gt == "on")
    if args.arch is not None:
        cfg = replace(cfg, arch=args.arch)
    if args.occlusion_filter is not None:
        cfg = replace(cfg, featurize=replace(cfg.featurize, occlusion_filter=args.occlusion_filter))
    return cfg


def _build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="hyposcore", description=__doc__)
    sub = ap.add_subparsers(dest="command", required=True)
    for name in ("gen-data", "hypo", "train", "score", "eval", "all"):
        p = sub.add_parser(name)
        p.add_argument("--config", required=True)
        p.add_argument("--seed", type=int, default=None)
        p.add_argument("--threads", type=int, default=None)
        p.add_argument("--icp", choices=("on", "off"), default=None)
        p.add_argument("--inject-gt", dest="inject_gt", choices=("on", "off"), default=None)
        p.add_argument("--arch", choices=("pointnetpp", "pointnet"), default=None)
        p.add_argument("--occlusion-filter", dest="occlusion_filter", choices=("backface", "none"), default=None)
    return ap


def run(argv=None) -> int:
    parser = _build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as e:
        return 0 if e.code == 0 else 1

    try:
        cfg = _apply_flag_overrides(load_config(args.config), args)
        if args.command == "gen-data":
            cmd_gen_data(cfg)
        elif args.command == "hypo":
            cmd_hypotheses(cfg)
        elif args.command == "train":
            cmd_train(cfg)
        elif args.command == "score":
            cmd_score(cfg)
        elif args.command == "eval":
            cmd_eval(cfg)
        elif args.command == "all":
            cmd_gen_data(cfg)
            cmd_hypotheses(cfg)
            cmd_train(cfg)
            cmd_score(cfg)
            cmd_eval(cfg)
        return 0
    except (DataError, FileNotFoundError) as e:
        print(f"data error: {e}", file=sys.stderr)
        return 2
    except (ValueError, ArithmeticError, np.linalg.LinAlgError) as e:
        print(f"numeric failure: {e}", file=sys.stderr)
        return 3


def main() -> None:
    sys.exit(run())


if __name__ == "__main__":
    main()
