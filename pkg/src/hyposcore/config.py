"""Pipeline configuration: one flat INI file mirroring the module configs.

Every numeric default of the pipeline is spelled out in the shipped default
config (see write_default_config), so a config file is the single source of
truth for a run.
"""

from __future__ import annotations

import configparser
from dataclasses import dataclass, field, fields, replace
from pathlib import Path

import numpy as np

from .metrics import MetricThresholds
from .render import SceneConfig
from .train import TrainConfig


@dataclass(frozen=True)
class HypoConfig:
    ppf_dist_step_frac: float = 0.05
    ppf_angle_step_deg: float = 12.0
    scene_sd: float = 0.03          # scene sampling distance, fraction of diameter
    model_sd: float = 0.03          # model sampling distance for the PPF table
    ref_rate: float = 0.2
    max_refs: int = 2000            # cap on sampled reference points
    max_scene_points: int = 200000
    max_depth: float = 1.05         # workspace crop for the PPF scene cloud (0 = off)
    min_votes: int = 3
    cluster_trans_frac: float = 0.1
    cluster_rot_deg: float = 12.0
    top_k: int = 100
    oriented_pairs: bool = False
    min_visib: float = 0.1


@dataclass(frozen=True)
class FeaturizeConfig:
    occlusion_filter: str = "backface"
    n_min: int = 32


@dataclass(frozen=True)
class ScoreConfig:
    icp: bool = True
    icp_max_iter: int = 30
    icp_tol: float = 1e-6
    selector: str = "net"  # "net" (scored argmax) or "prior" (top-vote baseline)
    objects: str = "test"  # which manifest the targets come from: test|train|all


@dataclass(frozen=True)
class PipelineConfig:
    dataset: str = "data"
    models: str = "models"
    output: str = "out"
    n_scenes: int = 40
    train_objects: tuple = (2, 4, 5, 7)
    test_objects: tuple = (1, 3, 6, 8)
    scene: SceneConfig = field(default_factory=SceneConfig)
    hypo: HypoConfig = field(default_factory=HypoConfig)
    featurize: FeaturizeConfig = field(default_factory=FeaturizeConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    arch: str = "pointnetpp"
    channels: tuple = ("u_norm", "v_norm", "dh", "ds", "dv", "dd", "ncos")
    inject_gt: bool = True
    score: ScoreConfig = field(default_factory=ScoreConfig)
    thresholds: MetricThresholds = field(default_factory=MetricThresholds)
    seed: int = 0
    threads: int = 1


def _format_value(v) -> str:
    if isinstance(v, bool):
        return "yes" if v else "no"
    if isinstance(v, (tuple, list)):
        return ",".join(_format_value(x) for x in v)
    return str(v)


def _parse_like(text: str, template):
    if isinstance(template, bool):
        return text.strip().lower() in ("1", "yes", "true", "on")
    if isinstance(template, int):
        return int(text)
    if isinstance(template, float):
        return float(text)
    if isinstance(template, tuple):
        items = [t.strip() for t in text.split(",") if t.strip()]
        if not items:
            return ()
        inner = template[0] if template else 0.0
        return tuple(_parse_like(t, inner) for t in items)
    return text.strip()


def _dataclass_section(cp, section: str, obj):
    """Update a frozen dataclass from an INI section, key per field."""
    if not cp.has_section(section):
        return obj
    updates = {}
    for f in fields(obj):
        if cp.has_option(section, f.name):
            updates[f.name] = _parse_like(cp.get(section, f.name), getattr(obj, f.name))
    return replace(obj, **updates)


def load_config(path) -> PipelineConfig:
    cp = configparser.ConfigParser()
    read = cp.read(str(path))
    if not read:
        raise FileNotFoundError(f"config file not found: {path}")
    cfg = PipelineConfig()

    updates = {}
    if cp.has_section("paths"):
        for key in ("dataset", "models", "output"):
            if cp.has_option("paths", key):
                updates[key] = cp.get("paths", key)
    for key in ("n_scenes", "train_objects", "test_objects", "arch", "channels", "inject_gt", "seed", "threads"):
        for section in ("run", "split", "scene", "train"):
            if cp.has_option(section, key):
                updates[key] = _parse_like(cp.get(section, key), getattr(cfg, key))
                break
    cfg = replace(cfg, **updates)

    cfg = replace(
        cfg,
        scene=_dataclass_section(cp, "scene", cfg.scene),
        hypo=_dataclass_section(cp, "hypotheses", cfg.hypo),
        featurize=_dataclass_section(cp, "featurize", cfg.featurize),
        train=_dataclass_section(cp, "train", cfg.train),
        score=_dataclass_section(cp, "score", cfg.score),
        thresholds=_dataclass_section(cp, "metrics", cfg.thresholds),
    )
    return cfg


def write_default_config(path, **overrides) -> None:
    cfg = replace(PipelineConfig(), **overrides) if overrides else PipelineConfig()
    write_config(path, cfg)


def write_config(path, cfg: PipelineConfig) -> None:
    cp = configparser.ConfigParser()
    cp["paths"] = {"dataset": cfg.dataset, "models": cfg.models, "output": cfg.output}
    cp["run"] = {"seed": _format_value(cfg.seed), "threads": _format_value(cfg.threads)}
    cp["split"] = {
        "train_objects": _format_value(cfg.train_objects),
        "test_objects": _format_value(cfg.test_objects),
    }
    scene = {f.name: _format_value(getattr(cfg.scene, f.name)) for f in fields(cfg.scene)}
    scene["n_scenes"] = _format_value(cfg.n_scenes)
    cp["scene"] = scene
    cp["hypotheses"] = {f.name: _format_value(getattr(cfg.hypo, f.name)) for f in fields(cfg.hypo)}
    cp["featurize"] = {f.name: _format_value(getattr(cfg.featurize, f.name)) for f in fields(cfg.featurize)}
    tr = {f.name: _format_value(getattr(cfg.train, f.name)) for f in fields(cfg.train)}
    tr.pop("seed", None)  # training derives its seed from [run] seed
    tr["arch"] = cfg.arch
    tr["channels"] = _format_value(cfg.channels)
    tr["inject_gt"] = _format_value(cfg.inject_gt)
    cp["train"] = tr
    cp["score"] = {f.name: _format_value(getattr(cfg.score, f.name)) for f in fields(cfg.score)}
    cp["metrics"] = {f.name: _format_value(getattr(cfg.thresholds, f.name)) for f in fields(cfg.thresholds)}
    with Path(path).open("w") as fh:
        cp.write(fh)
