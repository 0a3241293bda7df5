"""Dataset directory layout, hypothesis/estimate JSONL files, and manifests.

Layout (BOP-like):

    <root>/models/obj_XXXXXX.{ply,json}
    <root>/scenes/<scene>/rgb/<frame>.png          8-bit RGB
    <root>/scenes/<scene>/depth/<frame>.png        16-bit, 0.1 mm units
    <root>/scenes/<scene>/scene_camera.json        {"<frame>": {fx,fy,cx,cy,depth_scale}}
    <root>/scenes/<scene>/scene_gt.json            {"<frame>": [{obj_id,R,t}, ...]}
    <root>/train.json, <root>/test.json            {"objects": [...]} object split
"""

from __future__ import annotations

import json
from pathlib import Path

import numpy as np
from PIL import Image

from .geom import CameraIntrinsics, RigidTransform
from .render import GroundTruthEntry, Observation, SceneGroundTruth, observation_from_rgbd

DEPTH_SCALE = 0.0001  # meters per stored unit (0.1 mm)


def write_rgb_png(path, rgb: np.ndarray) -> None:
    Image.fromarray(np.clip(np.rint(rgb * 255.0), 0, 255).astype(np.uint8), mode="RGB").save(path)


def read_rgb_png(path) -> np.ndarray:
    return np.asarray(Image.open(path).convert("RGB"), dtype=np.float64) / 255.0


def write_depth_png(path, depth: np.ndarray) -> None:
    units = np.clip(np.rint(depth / DEPTH_SCALE), 0, 65535).astype(np.uint16)
    Image.fromarray(units).save(path)


def read_depth_png(path, depth_scale: float = DEPTH_SCALE) -> np.ndarray:
    arr = np.asarray(Image.open(path), dtype=np.float64)
    return arr * depth_scale


class SceneWriter:
    """Accumulates frames of one scene directory, then writes the JSON indexes."""

    def __init__(self, scene_dir):
        self.scene_dir = Path(scene_dir)
        (self.scene_dir / "rgb").mkdir(parents=True, exist_ok=True)
        (self.scene_dir / "depth").mkdir(parents=True, exist_ok=True)
        self.cameras = {}
        self.gt = {}

    def add_frame(self, frame: int, obs: Observation, gt: SceneGroundTruth) -> None:
        name = f"{frame:06d}.png"
        write_rgb_png(self.scene_dir / "rgb" / name, obs.rgb)
        write_depth_png(self.scene_dir / "depth" / name, obs.depth)
        k = obs.intrinsics
        self.cameras[str(frame)] = {
            "fx": k.fx, "fy": k.fy, "cx": k.cx, "cy": k.cy, "depth_scale": DEPTH_SCALE,
        }
        self.gt[str(frame)] = [
            {
                "obj_id": e.object_id,
                "R": [float(x) for x in e.pose.rotation.reshape(-1)],
                "t": [float(x * 1000.0) for x in e.pose.translation],
                "visib_fract": round(float(e.visible_fraction), 6),
            }
            for e in gt.entries
        ]

    def finalize(self) -> None:
        (self.scene_dir / "scene_camera.json").write_text(json.dumps(self.cameras, indent=0, sort_keys=True))
        (self.scene_dir / "scene_gt.json").write_text(json.dumps(self.gt, indent=0, sort_keys=True))


class SceneReader:
    def __init__(self, scene_dir):
        self.scene_dir = Path(scene_dir)
        self.cameras = json.loads((self.scene_dir / "scene_camera.json").read_text())
        self.gt_raw = json.loads((self.scene_dir / "scene_gt.json").read_text())

    def frames(self) -> list:
        return sorted(int(f) for f in self.cameras)

    def intrinsics(self, frame: int, width: int, height: int) -> CameraIntrinsics:
        c = self.cameras[str(frame)]
        return CameraIntrinsics(fx=c["fx"], fy=c["fy"], cx=c["cx"], cy=c["cy"], width=width, height=height)

    def load_observation(self, frame: int) -> Observation:
        name = f"{frame:06d}.png"
        rgb = read_rgb_png(self.scene_dir / "rgb" / name)
        cam = self.cameras[str(frame)]
        depth = read_depth_png(self.scene_dir / "depth" / name, cam.get("depth_scale", DEPTH_SCALE))
        h, w = depth.shape
        return observation_from_rgbd(rgb, depth, self.intrinsics(frame, w, h))

    def ground_truth(self, frame: int) -> SceneGroundTruth:
        entries = []
        for g in self.gt_raw.get(str(frame), []):
            pose = RigidTransform(np.asarray(g["R"]).reshape(3, 3), np.asarray(g["t"]) / 1000.0)
            entries.append(
                GroundTruthEntry(
                    object_id=int(g["obj_id"]), pose=pose, visible_fraction=float(g.get("visib_fract", 1.0))
                )
            )
        return SceneGroundTruth(entries)


def scene_dirs(dataset_root) -> list:
    root = Path(dataset_root) / "scenes"
    if not root.is_dir():
        return []
    return sorted(p for p in root.iterdir() if p.is_dir())


def write_manifest(dataset_root, name: str, object_ids) -> None:
    path = Path(dataset_root) / f"{name}.json"
    path.write_text(json.dumps({"objects": sorted(int(i) for i in object_ids)}, indent=0))


def read_manifest(dataset_root, name: str) -> list:
    return json.loads((Path(dataset_root) / f"{name}.json").read_text())["objects"]


# ---------------------------------------------------------------------------
# hypothesis and estimate records (JSON lines)


def pose_to_record(pose: RigidTransform) -> dict:
    return {
        "R": [float(x) for x in pose.rotation.reshape(-1)],
        "t_mm": [float(x * 1000.0) for x in pose.translation],
    }


def pose_from_record(rec: dict) -> RigidTransform:
    return RigidTransform(np.asarray(rec["R"]).reshape(3, 3), np.asarray(rec["t_mm"]) / 1000.0)


def write_jsonl(path, records) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with path.open("w") as fh:
        for rec in records:
            fh.write(json.dumps(rec) + "\n")


def read_jsonl(path) -> list:
    out = []
    with Path(path).open() as fh:
        for line in fh:
            line = line.strip()
            if line:
                out.append(json.loads(line))
    return out
