"""Synthetic box scenes: labelled voxel grids, LiDAR-like points, depth and colour images.

World frame is z-up. Each frame is expressed in the ego frame at that time,
so the voxel grid travels with the ego like an onboard occupancy grid.
"""

from __future__ import annotations

import copy
import json
from dataclasses import dataclass, field
from pathlib import Path

import jsonschema
import numpy as np

from .core import (
    GaussOccError,
    Pose,
    VoxelGrid,
    read_grid,
    read_image,
    read_points,
    write_grid,
    write_image,
    write_points,
)
from .metrics import lidar_rays
from .rendering import CameraModel, generate_rays

SCENE_VERSION = 1
_BIG = 1e9

_VEC3 = {"type": "array", "items": {"type": "number"}, "minItems": 3, "maxItems": 3}

SCENE_SCHEMA = {
    "$schema": "http://json-schema.org/draft-07/schema#",
    "title": "synthetic scene",
    "type": "object",
    "additionalProperties": False,
    "properties": {
        "version": {"const": SCENE_VERSION},
        "name": {"type": "string"},
        "grid": {
            "type": "object",
            "additionalProperties": False,
            "properties": {
                "origin": _VEC3,
                "voxel_size": {"type": "number", "exclusiveMinimum": 0},
                "dims": {"type": "array", "items": {"type": "integer", "minimum": 1}, "minItems": 3, "maxItems": 3},
            },
        },
        "classes": {"type": "array", "items": {"type": "string"}, "minItems": 1, "maxItems": 255},
        "frames": {"type": "integer", "minimum": 1},
        "rate_hz": {"type": "number", "exclusiveMinimum": 0},
        "ego": {
            "type": "object",
            "additionalProperties": False,
            "properties": {
                "start": _VEC3,
                "velocity": _VEC3,
                "yaw": {"type": "number"},
                "yaw_rate": {"type": "number"},
            },
        },
        "elements": {
            "type": "array",
            "items": {
                "type": "object",
                "required": ["type", "class"],
                "properties": {"type": {"enum": ["box", "ground"]}, "class": {"type": "integer", "minimum": 0}},
                "allOf": [
                    {
                        "if": {"properties": {"type": {"const": "box"}}},
                        "then": {
                            "additionalProperties": False,
                            "required": ["min", "max"],
                            "properties": {"type": {}, "class": {}, "min": _VEC3, "max": _VEC3, "velocity": _VEC3},
                        },
                    },
                    {
                        "if": {"properties": {"type": {"const": "ground"}}},
                        "then": {
                            "additionalProperties": False,
                            "required": ["top"],
                            "properties": {"type": {}, "class": {}, "top": {"type": "number"}, "bottom": {"type": "number"}},
                        },
                    },
                ],
            },
        },
        "sensor": _VEC3,
        "lidar": {
            "type": "object",
            "additionalProperties": False,
            "properties": {
                "rings": {"type": "integer", "minimum": 1},
                "azimuths": {"type": "integer", "minimum": 1},
                "elevation_deg": {"type": "array", "items": {"type": "number"}, "minItems": 2, "maxItems": 2},
            },
        },
        "cameras": {
            "type": "array",
            "items": {
                "type": "object",
                "additionalProperties": False,
                "properties": {
                    "width": {"type": "integer", "minimum": 1},
                    "height": {"type": "integer", "minimum": 1},
                    "fov_deg": {"type": "number", "exclusiveMinimum": 0, "exclusiveMaximum": 180},
                    "yaw_deg": {"type": "number"},
                    "pitch_deg": {"type": "number"},
                },
            },
        },
    },
}

DEFAULTS = {
    "version": SCENE_VERSION,
    "name": "scene",
    "grid": {"origin": [-16.0, -16.0, 0.0], "voxel_size": 0.5, "dims": [64, 64, 16]},
    "classes": ["ground", "building", "vegetation", "car"],
    "frames": 8,
    "rate_hz": 2.0,
    "ego": {"start": [0.0, 0.0, 0.0], "velocity": [0.0, 0.0, 0.0], "yaw": 0.0, "yaw_rate": 0.0},
    "elements": [],
    "sensor": [0.0, 0.0, 1.8],
    "lidar": {"rings": 32, "azimuths": 360, "elevation_deg": [-30.0, 10.0]},
    "cameras": [{"width": 40, "height": 24, "fov_deg": 90.0, "yaw_deg": y, "pitch_deg": -15.0} for y in (0.0, 90.0, 180.0, 270.0)],
}

PALETTE = np.array(
    [
        [0.45, 0.42, 0.38],
        [0.80, 0.62, 0.40],
        [0.20, 0.65, 0.25],
        [0.85, 0.15, 0.15],
        [0.20, 0.40, 0.85],
        [0.70, 0.30, 0.80],
        [0.95, 0.85, 0.20],
        [0.30, 0.80, 0.80],
    ]
)


class SchemaError(GaussOccError):
    pass


def standard_scene_spec() -> dict:
    """Ground, three static boxes and one moving car around a slowly driving ego."""
    spec = copy.deepcopy(DEFAULTS)
    spec["name"] = "standard"
    spec["ego"]["velocity"] = [1.0, 0.0, 0.0]
    spec["elements"] = [
        {"type": "ground", "class": 0, "top": 0.5},
        {"type": "box", "class": 1, "min": [4.0, -12.0, 0.5], "max": [10.0, -5.0, 6.0]},
        {"type": "box", "class": 1, "min": [-13.0, -13.0, 0.5], "max": [-8.0, -7.0, 4.5]},
        {"type": "box", "class": 2, "min": [-9.0, 5.0, 0.5], "max": [-3.0, 10.0, 3.5]},
        {"type": "box", "class": 3, "min": [-8.0, 1.5, 0.5], "max": [-4.0, 3.5, 2.0], "velocity": [2.0, 0.0, 0.0]},
    ]
    return spec


def moving_box_scene_spec() -> dict:
    """Ground plus one large box crossing in front of a parked ego."""
    spec = copy.deepcopy(DEFAULTS)
    spec["name"] = "moving-box"
    spec["elements"] = [
        {"type": "ground", "class": 0, "top": 0.5},
        {"type": "box", "class": 3, "min": [3.0, -4.0, 0.5], "max": [7.0, -1.0, 3.0], "velocity": [0.0, 3.0, 0.0]},
    ]
    return spec


def _merge(defaults, spec):
    out = copy.deepcopy(defaults)
    for k, v in spec.items():
        if isinstance(v, dict) and isinstance(out.get(k), dict):
            out[k] = _merge(out[k], v)
        else:
            out[k] = copy.deepcopy(v)
    return out


def resolve_spec(spec: dict) -> dict:
    """Validate against SCENE_SCHEMA and fill defaults."""
    if not isinstance(spec, dict):
        raise SchemaError("<root>: scene spec must be a JSON object")
    exc = jsonschema.exceptions.best_match(jsonschema.Draft7Validator(SCENE_SCHEMA).iter_errors(spec))
    if exc is not None:
        path = "/".join(str(p) for p in exc.absolute_path) or "<root>"
        raise SchemaError(f"{path}: {exc.message}")
    full = _merge(DEFAULTS, spec)
    C = len(full["classes"])
    for i, el in enumerate(full["elements"]):
        if el["class"] >= C:
            raise SchemaError(f"elements/{i}/class: {el['class']} >= class count {C}")
        if el["type"] == "box" and np.any(np.asarray(el["max"]) <= np.asarray(el["min"])):
            raise SchemaError(f"elements/{i}: max must exceed min on every axis")
    return full


# ---------------------------------------------------------------------------
# geometry


def _element_boxes(spec, t):
    """(lo, hi, class) per element at time t, world frame, in drawing order."""
    boxes = []
    for el in spec["elements"]:
        if el["type"] == "ground":
            lo = np.array([-_BIG, -_BIG, el.get("bottom", -_BIG)])
            hi = np.array([_BIG, _BIG, el["top"]])
        else:
            v = np.asarray(el.get("velocity", [0.0, 0.0, 0.0]), dtype=np.float64)
            lo = np.asarray(el["min"], dtype=np.float64) + v * t
            hi = np.asarray(el["max"], dtype=np.float64) + v * t
        boxes.append((lo, hi, int(el["class"])))
    return boxes


def ego_pose(spec, frame: int) -> Pose:
    t = frame / spec["rate_hz"]
    ego = spec["ego"]
    yaw = ego["yaw"] + ego["yaw_rate"] * t
    return Pose.from_yaw(yaw, np.asarray(ego["start"]) + np.asarray(ego["velocity"]) * t, timestamp=t)


def voxelize(spec, grid: VoxelGrid, pose: Pose, t: float) -> VoxelGrid:
    """Label each voxel by the last element containing its centre (half-open boxes)."""
    centers = pose.apply(grid.centers())
    flat = np.full(grid.num_voxels, grid.class_count, dtype=np.int64)
    for lo, hi, c in _element_boxes(spec, t):
        inside = np.all((centers >= lo) & (centers < hi), axis=1)
        flat[inside] = c
    return grid.like(VoxelGrid.unflatten(flat, grid.dims))


def _slab(o, d, par, lo, hi):
    """Entry/exit ray parameters of a box; empty interval when missed."""
    t1 = (lo - o) / d
    t2 = (hi - o) / d
    tmin = np.where(par, -np.inf, np.minimum(t1, t2))
    tmax = np.where(par, np.inf, np.maximum(t1, t2))
    # a ray parallel to a slab only meets the box if it starts inside it
    outside = (par & ((o < lo) | (o >= hi))).any(axis=1)
    tn = tmin.max(axis=1)
    tf = np.where(outside, -np.inf, tmax.min(axis=1))
    return tn, tf


def cast_boxes(spec, pose: Pose, t: float, origins, dirs, grid: VoxelGrid):
    """Nearest element hit per ego-frame ray, limited to the grid volume.

    Returns (distance, class) with distance 0 and class -1 on a miss.
    """
    o = pose.apply(origins)
    d = pose.rotate(dirs)
    best = np.full(len(o), np.inf)
    cls = np.full(len(o), -1, dtype=np.int64)
    par = d == 0
    with np.errstate(divide="ignore", invalid="ignore"):
        for lo, hi, c in _element_boxes(spec, t):
            tn, tf = _slab(o, d, par, lo, hi)
            hit = (tn <= tf) & (tf > 0)
            tn = np.maximum(tn, 0.0)
            closer = hit & (tn < best)
            best[closer] = tn[closer]
            cls[closer] = c
        glo = grid.origin
        ghi = grid.origin + np.asarray(grid.dims) * grid.voxel_size
        _, gexit = _slab(origins, dirs, dirs == 0, glo, ghi)
    miss = ~np.isfinite(best) | (best > gexit)
    best[miss] = 0.0
    cls[miss] = -1
    return best, cls


def camera_rig(spec) -> list[CameraModel]:
    """Cameras in the ego frame (pose = camera-to-ego)."""
    rig = []
    eye = np.asarray(spec["sensor"], dtype=np.float64)
    for cam in spec["cameras"]:
        yaw = np.radians(cam.get("yaw_deg", 0.0))
        pitch = np.radians(cam.get("pitch_deg", 0.0))
        fwd = np.array([np.cos(pitch) * np.cos(yaw), np.cos(pitch) * np.sin(yaw), np.sin(pitch)])
        rig.append(CameraModel.look_at(eye, eye + fwd, cam.get("width", 40), cam.get("height", 24), cam.get("fov_deg", 90.0)))
    return rig


# ---------------------------------------------------------------------------
# scenes


@dataclass
class Frame:
    index: int
    pose: Pose
    gt: VoxelGrid
    points: np.ndarray  # (P,3) ego frame
    depths: list = field(default_factory=list)  # per camera (H,W); 0 = no return
    images: list = field(default_factory=list)  # per camera (H,W,3)

    @property
    def timestamp(self):
        return self.pose.timestamp


@dataclass
class SyntheticScene:
    spec: dict
    seed: int
    grid: VoxelGrid  # empty template with the scene's geometry
    cameras: list
    frames: list

    @property
    def num_classes(self):
        return self.grid.class_count

    @property
    def class_names(self):
        return list(self.spec["classes"])

    @property
    def sensor(self):
        return np.asarray(self.spec["sensor"], dtype=np.float64)

    def relative_pose(self, src: int, dst: int) -> Pose:
        """Maps ego coordinates of frame `src` into ego coordinates of frame `dst`."""
        return self.frames[src].pose.relative_to(self.frames[dst].pose)

    def write(self, out_dir):
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        meta = {
            "spec": self.spec,
            "seed": self.seed,
            "cameras": [c.to_dict() for c in self.cameras],
            "frames": [],
        }
        for fr in self.frames:
            stem = f"frame_{fr.index:03d}"
            write_grid(out / f"{stem}.svox", fr.gt)
            write_points(out / f"{stem}.spts", fr.points)
            files = {"gt": f"{stem}.svox", "points": f"{stem}.spts", "depth": [], "rgb": []}
            for ci, (dm, im) in enumerate(zip(fr.depths, fr.images)):
                write_image(out / f"{stem}_cam{ci}_depth.simg", dm)
                write_image(out / f"{stem}_cam{ci}_rgb.simg", im)
                files["depth"].append(f"{stem}_cam{ci}_depth.simg")
                files["rgb"].append(f"{stem}_cam{ci}_rgb.simg")
            meta["frames"].append({"index": fr.index, "pose": fr.pose.to_dict(), "files": files})
        (out / "scene.json").write_text(json.dumps(meta, indent=2, sort_keys=True) + "\n")
        return out

    @classmethod
    def load(cls, path) -> "SyntheticScene":
        path = Path(path)
        root = path.parent if path.is_file() else path
        meta = json.loads((root / "scene.json").read_text())
        spec = meta["spec"]
        frames = []
        for fm in meta["frames"]:
            f = fm["files"]
            frames.append(
                Frame(
                    fm["index"],
                    Pose.from_dict(fm["pose"]),
                    read_grid(root / f["gt"]),
                    read_points(root / f["points"]).astype(np.float64),
                    [read_image(root / p)[..., 0].astype(np.float64) for p in f["depth"]],
                    [read_image(root / p).astype(np.float64) for p in f["rgb"]],
                )
            )
        return cls(spec, meta["seed"], _template(spec), [CameraModel.from_dict(c) for c in meta["cameras"]], frames)


def _f32(a):
    # what a write/read round trip yields, so fresh and loaded scenes agree
    return np.asarray(a, dtype=np.float32).astype(np.float64)


def _template(spec) -> VoxelGrid:
    g = spec["grid"]
    return VoxelGrid(g["origin"], g["voxel_size"], tuple(g["dims"]), len(spec["classes"]))


def gen_scene(spec: dict, seed: int = 0, out_dir=None) -> SyntheticScene:
    """Build every frame of the scene; write it to `out_dir` when given.

    The seed only perturbs the LiDAR azimuth phase per frame, so geometry
    and labels are identical across seeds.
    """
    spec = resolve_spec(spec)
    rng = np.random.default_rng(seed)
    template = _template(spec)
    rig = camera_rig(spec)
    lid = spec["lidar"]
    sensor = np.asarray(spec["sensor"], dtype=np.float64)
    frames = []
    for f in range(spec["frames"]):
        pose = ego_pose(spec, f)
        t = pose.timestamp
        gt = voxelize(spec, template, pose, t)
        rays = lidar_rays(sensor, lid["rings"], lid["azimuths"], tuple(lid["elevation_deg"]))
        phase = rng.uniform(0.0, 2 * np.pi / lid["azimuths"])
        c, s = np.cos(phase), np.sin(phase)
        dirs = rays.directions @ np.array([[c, -s, 0.0], [s, c, 0.0], [0.0, 0.0, 1.0]]).T
        dist, _ = cast_boxes(spec, pose, t, rays.origins, dirs, template)
        hit = dist > 0
        points = _f32(rays.origins[hit] + dist[hit, None] * dirs[hit])
        depths, images = [], []
        for cam in rig:
            cr = generate_rays(cam)
            dd, cc = cast_boxes(spec, pose, t, cr.origins, cr.directions, template)
            depths.append(_f32(dd.reshape(cam.height, cam.width)))
            img = np.where(cc[:, None] >= 0, PALETTE[np.maximum(cc, 0) % len(PALETTE)], 0.0)
            images.append(_f32(img.reshape(cam.height, cam.width, 3)))
        frames.append(Frame(f, pose, gt, points, depths, images))
    scene = SyntheticScene(spec, seed, template, rig, frames)
    if out_dir is not None:
        scene.write(out_dir)
    return scene
