"""
Dataset directory layout

    cameras.json        {"train": [camera, ...], "test": [camera, ...]}
    points.ply          seed point cloud (x, y, z and optional red, green, blue)
    train/####.png      observed training images
    test/####.png       clean held-out images
    degradation.json    blur applied to each training view
"""
import json
import logging
import math
from dataclasses import asdict
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Tuple

import imageio.v2 as imageio
import numpy as np
from plyfile import PlyData, PlyElement

from bags.errors import DatasetError, SceneError
from bags.imaging import from_uint8, to_uint8
from bags.scene import PARAMETER_NAMES, Camera, GaussianCloud

logger = logging.getLogger(__name__)

SPLITS = ("train", "test")
CAMERA_FIELDS = ("rotation", "translation", "fx", "fy", "cx", "cy", "width", "height")
GAUSSIAN_COLUMNS = {
    "positions": ["x", "y", "z"],
    "log_scales": ["scale_0", "scale_1", "scale_2"],
    "rotations": ["rot_0", "rot_1", "rot_2", "rot_3"],
    "opacity_logits": ["opacity"],
    "color_logits": ["color_0", "color_1", "color_2"],
}


def camera_from_dict(data: dict, index: int, path) -> Camera:
    for name in CAMERA_FIELDS:
        if name not in data:
            raise DatasetError(path, "missing camera field", f"{index}.{name}")
    try:
        rotation = np.asarray(data["rotation"], dtype=np.float64)
        translation = np.asarray(data["translation"], dtype=np.float64)
    except (TypeError, ValueError):
        raise DatasetError(path, "rotation and translation must be numeric lists", f"{index}") from None
    if rotation.size != 9:
        raise DatasetError(path, f"expected 9 rotation values, got {rotation.size}", f"{index}.rotation")
    if translation.size != 3:
        raise DatasetError(path, f"expected 3 translation values, got {translation.size}", f"{index}.translation")
    try:
        return Camera(
            rotation=rotation,
            translation=translation,
            fx=float(data["fx"]),
            fy=float(data["fy"]),
            cx=float(data["cx"]),
            cy=float(data["cy"]),
            width=int(data["width"]),
            height=int(data["height"]),
            view_index=index,
            image_path=data.get("image_path"),
        )
    except SceneError as e:
        raise DatasetError(path, str(e), f"{index}") from None
    except (TypeError, ValueError) as e:
        raise DatasetError(path, f"bad intrinsics ({e})", f"{index}") from None


class DatasetStore:
    """Reads and writes one dataset directory"""

    def __init__(self, root):
        self.root = Path(root)

    @property
    def cameras_path(self) -> Path:
        return self.root / "cameras.json"

    @property
    def points_path(self) -> Path:
        return self.root / "points.ply"

    @property
    def degradation_path(self) -> Path:
        return self.root / "degradation.json"

    def image_path(self, split: str, index: int) -> Path:
        if split not in SPLITS:
            raise ValueError(f"unknown split '{split}'")
        return self.root / split / f"{index:04d}.png"

    # cameras
    def write_cameras(self, train: Sequence[Camera], test: Sequence[Camera]) -> None:
        self.root.mkdir(parents=True, exist_ok=True)
        payload = {}
        for split, cameras in (("train", train), ("test", test)):
            entries = []
            for i, camera in enumerate(cameras):
                entry = camera.to_dict()
                entry["image_path"] = f"{split}/{i:04d}.png"
                entries.append(entry)
            payload[split] = entries
        with open(self.cameras_path, "w") as f:
            json.dump(payload, f, indent=2, sort_keys=True)

    def read_cameras(self) -> Dict[str, List[Camera]]:
        path = self.cameras_path
        if not path.exists():
            raise DatasetError(path, "file not found")
        try:
            with open(path, "r") as f:
                payload = json.load(f)
        except json.JSONDecodeError as e:
            raise DatasetError(path, f"not valid JSON ({e})") from None
        if not isinstance(payload, dict) or "train" not in payload:
            raise DatasetError(path, "missing camera list", "train")
        return {
            split: [camera_from_dict(entry, i, path) for i, entry in enumerate(payload.get(split, []))]
            for split in SPLITS
        }

    # images
    def write_image(self, split: str, index: int, image: np.ndarray) -> Path:
        return write_png(self.image_path(split, index), image)

    def read_image(self, split: str, index: int, camera: Optional[Camera] = None) -> np.ndarray:
        path = self.image_path(split, index)
        if camera is not None and camera.image_path:
            path = self.root / camera.image_path
        if not path.exists():
            raise DatasetError(path, "image not found", f"{split}.{index}")
        image = read_png(path)
        if camera is not None and image.shape[1:] != (camera.height, camera.width):
            raise DatasetError(
                path,
                f"image is {image.shape[2]}x{image.shape[1]}, camera expects {camera.width}x{camera.height}",
                "width/height",
            )
        return image

    def read_images(self, split: str, cameras: Sequence[Camera]) -> List[np.ndarray]:
        return [self.read_image(split, i, camera) for i, camera in enumerate(cameras)]

    # point cloud
    def write_points(self, points: np.ndarray, colors: Optional[np.ndarray] = None, text: bool = False) -> None:
        self.root.mkdir(parents=True, exist_ok=True)
        points = np.asarray(points, dtype=np.float64).reshape(-1, 3)
        dtype = [("x", "f4"), ("y", "f4"), ("z", "f4")]
        if colors is not None:
            dtype += [("red", "u1"), ("green", "u1"), ("blue", "u1")]
        elements = np.empty(points.shape[0], dtype=dtype)
        elements["x"], elements["y"], elements["z"] = points.T
        if colors is not None:
            rgb = np.round(np.clip(np.asarray(colors, dtype=np.float64).reshape(-1, 3), 0.0, 1.0) * 255.0)
            elements["red"], elements["green"], elements["blue"] = rgb.astype(np.uint8).T
        PlyData([PlyElement.describe(elements, "vertex")], text=text).write(str(self.points_path))

    def read_points(self) -> Tuple[np.ndarray, np.ndarray]:
        """Points and [0, 1] colors; gray when the file carries no color"""
        path = self.points_path
        if not path.exists():
            raise DatasetError(path, "file not found")
        try:
            plydata = PlyData.read(str(path))
        except Exception as e:
            raise DatasetError(path, f"not a readable PLY file ({e})") from None
        if "vertex" not in [el.name for el in plydata.elements]:
            raise DatasetError(path, "no vertex element", "vertex")
        vertex = plydata["vertex"]
        names = [p.name for p in vertex.properties]
        for axis in ("x", "y", "z"):
            if axis not in names:
                raise DatasetError(path, "missing coordinate property", f"vertex.{axis}")
        points = np.stack([np.asarray(vertex[a], dtype=np.float64) for a in ("x", "y", "z")], axis=1)
        if all(c in names for c in ("red", "green", "blue")):
            colors = np.stack([np.asarray(vertex[c], dtype=np.float64) for c in ("red", "green", "blue")], axis=1)
            if np.asarray(vertex["red"]).dtype.kind in "ui":
                colors = colors / 255.0
        else:
            colors = np.full_like(points, 0.5)
        if not np.all(np.isfinite(points)):
            raise DatasetError(path, "non-finite coordinates", "vertex.xyz")
        return points, colors

    # degradation record
    def write_degradation(self, spec: dict, views: List[dict]) -> None:
        self.root.mkdir(parents=True, exist_ok=True)
        with open(self.degradation_path, "w") as f:
            json.dump({"spec": spec, "views": views}, f, indent=2, sort_keys=True)

    def read_degradation(self) -> Optional[dict]:
        if not self.degradation_path.exists():
            return None
        with open(self.degradation_path, "r") as f:
            return json.load(f)

    # whole dataset
    def write_synthetic(self, dataset) -> None:
        """Persist a blur_synth.SyntheticDataset"""
        scene = dataset.scene
        self.write_cameras(scene.train_cameras, scene.test_cameras)
        for i, image in enumerate(dataset.train_images):
            self.write_image("train", i, image)
        for i, image in enumerate(dataset.test_images):
            self.write_image("test", i, image)
        self.write_points(dataset.points, dataset.point_colors)
        spec = asdict(dataset.spec) if dataset.spec is not None else {}
        self.write_degradation(spec, dataset.degradation)
        logger.info("Wrote dataset to %s (%d train, %d test views)", self.root,
                    len(dataset.train_images), len(dataset.test_images))

    def load_split(self, split: str) -> Tuple[List[Camera], List[np.ndarray]]:
        cameras = self.read_cameras()[split]
        if not cameras:
            raise DatasetError(self.cameras_path, "no cameras", split)
        return cameras, self.read_images(split, cameras)


def write_gaussians_ply(cloud: GaussianCloud, path) -> None:
    """Trained cloud in unconstrained form: x y z, scale_*, rot_*, opacity, color_* (logits)"""
    arrays = cloud.arrays()
    columns = [(name, col) for name in PARAMETER_NAMES for col in GAUSSIAN_COLUMNS[name]]
    elements = np.empty(len(cloud), dtype=[(col, "f4") for _, col in columns])
    for name in PARAMETER_NAMES:
        for j, col in enumerate(GAUSSIAN_COLUMNS[name]):
            elements[col] = arrays[name][:, j]
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    PlyData([PlyElement.describe(elements, "vertex")]).write(str(path))


def read_gaussians_ply(path) -> GaussianCloud:
    try:
        vertex = PlyData.read(str(path))["vertex"]
    except (OSError, KeyError, ValueError) as e:
        raise DatasetError(path, f"not a Gaussian PLY file ({e})") from None
    names = [p.name for p in vertex.properties]
    arrays = {}
    for name, columns in GAUSSIAN_COLUMNS.items():
        for col in columns:
            if col not in names:
                raise DatasetError(path, "missing Gaussian property", f"vertex.{col}")
        arrays[name] = np.stack([np.asarray(vertex[col], dtype=np.float64) for col in columns], axis=1)
    return GaussianCloud.from_arrays(arrays)


def read_png(path) -> np.ndarray:
    """3 x H x W floats in [0, 1]"""
    path = Path(path)
    if not path.exists():
        raise DatasetError(path, "image not found")
    return from_uint8(imageio.imread(path))


def write_png(path, image: np.ndarray) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    imageio.imwrite(path, to_uint8(image))
    return path


def png_ids(directory) -> Dict[int, Path]:
    """####.png files of a directory keyed by their integer id"""
    directory = Path(directory)
    if not directory.is_dir():
        raise DatasetError(directory, "directory not found")
    ids = {}
    for path in sorted(directory.glob("*.png")):
        if path.stem.isdigit():
            ids[int(path.stem)] = path
    return ids


def _metric_value(value: float):
    return "inf" if math.isinf(value) else value


def write_metrics(path, rows: List[dict], mean: dict) -> None:
    """Per-view and mean PSNR / SSIM; an infinite PSNR is stored as the string "inf" """
    payload = {
        "count": len(rows),
        "views": [{key: _metric_value(v) if isinstance(v, float) else v for key, v in row.items()} for row in rows],
        "mean": {key: _metric_value(float(v)) for key, v in mean.items()},
    }
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w") as f:
        json.dump(payload, f, indent=2, sort_keys=True)


def read_metrics(path) -> dict:
    with open(path, "r") as f:
        payload = json.load(f)

    def decode(row):
        return {key: math.inf if v == "inf" else v for key, v in row.items()}

    payload["views"] = [decode(row) for row in payload["views"]]
    payload["mean"] = decode(payload["mean"])
    return payload
