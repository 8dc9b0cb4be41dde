"""
Synthetic ground truth: a procedural Gaussian scene, its clean renders and
blur-degraded training sets (camera motion, defocus, mixed resolution)
"""
import logging
import math
from dataclasses import dataclass, field
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np
from scipy import ndimage
from scipy.special import logit

from bags.bpn import per_pixel_convolve
from bags.errors import ConfigError, SceneError, ShapeError
from bags.imaging import area_downscale, bilinear_upscale
from bags.rasterizer import render
from bags.rng import RngStreams
from bags.scene import Camera, GaussianCloud, focal_from_fov, look_at
from bags.tensor import no_grad

logger = logging.getLogger(__name__)

BLUR_KINDS = ("motion", "defocus", "mixres", "none")
MIXRES_FACTORS = (4, 3, 2, 1)
SIGMA_MAX = 4.0
SIGMA_IDENTITY = 0.05
DEFOCUS_KERNEL = 17
RING_RADIUS = 3.0
RING_HEIGHT = 0.5
FIELD_OF_VIEW = 45.0


@dataclass
class BlurSpec:
    kind: str = "none"
    angle: float = 0.0
    length: float = 6.0
    focus_depth: float = 3.0
    aperture_gain: float = 2.5
    seed: int = 0

    def __post_init__(self):
        if self.kind not in BLUR_KINDS:
            raise ConfigError(f"unknown blur kind '{self.kind}' (expected one of {', '.join(BLUR_KINDS)})")
        if self.length < 0:
            raise ConfigError(f"motion length must be >= 0, got {self.length}")
        if self.aperture_gain < 0:
            raise ConfigError(f"aperture gain must be >= 0, got {self.aperture_gain}")


@dataclass
class ToyScene:
    cloud: GaussianCloud
    train_cameras: List[Camera]
    test_cameras: List[Camera]


@dataclass
class SyntheticDataset:
    scene: ToyScene
    train_images: List[np.ndarray]
    test_images: List[np.ndarray]
    points: np.ndarray
    point_colors: np.ndarray
    degradation: List[dict] = field(default_factory=list)
    spec: Optional[BlurSpec] = None


def ring_cameras(n_views: int, size: int = 64, phase: float = 0.0, first_index: int = 0) -> List[Camera]:
    """Cameras evenly spaced on a horizontal ring, all looking at the origin"""
    focal = focal_from_fov(size, FIELD_OF_VIEW)
    cameras = []
    for i in range(n_views):
        theta = 2.0 * math.pi * (i + phase) / n_views
        eye = np.array([RING_RADIUS * math.cos(theta), RING_RADIUS * math.sin(theta), RING_HEIGHT])
        rotation = look_at(eye, np.zeros(3))
        cameras.append(Camera(
            rotation=rotation,
            translation=-rotation @ eye,
            fx=focal,
            fy=focal,
            cx=size / 2.0,
            cy=size / 2.0,
            width=size,
            height=size,
            view_index=first_index + i,
        ))
    return cameras


def make_toy_scene(seed: int, n_gaussians: int = 200, n_views: int = 24, size: int = 64) -> ToyScene:
    """
    Random colored Gaussians inside the unit sphere plus a ring of cameras

    Test cameras sit half-way between consecutive training cameras.
    """
    if n_gaussians < 10:
        raise SceneError(f"toy scene needs at least 10 Gaussians, got {n_gaussians}")
    rng = RngStreams(seed).get("scene")
    directions = rng.normal(size=(n_gaussians, 3))
    directions /= np.linalg.norm(directions, axis=1, keepdims=True)
    radii = rng.uniform(0.0, 1.0, size=(n_gaussians, 1)) ** (1.0 / 3.0)
    quaternions = rng.normal(size=(n_gaussians, 4))
    quaternions /= np.linalg.norm(quaternions, axis=1, keepdims=True)
    cloud = GaussianCloud(
        positions=directions * radii,
        log_scales=rng.uniform(math.log(0.03), math.log(0.12), size=(n_gaussians, 3)),
        rotations=quaternions,
        opacity_logits=logit(rng.uniform(0.6, 0.95, size=(n_gaussians, 1))),
        color_logits=logit(rng.uniform(0.05, 0.95, size=(n_gaussians, 3))),
    )
    return ToyScene(cloud, ring_cameras(n_views, size), ring_cameras(n_views, size, phase=0.5))


def render_clean(cloud: GaussianCloud, cameras: Sequence[Camera]) -> List[Tuple[np.ndarray, np.ndarray]]:
    """(color, depth) per camera; depth is D/A with the far depth where nothing was hit"""
    results = []
    with no_grad():
        for camera in cameras:
            out = render(cloud, camera)
            color = np.clip(np.array(out.color.data, dtype=np.float64), 0.0, 1.0)
            alpha, weighted = out.alpha.data, out.depth.data
            hit = alpha > 1e-3
            depth = np.zeros_like(weighted)
            depth[hit] = weighted[hit] / alpha[hit]
            depth[~hit] = depth[hit].max() if np.any(hit) else 0.0
            results.append((color, depth))
    return results


def motion_kernel(angle: float, length: float) -> np.ndarray:
    """Normalized anti-aliased line of the given length (pixels) and angle (radians, x right, y down)"""
    if length < 0:
        raise ConfigError(f"motion length must be >= 0, got {length}")
    size = 2 * int(math.ceil(length / 2.0)) + 1
    kernel = np.zeros((size, size))
    center = size // 2
    if length == 0:
        kernel[center, center] = 1.0
        return kernel
    samples = max(2, int(math.ceil(length * 8)) + 1)
    for t in np.linspace(-length / 2.0, length / 2.0, samples):
        x = center + t * math.cos(angle)
        y = center + t * math.sin(angle)
        x0, y0 = int(math.floor(x)), int(math.floor(y))
        fx, fy = x - x0, y - y0
        for yy, xx, w in ((y0, x0, (1 - fx) * (1 - fy)), (y0, x0 + 1, fx * (1 - fy)),
                          (y0 + 1, x0, (1 - fx) * fy), (y0 + 1, x0 + 1, fx * fy)):
            if w > 0 and 0 <= yy < size and 0 <= xx < size:
                kernel[yy, xx] += w
    return kernel / kernel.sum()


def degrade_motion(image: np.ndarray, angle: float, length: float) -> np.ndarray:
    """Convolve every channel with one line kernel; borders replicate"""
    if length == 0:
        return np.array(image, copy=True)
    kernel = motion_kernel(angle, length)
    blurred = np.stack([ndimage.convolve(channel, kernel, mode="nearest") for channel in image])
    return np.clip(blurred, 0.0, 1.0)


def defocus_kernels(sigma: np.ndarray, size: int = DEFOCUS_KERNEL) -> np.ndarray:
    """H x W x K x K isotropic Gaussian kernels; sigma below the identity cutoff gives a delta"""
    radius = size // 2
    offsets = np.arange(size) - radius
    d2 = offsets[:, None] ** 2 + offsets[None, :] ** 2
    safe = np.maximum(sigma, SIGMA_IDENTITY)[:, :, None, None]
    kernels = np.exp(-d2[None, None] / (2.0 * safe ** 2))
    kernels /= kernels.sum(axis=(2, 3), keepdims=True)
    delta = np.zeros((size, size))
    delta[radius, radius] = 1.0
    return np.where((sigma < SIGMA_IDENTITY)[:, :, None, None], delta, kernels)


def degrade_defocus(image: np.ndarray, depth: np.ndarray, focus_depth: float, gain: float) -> np.ndarray:
    """Per-pixel Gaussian blur with sigma = gain * |depth - focus_depth|, capped at SIGMA_MAX"""
    if gain < 0:
        raise ConfigError(f"aperture gain must be >= 0, got {gain}")
    if image.shape[1:] != depth.shape:
        raise ShapeError("defocus needs a depth map aligned with the image", image.shape[1:], depth.shape)
    sigma = np.minimum(gain * np.abs(depth - focus_depth), SIGMA_MAX)
    if np.all(sigma < SIGMA_IDENTITY):
        return np.array(image, copy=True)
    return np.clip(per_pixel_convolve(image, defocus_kernels(sigma)), 0.0, 1.0)


def degrade_mixres(images: Sequence[np.ndarray], seed: int) -> Tuple[List[np.ndarray], List[int]]:
    """
    Split the views into four equal random parts degraded by 4x, 3x, 2x and 1x

    Each degraded view is area-downscaled then bilinearly upscaled back to its
    native size. Factor-1 views are returned untouched.
    """
    if len(images) < 4:
        raise ConfigError(f"mixed resolution needs at least 4 views, got {len(images)}")
    order = RngStreams(seed).get("mixres").permutation(len(images))
    factors = [1] * len(images)
    for part, factor in zip(np.array_split(order, len(MIXRES_FACTORS)), MIXRES_FACTORS):
        for view in part:
            factors[int(view)] = factor
    degraded = []
    for image, factor in zip(images, factors):
        if factor == 1:
            degraded.append(image)
            continue
        h, w = image.shape[1:]
        degraded.append(np.clip(bilinear_upscale(area_downscale(image, factor), h, w), 0.0, 1.0))
    return degraded, factors


def seed_points(cloud: GaussianCloud, seed: int, fraction: float = 0.2, jitter: float = 0.02):
    """Sparse noisy point cloud from a subset of Gaussian centers"""
    rng = RngStreams(seed).get("points")
    n = len(cloud)
    count = max(1, int(round(fraction * n)))
    chosen = np.sort(rng.choice(n, size=count, replace=False))
    points = cloud.positions.data[chosen] + rng.normal(0.0, jitter, size=(count, 3))
    return points, cloud.colors[chosen]


def synthesize(spec: BlurSpec, n_gaussians: int = 200, n_views: int = 24, size: int = 64) -> SyntheticDataset:
    """Build the toy scene, render it and degrade the training views"""
    scene = make_toy_scene(spec.seed, n_gaussians, n_views, size)
    train = render_clean(scene.cloud, scene.train_cameras)
    test = [color for color, _ in render_clean(scene.cloud, scene.test_cameras)]
    clean = [color for color, _ in train]

    records: List[Dict] = [{"view": i, "kind": spec.kind} for i in range(n_views)]
    if spec.kind == "motion":
        images = [degrade_motion(image, spec.angle, spec.length) for image in clean]
        for record in records:
            record.update(angle=spec.angle, length=spec.length)
    elif spec.kind == "defocus":
        images = [degrade_defocus(color, depth, spec.focus_depth, spec.aperture_gain) for color, depth in train]
        for record in records:
            record.update(focus_depth=spec.focus_depth, aperture_gain=spec.aperture_gain)
    elif spec.kind == "mixres":
        images, factors = degrade_mixres(clean, spec.seed)
        for record, factor in zip(records, factors):
            record["factor"] = factor
    else:
        images = clean

    points, colors = seed_points(scene.cloud, spec.seed)
    logger.info("Synthesized %d views (%s blur) of a %d-Gaussian scene", n_views, spec.kind, n_gaussians)
    return SyntheticDataset(scene, images, test, points, colors, records, spec)
