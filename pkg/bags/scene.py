"""Optimizable 3D Gaussian cloud and the pinhole camera model"""
import logging
import math
from dataclasses import dataclass
from typing import Dict, Optional

import numpy as np
from scipy.spatial import cKDTree
from scipy.special import expit, logit

from bags.errors import SceneError
from bags.functional import matmul, stack
from bags.tensor import Tensor, as_tensor, get_default_dtype

logger = logging.getLogger(__name__)

INITIAL_OPACITY = 0.1
DEFAULT_SCALE = 0.1

PARAMETER_NAMES = ("positions", "log_scales", "rotations", "opacity_logits", "color_logits")


@dataclass
class Camera:
    """
    World-to-camera pinhole camera

    Camera space looks down +z with +x right and +y down. Pixel (col, row)
    has its center at continuous image coordinate (col + 0.5, row + 0.5).
    """
    rotation: np.ndarray
    translation: np.ndarray
    fx: float
    fy: float
    cx: float
    cy: float
    width: int
    height: int
    view_index: int = 0
    image_path: Optional[str] = None

    def __post_init__(self):
        self.rotation = np.asarray(self.rotation, dtype=np.float64).reshape(3, 3)
        self.translation = np.asarray(self.translation, dtype=np.float64).reshape(3)
        self.width, self.height = int(self.width), int(self.height)
        if self.width <= 0 or self.height <= 0:
            raise SceneError(f"camera {self.view_index}: image size must be positive, got {self.width}x{self.height}")
        if not np.allclose(self.rotation.T @ self.rotation, np.eye(3), atol=1e-6):
            raise SceneError(f"camera {self.view_index}: rotation is not orthonormal")

    @property
    def center(self) -> np.ndarray:
        """Camera position in world coordinates"""
        return -self.rotation.T @ self.translation

    def scaled(self, factor: int) -> "Camera":
        """The same view at 1/factor resolution (sides rounded up)"""
        if factor == 1:
            return self
        return Camera(
            rotation=self.rotation,
            translation=self.translation,
            fx=self.fx / factor,
            fy=self.fy / factor,
            cx=self.cx / factor,
            cy=self.cy / factor,
            width=-(-self.width // factor),
            height=-(-self.height // factor),
            view_index=self.view_index,
            image_path=self.image_path,
        )

    def to_dict(self) -> dict:
        return {
            "rotation": [float(v) for v in self.rotation.ravel()],
            "translation": [float(v) for v in self.translation],
            "fx": float(self.fx),
            "fy": float(self.fy),
            "cx": float(self.cx),
            "cy": float(self.cy),
            "width": self.width,
            "height": self.height,
            "image_path": self.image_path,
        }


class GaussianCloud:
    """
    The scene: N anisotropic Gaussians stored in unconstrained form

    Scales are log-scales, opacity and color are logits, rotations are
    quaternions (w, x, y, z) renormalized after every optimizer step.
    """

    def __init__(self, positions, log_scales, rotations, opacity_logits, color_logits):
        arrays = [np.asarray(a, dtype=get_default_dtype()) for a in (positions, log_scales, rotations, opacity_logits, color_logits)]
        n = arrays[0].shape[0] if arrays[0].ndim == 2 else -1
        expected = {0: 3, 1: 3, 2: 4, 3: 1, 4: 3}
        for i, array in enumerate(arrays):
            if array.ndim != 2 or array.shape != (n, expected[i]):
                raise SceneError(f"{PARAMETER_NAMES[i]} must have shape ({n}, {expected[i]}), got {array.shape}")
        self.positions = Tensor(arrays[0], requires_grad=True, name="positions")
        self.log_scales = Tensor(arrays[1], requires_grad=True, name="log_scales")
        self.rotations = Tensor(arrays[2], requires_grad=True, name="rotations")
        self.opacity_logits = Tensor(arrays[3], requires_grad=True, name="opacity_logits")
        self.color_logits = Tensor(arrays[4], requires_grad=True, name="color_logits")

    def __len__(self) -> int:
        return self.positions.shape[0]

    def parameters(self) -> Dict[str, Tensor]:
        return {name: getattr(self, name) for name in PARAMETER_NAMES}

    def arrays(self) -> Dict[str, np.ndarray]:
        return {name: np.array(getattr(self, name).data) for name in PARAMETER_NAMES}

    @classmethod
    def from_arrays(cls, arrays: Dict[str, np.ndarray]) -> "GaussianCloud":
        try:
            return cls(*(arrays[name] for name in PARAMETER_NAMES))
        except KeyError as e:
            raise SceneError(f"missing cloud array {e}") from None

    @classmethod
    def empty(cls) -> "GaussianCloud":
        return cls(np.zeros((0, 3)), np.zeros((0, 3)), np.zeros((0, 4)), np.zeros((0, 1)), np.zeros((0, 3)))

    def copy(self) -> "GaussianCloud":
        return GaussianCloud.from_arrays(self.arrays())

    @property
    def scales(self) -> np.ndarray:
        return np.exp(self.log_scales.data)

    @property
    def opacities(self) -> np.ndarray:
        return expit(self.opacity_logits.data)

    @property
    def colors(self) -> np.ndarray:
        return expit(self.color_logits.data)

    def normalize_rotations(self) -> None:
        q = self.rotations.data
        norms = np.linalg.norm(q, axis=1, keepdims=True)
        if np.any(norms == 0):
            raise SceneError("zero-length quaternion in cloud")
        self.rotations.data = q / norms


def quaternion_to_rotation(quaternions) -> Tensor:
    """N x 4 quaternions (w, x, y, z) -> N x 3 x 3 rotation matrices, normalizing first"""
    quaternions = as_tensor(quaternions)
    q = quaternions / (quaternions * quaternions).sum(axis=1, keepdims=True).sqrt()
    w, x, y, z = q[:, 0], q[:, 1], q[:, 2], q[:, 3]
    rows = [
        [1.0 - 2.0 * (y * y + z * z), 2.0 * (x * y - w * z), 2.0 * (x * z + w * y)],
        [2.0 * (x * y + w * z), 1.0 - 2.0 * (x * x + z * z), 2.0 * (y * z - w * x)],
        [2.0 * (x * z - w * y), 2.0 * (y * z + w * x), 1.0 - 2.0 * (x * x + y * y)],
    ]
    return stack([stack(row, axis=-1) for row in rows], axis=1)


def rotation_matrices(quaternions: np.ndarray) -> np.ndarray:
    """Plain-array version of quaternion_to_rotation"""
    q = np.asarray(quaternions, dtype=np.float64)
    q = q / np.linalg.norm(q, axis=-1, keepdims=True)
    w, x, y, z = q[..., 0], q[..., 1], q[..., 2], q[..., 3]
    return np.stack([
        np.stack([1 - 2 * (y * y + z * z), 2 * (x * y - w * z), 2 * (x * z + w * y)], axis=-1),
        np.stack([2 * (x * y + w * z), 1 - 2 * (x * x + z * z), 2 * (y * z - w * x)], axis=-1),
        np.stack([2 * (x * z - w * y), 2 * (y * z + w * x), 1 - 2 * (x * x + y * y)], axis=-1),
    ], axis=-2)


def covariance_tensor(rotations, log_scales) -> Tensor:
    """Sigma = (R S)(R S)^T for every Gaussian, differentiable in q and log_scale"""
    rs = quaternion_to_rotation(rotations) * log_scales.exp().reshape(-1, 1, 3)
    return matmul(rs, rs.transpose(0, 2, 1))


def covariance(cloud: GaussianCloud, n: int) -> np.ndarray:
    """3 x 3 covariance of Gaussian n"""
    if not 0 <= n < len(cloud):
        raise SceneError(f"Gaussian index {n} out of range for a cloud of {len(cloud)}")
    rotation = rotation_matrices(cloud.rotations.data[n])
    scales = np.exp(2.0 * cloud.log_scales.data[n])
    return (rotation * scales) @ rotation.T


def evaluate_gaussian(cloud: GaussianCloud, n: int, v) -> float:
    """Unnormalized density exp(-0.5 d^T Sigma^-1 d) of Gaussian n at world point v"""
    sigma = covariance(cloud, n)
    d = np.asarray(v, dtype=np.float64) - cloud.positions.data[n]
    try:
        solved = np.linalg.solve(sigma, d)
    except np.linalg.LinAlgError:
        raise SceneError(f"covariance of Gaussian {n} is singular") from None
    if not np.all(np.isfinite(solved)):
        raise SceneError(f"covariance of Gaussian {n} is singular")
    return float(np.exp(-0.5 * d @ solved))


def init_from_points(points, colors, default_scale: float = DEFAULT_SCALE,
                     initial_opacity: float = INITIAL_OPACITY) -> GaussianCloud:
    """
    One isotropic Gaussian per seed point

    Args:
        points: M x 3 world positions
        colors: M x 3 linear RGB in [0, 1]
        default_scale: scale used when a point has no neighbors
        initial_opacity: opacity of every new Gaussian

    Returns:
        GaussianCloud whose scales are the mean distance to the 3 nearest neighbors
    """
    points = np.asarray(points, dtype=np.float64).reshape(-1, 3)
    colors = np.asarray(colors, dtype=np.float64).reshape(-1, 3)
    m = points.shape[0]
    if m == 0:
        raise SceneError("cannot initialize a cloud from an empty point set")
    if colors.shape[0] != m:
        raise SceneError(f"{m} points but {colors.shape[0]} colors")

    if m == 1:
        scale = np.array([default_scale])
    else:
        k = min(4, m)
        distances, _ = cKDTree(points).query(points, k=k)
        scale = distances[:, 1:].mean(axis=1)
    scale = np.maximum(scale, 1e-7)
    logger.debug("Seeded %d Gaussians, median scale %.4g", m, float(np.median(scale)))

    return GaussianCloud(
        positions=points,
        log_scales=np.repeat(np.log(scale)[:, None], 3, axis=1),
        rotations=np.tile([1.0, 0.0, 0.0, 0.0], (m, 1)),
        opacity_logits=np.full((m, 1), float(logit(initial_opacity))),
        color_logits=logit(np.clip(colors, 1e-4, 1.0 - 1e-4)),
    )


def look_at(eye, target, up=(0.0, 0.0, 1.0)) -> np.ndarray:
    """World-to-camera rotation whose rows are the camera's right, down and forward axes"""
    eye, target, up = (np.asarray(a, dtype=np.float64) for a in (eye, target, up))
    forward = target - eye
    forward /= np.linalg.norm(forward)
    right = np.cross(forward, up)
    if np.linalg.norm(right) < 1e-9:
        raise SceneError("look_at: up vector is parallel to the viewing direction")
    right /= np.linalg.norm(right)
    down = np.cross(forward, right)
    return np.stack([right, down, forward])


def focal_from_fov(size: int, fov_degrees: float) -> float:
    return 0.5 * size / math.tan(math.radians(fov_degrees) / 2.0)
