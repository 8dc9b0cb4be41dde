"""Slow reference implementations the fast code is checked against"""
import numpy as np
from scipy.special import logit

from bags.rasterizer import MAX_ALPHA, MIN_ALPHA, MIN_TRANSMITTANCE, Projected2D
from bags.scene import Camera, GaussianCloud, focal_from_fov, look_at


def random_cloud(rng: np.random.Generator, n: int, spread: float = 0.6, scale_range=(0.04, 0.15),
                 opacity_range=(0.3, 0.7)) -> GaussianCloud:
    quaternions = rng.normal(size=(n, 4))
    quaternions /= np.linalg.norm(quaternions, axis=1, keepdims=True)
    return GaussianCloud(
        positions=rng.uniform(-spread, spread, size=(n, 3)),
        log_scales=np.log(rng.uniform(*scale_range, size=(n, 3))),
        rotations=quaternions,
        opacity_logits=logit(rng.uniform(*opacity_range, size=(n, 1))),
        color_logits=logit(rng.uniform(0.1, 0.9, size=(n, 3))),
    )


def front_camera(size: int = 16, distance: float = 3.0, fov: float = 50.0, view_index: int = 0) -> Camera:
    eye = np.array([0.0, -distance, 0.4])
    rotation = look_at(eye, np.zeros(3))
    focal = focal_from_fov(size, fov)
    return Camera(rotation, -rotation @ eye, focal, focal, size / 2.0, size / 2.0, size, size, view_index)


def naive_composite(projected: Projected2D, width: int, height: int, background=(0.0, 0.0, 0.0)):
    """Per-pixel front-to-back sum over every splat, no tiling"""
    means = projected.means2d.data
    conics = projected.conics.data
    opacities = projected.opacities.data
    colors = projected.colors.data
    depths = projected.depths.data
    background = np.asarray(background, dtype=np.float64)
    color = np.zeros((3, height, width))
    depth = np.zeros((height, width))
    alpha = np.zeros((height, width))
    for row in range(height):
        for col in range(width):
            dx = col + 0.5 - means[:, 0]
            dy = row + 0.5 - means[:, 1]
            power = -0.5 * (conics[:, 0] * dx * dx + conics[:, 2] * dy * dy) - conics[:, 1] * dx * dy
            splat_alpha = np.minimum(opacities * np.exp(np.minimum(power, 0.0)), MAX_ALPHA)
            t = 1.0
            c = np.zeros(3)
            d = 0.0
            for i in range(len(splat_alpha)):
                a = splat_alpha[i]
                if a < MIN_ALPHA:
                    continue
                if t * (1.0 - a) < MIN_TRANSMITTANCE:
                    break
                c += colors[i] * a * t
                d += depths[i] * a * t
                t *= 1.0 - a
            color[:, row, col] = c + t * background
            depth[row, col] = d
            alpha[row, col] = 1.0 - t
    return color, depth, alpha


def six_loop_convolve(image: np.ndarray, kernels: np.ndarray) -> np.ndarray:
    """out[c, y, x] = sum image[c, clamp(y + i - p), clamp(x + j - p)] * kernels[y, x, i, j]"""
    channels, height, width = image.shape
    k = kernels.shape[-1]
    pad = k // 2
    out = np.zeros_like(image, dtype=np.float64)
    for c in range(channels):
        for y in range(height):
            for x in range(width):
                for i in range(k):
                    for j in range(k):
                        yy = min(max(y + i - pad, 0), height - 1)
                        xx = min(max(x + j - pad, 0), width - 1)
                        out[c, y, x] += image[c, yy, xx] * kernels[y, x, i, j]
    return out
