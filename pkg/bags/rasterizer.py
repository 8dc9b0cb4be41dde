"""
Tile-based differentiable splatting

project() runs through the tensor engine, so gradients reach the cloud
parameters automatically. Compositing is one custom Function whose backward
pass is derived by hand and accumulates per-tile contributions in a fixed
tile order.
"""
import logging
from dataclasses import dataclass, field
from typing import Dict, List, Optional

import numpy as np
from scipy.special import expit

from bags.errors import RasterizerError
from bags.functional import matmul, stack
from bags.scene import Camera, GaussianCloud, covariance_tensor
from bags.tensor import Function, Tensor, as_tensor

logger = logging.getLogger(__name__)

NEAR_PLANE = 0.01
DILATION = 0.3
MIN_ALPHA = 1.0 / 255.0
MAX_ALPHA = 0.99
MIN_TRANSMITTANCE = 1e-4
TILE_SIZE = 16
MIN_RESOLUTION = 8


@dataclass
class Projected2D:
    """
    Screen-space splats of one view, sorted front to back

    Rows are aligned across fields; `source` maps a row back to its Gaussian.
    """
    means2d: Tensor
    cov2d: Tensor
    conics: Tensor
    depths: Tensor
    colors: Tensor
    opacities: Tensor
    radii: np.ndarray
    source: np.ndarray
    culled_near: int = 0
    culled_offscreen: int = 0

    def __len__(self) -> int:
        return int(self.source.shape[0])


@dataclass
class RenderOutput:
    """Color (3 x H x W), expected depth (H x W) and accumulated alpha (H x W)"""
    color: Tensor
    depth: Tensor
    alpha: Tensor
    projected: Optional[Projected2D] = None

    @property
    def height(self) -> int:
        return self.color.shape[1]

    @property
    def width(self) -> int:
        return self.color.shape[2]


def project(cloud: GaussianCloud, camera: Camera, near: float = NEAR_PLANE) -> Projected2D:
    """Transform, cull and project every Gaussian into the camera's pixel frame"""
    like = cloud.positions
    rotation = as_tensor(camera.rotation, like)
    cam = matmul(cloud.positions, as_tensor(camera.rotation.T, like)) + camera.translation

    front = np.nonzero(cam.data[:, 2] > near)[0]
    cam = cam[front]
    sigma = covariance_tensor(cloud.rotations[front], cloud.log_scales[front])

    x, y, z = cam[:, 0], cam[:, 1], cam[:, 2]
    inv_z = 1.0 / z
    zero = z * 0.0
    jacobian = stack([
        stack([camera.fx * inv_z, zero, -camera.fx * x * inv_z * inv_z], axis=-1),
        stack([zero, camera.fy * inv_z, -camera.fy * y * inv_z * inv_z], axis=-1),
    ], axis=1)
    transform = matmul(jacobian, rotation)
    cov2d = matmul(matmul(transform, sigma), transform.transpose(0, 2, 1)) + DILATION * np.eye(2)

    a, b, c = cov2d[:, 0, 0], cov2d[:, 0, 1], cov2d[:, 1, 1]
    det = a * c - b * b
    conics = stack([c / det, -b / det, a / det], axis=-1)
    means2d = stack([camera.fx * x * inv_z + camera.cx, camera.fy * y * inv_z + camera.cy], axis=-1)

    cov = cov2d.data
    mid = 0.5 * (cov[:, 0, 0] + cov[:, 1, 1])
    det_np = cov[:, 0, 0] * cov[:, 1, 1] - cov[:, 0, 1] ** 2
    lambda_max = mid + np.sqrt(np.maximum(mid * mid - det_np, 0.0))
    strength = 255.0 * expit(cloud.opacity_logits.data[front, 0])
    # contributions of alpha >= 1/255 lie within sqrt(2 ln(255 o)) standard deviations
    extent = np.maximum(3.0, np.sqrt(2.0 * np.log(np.maximum(strength, 1.0))))
    radii = np.ceil(extent * np.sqrt(lambda_max))

    u, v = means2d.data[:, 0], means2d.data[:, 1]
    onscreen = (u + radii >= 0) & (u - radii <= camera.width) & (v + radii >= 0) & (v - radii <= camera.height)
    visible = np.nonzero((strength > 1.0) & onscreen)[0]
    order = visible[np.argsort(z.data[visible], kind="stable")]
    source = front[order]

    projected = Projected2D(
        means2d=means2d[order],
        cov2d=cov2d[order],
        conics=conics[order],
        depths=z[order],
        colors=cloud.color_logits[source].sigmoid(),
        opacities=cloud.opacity_logits[source, 0].sigmoid(),
        radii=radii[order],
        source=source,
        culled_near=int(len(cloud) - len(front)),
        culled_offscreen=int(len(front) - len(visible)),
    )
    logger.debug(
        "view %d: %d visible, %d behind near plane, %d off-screen",
        camera.view_index, len(projected), projected.culled_near, projected.culled_offscreen,
    )
    return projected


@dataclass
class TileRecord:
    y0: int
    y1: int
    x0: int
    x1: int
    members: np.ndarray
    gaussian: np.ndarray
    raw_alpha: np.ndarray
    alpha: np.ndarray
    transmittance: np.ndarray
    final_transmittance: np.ndarray


@dataclass
class RasterState:
    """Everything rasterize_backward needs from the forward pass"""
    width: int
    height: int
    means2d: np.ndarray
    conics: np.ndarray
    opacities: np.ndarray
    colors: np.ndarray
    depths: np.ndarray
    background: np.ndarray
    tiles: List[TileRecord] = field(default_factory=list)


def _pixel_centers(y0, y1, x0, x1):
    rows, cols = np.meshgrid(np.arange(y0, y1) + 0.5, np.arange(x0, x1) + 0.5, indexing="ij")
    return cols.ravel(), rows.ravel()


def _tile_ranges(means2d, radii, width, height, tile_size):
    u, v = means2d[:, 0], means2d[:, 1]
    col0 = np.maximum(np.ceil(u - radii - 0.5), 0)
    col1 = np.minimum(np.floor(u + radii - 0.5), width - 1)
    row0 = np.maximum(np.ceil(v - radii - 0.5), 0)
    row1 = np.minimum(np.floor(v + radii - 0.5), height - 1)
    valid = (col0 <= col1) & (row0 <= row1)
    as_tile = lambda p: (np.where(valid, p, 0) // tile_size).astype(np.int64)
    return valid, as_tile(col0), as_tile(col1), as_tile(row0), as_tile(row1)


def _offsets(state: RasterState, tile: TileRecord):
    px, py = _pixel_centers(tile.y0, tile.y1, tile.x0, tile.x1)
    mean = state.means2d[tile.members]
    return px[None, :] - mean[:, 0:1], py[None, :] - mean[:, 1:2]


def rasterize_forward(means2d, conics, opacities, colors, depths, background, width: int, height: int,
                      radii: np.ndarray, tile_size: int = TILE_SIZE):
    """
    Front-to-back compositing of sorted splats

    Returns:
        (5 x H x W array of color, depth and alpha, RasterState)
    """
    if np.any(np.diff(depths) < 0):
        raise RasterizerError("splats must be sorted by ascending depth")
    image = np.zeros((5, height, width), dtype=means2d.dtype)
    image[0:3] = background[:, None, None]
    state = RasterState(width, height, means2d, conics, opacities, colors, depths, background)

    valid, tx0, tx1, ty0, ty1 = _tile_ranges(means2d, radii, width, height, tile_size)
    for y0 in range(0, height, tile_size):
        for x0 in range(0, width, tile_size):
            tx, ty = x0 // tile_size, y0 // tile_size
            members = np.nonzero(valid & (tx0 <= tx) & (tx1 >= tx) & (ty0 <= ty) & (ty1 >= ty))[0]
            if members.size == 0:
                continue
            y1, x1 = min(y0 + tile_size, height), min(x0 + tile_size, width)
            tile = TileRecord(y0, y1, x0, x1, members, *([None] * 5))
            dx, dy = _offsets(state, tile)
            ca, cb, cc = (conics[members, i:i + 1] for i in range(3))
            power = np.minimum(-0.5 * (ca * dx * dx + cc * dy * dy) - cb * dx * dy, 0.0)
            gaussian = np.exp(power)
            raw = opacities[members, None] * gaussian
            alpha = np.minimum(raw, MAX_ALPHA)
            alpha = np.where(alpha >= MIN_ALPHA, alpha, 0.0)
            # a pixel stops before the splat that would drop T below the floor
            include = np.cumprod(1.0 - alpha, axis=0) >= MIN_TRANSMITTANCE
            alpha = np.where(include, alpha, 0.0)
            survive = np.cumprod(1.0 - alpha, axis=0)
            trans = np.concatenate([np.ones_like(survive[:1]), survive[:-1]], axis=0)
            weights = alpha * trans
            final = survive[-1]

            shape = (y1 - y0, x1 - x0)
            image[0:3, y0:y1, x0:x1] = (colors[members].T @ weights + background[:, None] * final).reshape((3,) + shape)
            image[3, y0:y1, x0:x1] = (depths[members] @ weights).reshape(shape)
            image[4, y0:y1, x0:x1] = (1.0 - final).reshape(shape)

            tile.gaussian, tile.raw_alpha, tile.alpha = gaussian, raw, alpha
            tile.transmittance, tile.final_transmittance = trans, final
            state.tiles.append(tile)
    return image, state


def rasterize_backward(state: RasterState, grad: np.ndarray) -> Dict[str, np.ndarray]:
    """
    Gradients of a loss wrt the splat attributes, given dL/d(color, depth, alpha)

    Args:
        state: the RasterState of the matching forward pass
        grad: 5 x H x W upstream gradient (channels 0-2 color, 3 depth, 4 alpha)

    Returns:
        dict with means2d, conics, opacities, colors and depths gradients
    """
    if grad.shape != (5, state.height, state.width):
        raise RasterizerError(
            f"upstream gradient {grad.shape} does not match the rendered image {(5, state.height, state.width)}"
        )
    out = {
        "means2d": np.zeros_like(state.means2d),
        "conics": np.zeros_like(state.conics),
        "opacities": np.zeros_like(state.opacities),
        "colors": np.zeros_like(state.colors),
        "depths": np.zeros_like(state.depths),
    }
    for tile in state.tiles:
        m = tile.members
        g_color = grad[0:3, tile.y0:tile.y1, tile.x0:tile.x1].reshape(3, -1)
        g_depth = grad[3, tile.y0:tile.y1, tile.x0:tile.x1].ravel()
        g_alpha = grad[4, tile.y0:tile.y1, tile.x0:tile.x1].ravel()
        alpha, trans = tile.alpha, tile.transmittance
        weights = alpha * trans

        out["colors"][m] += weights @ g_color.T
        out["depths"][m] += weights @ g_depth
        g_weight = state.colors[m] @ g_color + state.depths[m, None] * g_depth[None, :]

        # everything composited behind splat i, including the background and alpha terms
        behind = weights * g_weight
        behind = np.cumsum(behind[::-1], axis=0)[::-1] - behind
        behind += (tile.final_transmittance * (state.background @ g_color - g_alpha))[None, :]
        d_alpha = trans * g_weight - behind / (1.0 - alpha)
        d_alpha = np.where((alpha > 0) & (tile.raw_alpha < MAX_ALPHA), d_alpha, 0.0)

        out["opacities"][m] += np.sum(d_alpha * tile.gaussian, axis=1)
        d_power = d_alpha * state.opacities[m, None] * tile.gaussian
        dx, dy = _offsets(state, tile)
        ca, cb, cc = (state.conics[m, i:i + 1] for i in range(3))
        out["means2d"][m, 0] += np.sum(d_power * (ca * dx + cb * dy), axis=1)
        out["means2d"][m, 1] += np.sum(d_power * (cb * dx + cc * dy), axis=1)
        out["conics"][m, 0] += np.sum(-0.5 * dx * dx * d_power, axis=1)
        out["conics"][m, 1] += np.sum(-dx * dy * d_power, axis=1)
        out["conics"][m, 2] += np.sum(-0.5 * dy * dy * d_power, axis=1)
    return out


class Rasterize(Function):
    def forward(self, means2d, conics, opacities, colors, depths, background, width, height, radii, tile_size):
        image, self.state = rasterize_forward(
            means2d, conics, opacities, colors, depths, background, width, height, radii, tile_size
        )
        return image

    def backward(self, grad):
        grads = rasterize_backward(self.state, grad)
        return grads["means2d"], grads["conics"], grads["opacities"], grads["colors"], grads["depths"], None


def rasterize(projected: Projected2D, camera: Camera, background=None, tile_size: int = TILE_SIZE) -> RenderOutput:
    """Composite sorted splats into color, depth and alpha maps"""
    like = projected.means2d
    bg = as_tensor(np.zeros(3) if background is None else np.asarray(background, dtype=np.float64).reshape(3), like)
    packed = Rasterize.apply(
        projected.means2d, projected.conics, projected.opacities, projected.colors, projected.depths, bg,
        width=camera.width, height=camera.height, radii=projected.radii, tile_size=int(tile_size),
    )
    return RenderOutput(color=packed[0:3], depth=packed[3], alpha=packed[4], projected=projected)


def render(cloud: GaussianCloud, camera: Camera, background=None, tile_size: int = TILE_SIZE) -> RenderOutput:
    return rasterize(project(cloud, camera), camera, background, tile_size)


def scale_factor(s: int) -> int:
    if s < 1:
        raise RasterizerError(f"scale index must be >= 1, got {s}")
    return 2 ** (s - 1)


def render_at_scale(cloud: GaussianCloud, camera: Camera, s: int, background=None,
                    tile_size: int = TILE_SIZE) -> RenderOutput:
    """Render at 1/2^(s-1) resolution with the intrinsics scaled to match"""
    scaled = camera.scaled(scale_factor(s))
    if scaled.width < MIN_RESOLUTION or scaled.height < MIN_RESOLUTION:
        raise RasterizerError(
            f"scale {s} renders view {camera.view_index} at {scaled.width}x{scaled.height}, "
            f"below the {MIN_RESOLUTION}px minimum"
        )
    return render(cloud, scaled, background, tile_size)


def render_gradients(cloud: GaussianCloud, camera: Camera, grad_color: np.ndarray, grad_depth: np.ndarray,
                     background=None, tile_size: int = TILE_SIZE) -> Dict[str, np.ndarray]:
    """Cloud-parameter gradients of <grad_color, C> + <grad_depth, D> for one render"""
    params = cloud.parameters()
    for tensor in params.values():
        tensor.grad = None
    out = render(cloud, camera, background, tile_size)
    loss = (out.color * np.asarray(grad_color)).sum() + (out.depth * np.asarray(grad_depth)).sum()
    loss.backward()
    return {name: (t.grad if t.grad is not None else np.zeros_like(t.data)) for name, t in params.items()}
