"""
Blur Proposal Network

Predicts one normalized blur kernel and one blending mask per pixel from the
view embedding, a sinusoidal encoding of the pixel position and CNN features
of the rendered color and depth.
"""
import logging
import math
from dataclasses import dataclass
from typing import Dict, List, Optional, Tuple

import numpy as np

from bags.errors import BPNError
from bags.functional import concat, conv2d, quantile, softmax
from bags.tensor import Function, Tensor, as_tensor, get_default_dtype

logger = logging.getLogger(__name__)

CONV_KERNELS = (5, 5, 3)
CENTER_WEIGHT = 0.95
HEAD_NOISE = 1e-4


@dataclass
class BlurField:
    """Per-pixel kernels (H*W rows of K*K weights, row-major pixels) and mask (H x W) at one scale"""
    kernels: Tensor
    mask: Tensor
    scale: int
    kernel_size: int
    height: int
    width: int

    def kernel_array(self) -> np.ndarray:
        k = self.kernel_size
        return self.kernels.data.reshape(self.height, self.width, k, k)

    def kernel_at(self, row: int, col: int) -> np.ndarray:
        k = self.kernel_size
        return self.kernels.data[row * self.width + col].reshape(k, k)


def positional_encoding(height: int, width: int, frequencies: int = 6, dtype=None) -> np.ndarray:
    """
    (H*W) x 4L encoding of pixel centers normalized to [-1, 1]

    Per octave l the columns are sin(2^l pi x), cos(2^l pi x), sin(2^l pi y), cos(2^l pi y).
    """
    rows, cols = np.meshgrid(np.arange(height), np.arange(width), indexing="ij")
    x = (2.0 * (cols.ravel() + 0.5) / width - 1.0)[:, None]
    y = (2.0 * (rows.ravel() + 0.5) / height - 1.0)[:, None]
    columns = []
    for level in range(frequencies):
        freq = (2.0 ** level) * math.pi
        columns += [np.sin(freq * x), np.cos(freq * x), np.sin(freq * y), np.cos(freq * y)]
    return np.concatenate(columns, axis=1).astype(dtype or get_default_dtype())


def normalize_depth(depth: Tensor, low: float = 0.02, high: float = 0.98) -> Tensor:
    """Map depth to [0, 1] between its 2nd and 98th percentiles"""
    lo = quantile(depth, low)
    hi = quantile(depth, high)
    if hi.item() - lo.item() < 1e-8:
        logger.debug("Flat depth map, feeding zeros to the feature network")
        return as_tensor(np.zeros(depth.shape), depth)
    return ((depth - lo) / (hi - lo)).clip(0.0, 1.0)


def _uniform(rng: np.random.Generator, bound: float, shape) -> np.ndarray:
    return rng.uniform(-bound, bound, size=shape).astype(get_default_dtype())


class BlurProposalNetwork:
    """
    Parameters live in `self.params` under names prefixed "bpn." so the
    optimizer can give them their own learning rate.
    """

    def __init__(self, num_views: int, rng: np.random.Generator, feature_channels: int = 16,
                 view_dim: int = 32, hidden: int = 64, frequencies: int = 6, use_rgbd: bool = True,
                 init: bool = True):
        if num_views < 1:
            raise BPNError("the view table needs at least one view")
        self.num_views = num_views
        self.feature_channels = feature_channels
        self.view_dim = view_dim
        self.hidden = hidden
        self.frequencies = frequencies
        self.use_rgbd = use_rgbd
        self.params: Dict[str, Tensor] = {}
        self.kernel_sizes: Dict[int, int] = {}
        self._encoding_cache: Dict[Tuple[int, int], np.ndarray] = {}
        if init:
            self._init_shared(rng)

    @property
    def input_dim(self) -> int:
        return self.view_dim + 4 * self.frequencies + (self.feature_channels if self.use_rgbd else 0)

    def _add(self, name: str, value: np.ndarray) -> Tensor:
        tensor = Tensor(value, requires_grad=True, name=f"bpn.{name}")
        self.params[f"bpn.{name}"] = tensor
        return tensor

    def _linear(self, rng, name: str, fan_in: int, fan_out: int) -> None:
        bound = 1.0 / math.sqrt(fan_in)
        self._add(f"{name}.weight", _uniform(rng, bound, (fan_in, fan_out)))
        self._add(f"{name}.bias", _uniform(rng, bound, (fan_out,)))

    def _init_shared(self, rng: np.random.Generator) -> None:
        if self.use_rgbd:
            widths = (4, self.hidden, self.hidden, self.feature_channels)
            for i, k in enumerate(CONV_KERNELS):
                fan_in = widths[i] * k * k
                bound = 1.0 / math.sqrt(fan_in)
                self._add(f"conv{i}.weight", _uniform(rng, bound, (widths[i + 1], widths[i], k, k)))
                self._add(f"conv{i}.bias", _uniform(rng, bound, (widths[i + 1],)))
        self._add("view_table", rng.normal(0.0, 1.0, (self.num_views, self.view_dim)).astype(get_default_dtype()))
        self._linear(rng, "base0", self.input_dim, self.hidden)
        self._linear(rng, "base1", self.hidden, self.hidden)
        self._linear(rng, "mask", self.hidden, 1)

    def parameters(self) -> Dict[str, Tensor]:
        return dict(self.params)

    def head_parameters(self, scale: int) -> Dict[str, Tensor]:
        prefix = f"bpn.head{scale}."
        return {name: t for name, t in self.params.items() if name.startswith(prefix)}

    def has_head(self, scale: int) -> bool:
        return scale in self.kernel_sizes

    def grow_head(self, scale: int, kernel_size: int, rng: np.random.Generator) -> Dict[str, Tensor]:
        """
        Append the blur head for a new scale

        The head starts near the identity: tiny uniform weights and a center
        bias that gives the middle tap CENTER_WEIGHT of the softmax mass.

        Returns:
            the new parameters, for registration with the optimizer
        """
        if scale in self.kernel_sizes:
            raise BPNError(f"a blur head for scale {scale} already exists")
        if kernel_size < 1 or kernel_size % 2 == 0:
            raise BPNError(f"kernel size must be odd, got {kernel_size}")
        taps = kernel_size * kernel_size
        bias = _uniform(rng, HEAD_NOISE, (taps,))
        if taps > 1:
            bias[taps // 2] += math.log(CENTER_WEIGHT * (taps - 1) / (1.0 - CENTER_WEIGHT))
        self._add(f"head{scale}.weight", _uniform(rng, HEAD_NOISE, (self.hidden, taps)))
        self._add(f"head{scale}.bias", bias)
        self.kernel_sizes[scale] = kernel_size
        logger.info("Grew blur head for scale %d (%dx%d kernels)", scale, kernel_size, kernel_size)
        return self.head_parameters(scale)

    def extract_features(self, color: Tensor, depth: Tensor) -> Tensor:
        """F_out x H x W features of the rendered color (3 x H x W) and depth (H x W)"""
        if not self.use_rgbd:
            raise BPNError("this network was built without the RGBD feature branch")
        if color.ndim != 3 or color.shape[1:] != depth.shape:
            raise BPNError(f"color {color.shape} and depth {depth.shape} are not aligned")
        h, w = depth.shape
        x = concat([color, normalize_depth(depth).reshape(1, h, w)], axis=0)
        for i in range(len(CONV_KERNELS)):
            x = conv2d(x, self.params[f"bpn.conv{i}.weight"], self.params[f"bpn.conv{i}.bias"]).relu()
        return x

    def _encoding(self, height: int, width: int) -> np.ndarray:
        key = (height, width)
        if key not in self._encoding_cache:
            self._encoding_cache[key] = positional_encoding(height, width, self.frequencies)
        return self._encoding_cache[key]

    def propose(self, color: Tensor, depth: Tensor, view: int, scale: int) -> BlurField:
        """Kernels and mask for every pixel of one render at one scale"""
        if not 0 <= view < self.num_views:
            raise BPNError(f"view {view} has no embedding (table has {self.num_views} rows)")
        if scale not in self.kernel_sizes:
            raise BPNError(f"no blur head for scale {scale}")
        h, w = color.shape[1:]
        p = self.params
        parts = [
            p["bpn.view_table"][np.full(h * w, view)],
            as_tensor(self._encoding(h, w), p["bpn.view_table"]),
        ]
        if self.use_rgbd:
            features = self.extract_features(color, depth)
            parts.append(features.reshape(self.feature_channels, h * w).T)
        mmf = concat(parts, axis=1)

        hidden = (mmf @ p["bpn.base0.weight"] + p["bpn.base0.bias"]).relu()
        inter = hidden @ p["bpn.base1.weight"] + p["bpn.base1.bias"]
        logits = inter @ p[f"bpn.head{scale}.weight"] + p[f"bpn.head{scale}.bias"]
        mask = (inter @ p["bpn.mask.weight"] + p["bpn.mask.bias"]).sigmoid()
        return BlurField(
            kernels=softmax(logits, axis=1),
            mask=mask.reshape(h, w),
            scale=scale,
            kernel_size=self.kernel_sizes[scale],
            height=h,
            width=w,
        )

    def arrays(self) -> Dict[str, np.ndarray]:
        return {name: np.array(t.data) for name, t in self.params.items()}

    def describe(self) -> dict:
        return {
            "num_views": self.num_views,
            "feature_channels": self.feature_channels,
            "view_dim": self.view_dim,
            "hidden": self.hidden,
            "frequencies": self.frequencies,
            "use_rgbd": self.use_rgbd,
            "heads": {str(s): k for s, k in self.kernel_sizes.items()},
        }

    @classmethod
    def from_arrays(cls, description: dict, arrays: Dict[str, np.ndarray]) -> "BlurProposalNetwork":
        net = cls(
            num_views=int(description["num_views"]),
            rng=None,
            feature_channels=int(description["feature_channels"]),
            view_dim=int(description["view_dim"]),
            hidden=int(description["hidden"]),
            frequencies=int(description["frequencies"]),
            use_rgbd=bool(description["use_rgbd"]),
            init=False,
        )
        for name, value in arrays.items():
            if not name.startswith("bpn."):
                raise BPNError(f"unexpected parameter '{name}' in stored network")
            net.params[name] = Tensor(value, requires_grad=True, name=name)
        net.kernel_sizes = {int(s): int(k) for s, k in description["heads"].items()}
        for s in net.kernel_sizes:
            if f"bpn.head{s}.weight" not in net.params:
                raise BPNError(f"stored network lists a head for scale {s} but has no weights for it")
        return net


def _shift_indices(size: int, offset: int) -> np.ndarray:
    return np.clip(np.arange(size) + offset, 0, size - 1)


def per_pixel_convolve(image: np.ndarray, kernels: np.ndarray) -> np.ndarray:
    """
    out[c, y, x] = sum over (dy, dx) of image[c, y + dy - p, x + dx - p] * kernels[y, x, dy, dx]

    Borders replicate the edge pixels. kernels is H x W x K x K with K odd.
    """
    h, w, k, k2 = kernels.shape
    if k != k2 or k % 2 == 0:
        raise BPNError(f"per-pixel kernels must be square with odd size, got {k}x{k2}")
    if image.shape[1:] != (h, w):
        raise BPNError(f"image {image.shape} and kernel field {kernels.shape[:2]} differ in size")
    pad = k // 2
    out = np.zeros(image.shape, dtype=np.result_type(image, kernels))
    for dy in range(k):
        rows = _shift_indices(h, dy - pad)
        for dx in range(k):
            cols = _shift_indices(w, dx - pad)
            out += image[:, rows[:, None], cols[None, :]] * kernels[None, :, :, dy, dx]
    return out


class PerPixelConvolve(Function):
    def forward(self, image, kernels, kernel_size: int):
        h, w = image.shape[1:]
        self.image = image
        self.kernels = kernels.reshape(h, w, kernel_size, kernel_size)
        return per_pixel_convolve(image, self.kernels)

    def backward(self, grad):
        h, w, k, _ = self.kernels.shape
        pad = k // 2
        grad_image = np.zeros_like(self.image)
        grad_kernels = np.zeros_like(self.kernels)
        for dy in range(k):
            rows = _shift_indices(h, dy - pad)
            for dx in range(k):
                cols = _shift_indices(w, dx - pad)
                index = (slice(None), rows[:, None], cols[None, :])
                np.add.at(grad_image, index, grad * self.kernels[None, :, :, dy, dx])
                grad_kernels[:, :, dy, dx] = np.sum(grad * self.image[index], axis=0)
        return grad_image, grad_kernels.reshape(h * w, k * k)


def apply_blur(color: Tensor, field: BlurField) -> Tensor:
    """Blur each color channel with the shared per-pixel kernels of the field"""
    if field.kernel_size % 2 == 0:
        raise BPNError(f"kernel size must be odd, got {field.kernel_size}")
    if color.shape[1:] != (field.height, field.width):
        raise BPNError(f"image {color.shape} does not match the {field.height}x{field.width} kernel field")
    return PerPixelConvolve.apply(color, field.kernels, kernel_size=field.kernel_size)


def blend(color, blurred, mask) -> Tensor:
    """(1 - m) C + m C~ per pixel; m is H x W, the images C x H x W"""
    color, blurred = as_tensor(color), as_tensor(blurred)
    mask = as_tensor(mask, color)
    if color.shape != blurred.shape or color.shape[1:] != mask.shape:
        raise BPNError(f"cannot blend {color.shape} with {blurred.shape} under mask {mask.shape}")
    m = mask.reshape((1,) + mask.shape)
    return (1.0 - m) * color + m * blurred


def kernel_principal_axis(kernel: np.ndarray) -> float:
    """Orientation in radians, in (-pi/2, pi/2], of a kernel's dominant second-moment axis (x right, y down)"""
    k = kernel.shape[0]
    weights = np.asarray(kernel, dtype=np.float64)
    total = weights.sum()
    if total <= 0:
        raise BPNError("kernel has no mass")
    ys, xs = np.mgrid[0:k, 0:k]
    mx, my = (weights * xs).sum() / total, (weights * ys).sum() / total
    dx, dy = xs - mx, ys - my
    cov = np.array([
        [(weights * dx * dx).sum(), (weights * dx * dy).sum()],
        [(weights * dx * dy).sum(), (weights * dy * dy).sum()],
    ]) / total
    values, vectors = np.linalg.eigh(cov)
    vx, vy = vectors[:, np.argmax(values)]
    angle = math.atan2(vy, vx)
    if angle <= -math.pi / 2:
        angle += math.pi
    elif angle > math.pi / 2:
        angle -= math.pi
    return angle


def lattice_pixels(height: int, width: int, points: int) -> List[Tuple[int, int]]:
    rows = ((np.arange(points) + 0.5) * height / points).astype(int)
    cols = ((np.arange(points) + 0.5) * width / points).astype(int)
    return [(int(r), int(c)) for r in rows for c in cols]


def kernel_grid(field: BlurField, points: int = 6) -> np.ndarray:
    """
    Tile the kernels of a P x P pixel lattice into one (P*K) x (P*K) image

    Every kernel is divided by its own maximum for display.
    """
    k = field.kernel_size
    grid = np.zeros((points * k, points * k))
    for i, (row, col) in enumerate(lattice_pixels(field.height, field.width, points)):
        kernel = field.kernel_at(row, col)
        peak = kernel.max()
        r, c = divmod(i, points)
        grid[r * k:(r + 1) * k, c * k:(c + 1) * k] = kernel / peak if peak > 0 else kernel
    return grid
