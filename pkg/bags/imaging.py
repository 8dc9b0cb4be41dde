"""Plain-array image helpers: block averaging, resampling and 8-bit conversion"""
import numpy as np
from scipy import ndimage

from bags.errors import ShapeError


def is_power_of_two(value: int) -> bool:
    return value >= 1 and (value & (value - 1)) == 0


def area_downscale(image: np.ndarray, factor: int) -> np.ndarray:
    """
    Mean over factor x factor blocks of the last two axes

    When a side is not a multiple of the factor the image is edge-clamped up to
    the next multiple, so the output side is ceil(side / factor).
    """
    factor = int(factor)
    if factor < 1:
        raise ValueError(f"downscale factor must be >= 1, got {factor}")
    if factor == 1:
        return image.copy()
    if image.ndim < 2:
        raise ShapeError("image needs two spatial axes", image.shape)
    h, w = image.shape[-2:]
    out_h, out_w = -(-h // factor), -(-w // factor)
    pad = [(0, 0)] * (image.ndim - 2) + [(0, out_h * factor - h), (0, out_w * factor - w)]
    padded = np.pad(image, pad, mode="edge")
    blocks = padded.reshape(image.shape[:-2] + (out_h, factor, out_w, factor))
    return blocks.mean(axis=(-3, -1))


def downsample(image: np.ndarray, factor: int) -> np.ndarray:
    """Area averaging by a power-of-two factor (the coarse-to-fine pyramid step)"""
    if not is_power_of_two(int(factor)):
        raise ValueError(f"pyramid factor must be a power of two, got {factor}")
    return area_downscale(image, factor)


def bilinear_upscale(image: np.ndarray, height: int, width: int) -> np.ndarray:
    """Resample the last two axes to height x width with pixel-center alignment"""
    h, w = image.shape[-2:]
    rows = (np.arange(height) + 0.5) * (h / height) - 0.5
    cols = (np.arange(width) + 0.5) * (w / width) - 0.5
    grid = np.meshgrid(rows, cols, indexing="ij")
    flat = image.reshape((-1, h, w))
    out = np.stack([ndimage.map_coordinates(plane, grid, order=1, mode="nearest") for plane in flat])
    return out.reshape(image.shape[:-2] + (height, width))


def to_uint8(image: np.ndarray) -> np.ndarray:
    """C x H x W floats in [0, 1] -> H x W x C bytes (H x W stays 2D)"""
    data = np.clip(np.asarray(image, dtype=np.float64), 0.0, 1.0)
    data = np.round(data * 255.0).astype(np.uint8)
    if data.ndim == 3:
        data = np.transpose(data, (1, 2, 0))
        if data.shape[2] == 1:
            data = data[:, :, 0]
    return data


def from_uint8(pixels: np.ndarray, dtype=np.float64) -> np.ndarray:
    """H x W x C (or H x W) bytes -> C x H x W floats in [0, 1], alpha dropped"""
    data = np.asarray(pixels)
    if data.ndim == 2:
        data = data[:, :, None]
    data = data[:, :, :3]
    if data.shape[2] == 1:
        data = np.repeat(data, 3, axis=2)
    scale = 65535.0 if data.dtype == np.uint16 else 255.0
    return np.transpose(data.astype(dtype) / scale, (2, 0, 1))
