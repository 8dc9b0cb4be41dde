"""Training loss terms and evaluation metrics"""
import math
from dataclasses import asdict, dataclass
from typing import Dict

import numpy as np
from skimage.metrics import structural_similarity

from bags.errors import ConfigError, ShapeError
from bags.functional import filter_valid
from bags.tensor import Tensor, as_tensor

SSIM_WINDOW = 11
SSIM_SIGMA = 1.5
SSIM_C1 = 0.01 ** 2
SSIM_C2 = 0.03 ** 2


@dataclass
class LossWeights:
    photo: float = 0.8
    dssim: float = 0.2
    mask: float = 0.01

    def __post_init__(self):
        for name, value in asdict(self).items():
            if value < 0:
                raise ConfigError(f"loss weight '{name}' must be non-negative, got {value}")


def _check_pair(a: Tensor, b: Tensor, what: str) -> None:
    if a.shape != b.shape:
        raise ShapeError(f"{what} needs images of equal shape", a.shape, b.shape)


def l1(a, b) -> Tensor:
    """Mean absolute difference"""
    a, b = as_tensor(a), as_tensor(b)
    _check_pair(a, b, "l1")
    return (a - b).abs().mean()


def gaussian_window(size: int = SSIM_WINDOW, sigma: float = SSIM_SIGMA) -> np.ndarray:
    offsets = np.arange(size) - (size - 1) / 2.0
    g = np.exp(-(offsets ** 2) / (2.0 * sigma ** 2))
    g /= g.sum()
    return np.outer(g, g)


def ssim(a, b, window: int = SSIM_WINDOW, sigma: float = SSIM_SIGMA) -> Tensor:
    """Mean SSIM of two C x H x W images in [0, 1] over valid Gaussian windows"""
    a, b = as_tensor(a), as_tensor(b)
    _check_pair(a, b, "ssim")
    if a.ndim != 3 or a.shape[1] < window or a.shape[2] < window:
        raise ShapeError(f"ssim needs C x H x W images of at least {window}x{window}", a.shape)
    w = gaussian_window(window, sigma)
    mu_a, mu_b = filter_valid(a, w), filter_valid(b, w)
    var_a = filter_valid(a * a, w) - mu_a * mu_a
    var_b = filter_valid(b * b, w) - mu_b * mu_b
    cov = filter_valid(a * b, w) - mu_a * mu_b
    numerator = (2.0 * mu_a * mu_b + SSIM_C1) * (2.0 * cov + SSIM_C2)
    denominator = (mu_a * mu_a + mu_b * mu_b + SSIM_C1) * (var_a + var_b + SSIM_C2)
    return (numerator / denominator).mean()


def d_ssim(a, b, window: int = SSIM_WINDOW, sigma: float = SSIM_SIGMA) -> Tensor:
    return (1.0 - ssim(a, b, window, sigma)) / 2.0


def mask_sparsity(mask) -> Tensor:
    return as_tensor(mask).mean()


def loss_terms(c_out, c_obs, mask, weights: LossWeights) -> Dict[str, Tensor]:
    """The three weighted terms and their sum (key "total")"""
    terms = {
        "l1": l1(c_out, c_obs),
        "dssim": d_ssim(c_out, c_obs),
        "mask": mask_sparsity(mask),
    }
    terms["total"] = weights.photo * terms["l1"] + weights.dssim * terms["dssim"] + weights.mask * terms["mask"]
    return terms


def total_loss(c_out, c_obs, mask, weights: LossWeights) -> Tensor:
    return loss_terms(c_out, c_obs, mask, weights)["total"]


def psnr(a: np.ndarray, b: np.ndarray) -> float:
    """Peak signal-to-noise ratio in dB for [0, 1] images; inf when identical"""
    a, b = np.asarray(a, dtype=np.float64), np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise ShapeError("psnr needs images of equal shape", a.shape, b.shape)
    mse = float(np.mean((a - b) ** 2))
    if mse == 0.0:
        return math.inf
    return 10.0 * math.log10(1.0 / mse)


def ssim_metric(a: np.ndarray, b: np.ndarray) -> float:
    """Reference SSIM of two 3 x H x W images, same window and constants as the loss"""
    return float(structural_similarity(
        np.asarray(a, dtype=np.float64), np.asarray(b, dtype=np.float64),
        channel_axis=0, data_range=1.0, gaussian_weights=True, sigma=SSIM_SIGMA,
        use_sample_covariance=False,
    ))
