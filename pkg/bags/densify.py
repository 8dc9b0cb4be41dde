"""Adaptive density control: clone, split and prune Gaussians"""
import logging
from dataclasses import dataclass
from typing import Dict, Optional

import numpy as np
from scipy.special import expit

from bags.config import DensifyConfig
from bags.optim import Adam
from bags.rasterizer import Projected2D
from bags.scene import GaussianCloud, rotation_matrices

logger = logging.getLogger(__name__)

SPLIT_SHRINK = 1.6


class DensifyStats:
    """Running sum of screen-space positional gradient norms per Gaussian"""

    def __init__(self, n: int):
        self.reset(n)

    def reset(self, n: int) -> None:
        self.grad_sum = np.zeros(n)
        self.count = np.zeros(n, dtype=np.int64)

    def add(self, projected: Projected2D, width: int, height: int) -> None:
        """Record one view; needs projected.means2d.retain_grad() before backward()"""
        grad = projected.means2d.grad
        if grad is None or len(projected) == 0:
            return
        # pixel gradients scaled to normalized device coordinates
        ndc = grad * np.array([0.5 * width, 0.5 * height])
        self.grad_sum[projected.source] += np.linalg.norm(ndc, axis=1)
        self.count[projected.source] += 1

    def mean(self) -> np.ndarray:
        return np.where(self.count > 0, self.grad_sum / np.maximum(self.count, 1), 0.0)


@dataclass
class DensifyResult:
    cloud: GaussianCloud
    source_rows: np.ndarray
    cloned: int = 0
    split: int = 0
    pruned: int = 0

    @property
    def changed(self) -> bool:
        return bool(self.cloned or self.split or self.pruned)


def densify_and_prune(cloud: GaussianCloud, stats: DensifyStats, config: DensifyConfig,
                      rng: np.random.Generator) -> DensifyResult:
    """
    Clone small hot Gaussians, split large hot ones in two, drop transparent ones

    Row order of the result: surviving originals, then clones, then split
    children (two per parent, adjacent). source_rows gives, for each output
    row, the original row it continues (-1 for new rows).
    """
    arrays = cloud.arrays()
    n = len(cloud)
    mean_grad = stats.mean()
    max_scale = np.exp(arrays["log_scales"]).max(axis=1) if n else np.zeros(0)

    hot = np.nonzero(mean_grad > config.grad_threshold)[0]
    room = config.max_gaussians - n
    if hot.size > max(room, 0):
        # hottest first; each clone or split adds exactly one row
        hot = np.sort(hot[np.argsort(-mean_grad[hot], kind="stable")][:max(room, 0)])
        logger.warning("Densification capped at %d Gaussians", config.max_gaussians)
    clone = hot[max_scale[hot] <= config.split_scale_threshold]
    split = hot[max_scale[hot] > config.split_scale_threshold]
    if hot.size == 0 and not np.any(cloud.opacities < config.opacity_prune):
        return DensifyResult(cloud, np.arange(n, dtype=np.int64))

    keep = np.setdiff1d(np.arange(n), split)
    parents = np.repeat(split, 2)
    scales = np.exp(arrays["log_scales"][parents])
    samples = rng.normal(0.0, 1.0, size=scales.shape) * scales
    offsets = np.einsum("nij,nj->ni", rotation_matrices(arrays["rotations"][parents]), samples) if parents.size else samples

    new_arrays: Dict[str, np.ndarray] = {}
    for name, values in arrays.items():
        children = values[parents]
        if name == "positions":
            children = children + offsets
        elif name == "log_scales":
            children = np.log(np.exp(children) / SPLIT_SHRINK)
        new_arrays[name] = np.concatenate([values[keep], values[clone], children], axis=0)
    source_rows = np.concatenate([keep, np.full(clone.size + parents.size, -1)]).astype(np.int64)

    opacity = expit(new_arrays["opacity_logits"][:, 0])
    survivors = np.nonzero(opacity >= config.opacity_prune)[0]
    pruned = len(opacity) - survivors.size
    if pruned:
        new_arrays = {name: values[survivors] for name, values in new_arrays.items()}
        source_rows = source_rows[survivors]
    if survivors.size == 0:
        logger.warning("Pruning removed every Gaussian; the cloud is empty")

    result = DensifyResult(GaussianCloud.from_arrays(new_arrays), source_rows, int(clone.size), int(split.size), int(pruned))
    if result.changed:
        logger.info("Densify: %d cloned, %d split, %d pruned -> %d Gaussians",
                    result.cloned, result.split, result.pruned, len(result.cloud))
    return result


def apply_to_optimizer(result: DensifyResult, optimizer: Optional[Adam]) -> None:
    """Point the optimizer at the new cloud tensors, carrying moments of surviving rows"""
    if optimizer is None:
        return
    for name, tensor in result.cloud.parameters().items():
        optimizer.replace(name, tensor, result.source_rows)
