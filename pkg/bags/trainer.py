"""
Coarse-to-fine joint optimization of the Gaussian cloud and the blur network

Stages run from the coarsest scale to full resolution. Each stage renders and
compares at 1/2^(s-1) resolution and owns one blur head; moving to the next
stage grows the next head and keeps every optimizer moment.
"""
import logging
import time
from dataclasses import dataclass, field
from typing import Callable, Dict, List, Optional, Sequence, Tuple

import numpy as np
import pandas as pd

from bags.bpn import BlurProposalNetwork, apply_blur, blend
from bags.config import RunConfig, Stage
from bags.densify import DensifyStats, apply_to_optimizer, densify_and_prune
from bags.errors import BagsError, ConfigError, ScheduleError, TrainingError
from bags.imaging import downsample
from bags.losses import loss_terms
from bags.optim import Adam, get_expon_lr_func
from bags.rasterizer import render_at_scale
from bags.rng import RngStreams
from bags.scene import Camera, GaussianCloud
from bags.tensor import as_tensor, get_default_dtype, no_grad

logger = logging.getLogger(__name__)

LOG_COLUMNS = ["iter", "scale", "l1", "dssim", "mask", "total"]

Sections = Dict[str, Tuple[dict, Dict[str, np.ndarray]]]


@dataclass
class TrainResult:
    cloud: GaussianCloud
    bpn: Optional[BlurProposalNetwork]
    log: pd.DataFrame
    stages: List[dict] = field(default_factory=list)
    mean_mask: Optional[float] = None


class Trainer:
    """
    Owns the mutable training state

    Args:
        cloud: initial Gaussians
        cameras: one camera per training view, view_index = position in the list
        images: observed 3 x H x W images in [0, 1], aligned with cameras
        config: run configuration
    """

    def __init__(self, cloud: GaussianCloud, cameras: Sequence[Camera], images: Sequence[np.ndarray],
                 config: RunConfig):
        if len(cameras) < 2:
            raise ConfigError(f"training needs at least 2 views, got {len(cameras)}")
        if len(images) != len(cameras):
            raise ConfigError(f"{len(cameras)} cameras but {len(images)} images")
        for i, (camera, image) in enumerate(zip(cameras, images)):
            if np.shape(image) != (3, camera.height, camera.width):
                raise ConfigError(
                    f"image {i} has shape {np.shape(image)}, camera expects (3, {camera.height}, {camera.width})"
                )
        self.config = config
        self.schedule = config.schedule
        self.cloud = cloud
        self.cameras = list(cameras)
        self.images = [np.asarray(image, dtype=get_default_dtype()) for image in images]
        self.rngs = RngStreams(config.seed)
        self.background = np.asarray(config.background, dtype=np.float64)

        self.bpn: Optional[BlurProposalNetwork] = None
        if config.use_bpn:
            self.bpn = BlurProposalNetwork(len(cameras), self.rngs.get("bpn"), use_rgbd=config.use_rgbd)

        lrs = config.lrs
        self.optimizer = Adam(
            {},
            lrs={
                "positions": lrs.positions,
                "log_scales": lrs.log_scales,
                "rotations": lrs.rotations,
                "opacity_logits": lrs.opacity_logits,
                "color_logits": lrs.color_logits,
                "bpn": lrs.bpn,
            },
            schedules={"positions": get_expon_lr_func(lrs.positions, lrs.positions_final, self.schedule.total_iterations)},
        )
        self.optimizer.add_params(self.cloud.parameters())
        if self.bpn is not None:
            self.optimizer.add_params(self.bpn.parameters())

        self.stats = DensifyStats(len(cloud))
        self.stage_index = 0
        self.stage_iter = 0
        self.iteration = 0
        self.view_queue: List[int] = []
        self.rows: List[list] = []
        self.stage_summaries: List[dict] = []
        self._pyramids: Dict[int, List[np.ndarray]] = {1: self.images}

    # observations
    def observations(self, factor: int) -> List[np.ndarray]:
        """Training images area-downsampled by a power-of-two factor (cached)"""
        if factor not in self._pyramids:
            self._pyramids[factor] = [downsample(image, factor) for image in self.images]
            logger.debug("Built observation pyramid level x%d", factor)
        return self._pyramids[factor]

    def next_view(self) -> int:
        if not self.view_queue:
            self.view_queue = [int(v) for v in self.rngs.get("views").permutation(len(self.cameras))]
        return self.view_queue.pop(0)

    @property
    def current_stage(self) -> Stage:
        return self.schedule.stages[self.stage_index]

    # stage transitions
    def enter_stage(self, stage: Stage) -> None:
        if self.bpn is not None and not self.bpn.has_head(stage.scale):
            self.optimizer.add_params(self.bpn.grow_head(stage.scale, stage.kernel_size, self.rngs.get("bpn")))
        logger.info("Stage scale %d: %d iterations, %dx%d kernels, %d Gaussians",
                    stage.scale, stage.iterations, stage.kernel_size, stage.kernel_size, len(self.cloud))

    def upscale_transition(self, scale: int) -> Stage:
        """
        Leave the stage at `scale` for the next finer one

        Observations switch to the finer pyramid level and the next blur head is
        grown; cloud parameters, older heads and optimizer moments carry over.
        """
        scales = [s.scale for s in self.schedule.stages]
        if scale not in scales or scales.index(scale) + 1 >= len(scales):
            raise ScheduleError(f"no stage follows scale {scale}")
        target = self.schedule.stages[scales.index(scale) + 1]
        self.observations(target.factor)
        self.enter_stage(target)
        return target

    # one optimization step
    def _mask_active(self, stage: Stage) -> bool:
        if self.bpn is None:
            return False
        return not (self.config.warmup and self.stage_iter < self.schedule.warmup_iters)

    def step(self, stage: Stage) -> Dict[str, float]:
        view = self.next_view()
        camera = self.cameras[view]
        observed = self.observations(stage.factor)[view]
        try:
            self.optimizer.zero_grad()
            out = render_at_scale(self.cloud, camera, stage.scale, self.background, self.config.tile_size)
            out.projected.means2d.retain_grad()
            color = out.color
            if self._mask_active(stage):
                features = (color.detach(), out.depth.detach()) if self.config.detach_bpn_inputs else (color, out.depth)
                blur = self.bpn.propose(features[0], features[1], view, stage.scale)
                c_out = blend(color, apply_blur(color, blur), blur.mask)
                mask = blur.mask
            else:
                c_out = color
                mask = as_tensor(np.zeros(color.shape[1:]), color)
            terms = loss_terms(c_out, observed, mask, self.config.weights)
            terms["total"].backward()
            self.stats.add(out.projected, out.width, out.height)
            self.optimizer.step(self.iteration)
            self.cloud.normalize_rotations()
        except BagsError as e:
            raise TrainingError(self.iteration + 1, view, e) from e

        values = {name: terms[name].item() for name in ("l1", "dssim", "mask", "total")}
        self.rows.append([self.iteration + 1, stage.scale, values["l1"], values["dssim"], values["mask"], values["total"]])
        logger.debug("iter %d view %d scale %d loss %.6f", self.iteration + 1, view, stage.scale, values["total"])
        return values

    def _maybe_densify(self, stage: Stage) -> None:
        cfg = self.config.densify
        done = self.stage_iter
        if not cfg.enabled or done % cfg.interval != 0 or done >= (1.0 - cfg.stop_fraction) * stage.iterations:
            return
        result = densify_and_prune(self.cloud, self.stats, cfg, self.rngs.get("densify"))
        if result.changed:
            self.cloud = result.cloud
            apply_to_optimizer(result, self.optimizer)
        self.stats.reset(len(self.cloud))

    # main loop
    def run(self, progress: Optional[Callable[[int, Dict[str, float], Stage], None]] = None,
            on_checkpoint: Optional[Callable[["Trainer"], None]] = None) -> TrainResult:
        stages = self.schedule.stages
        while self.stage_index < len(stages):
            stage = stages[self.stage_index]
            if self.stage_iter == 0:
                if self.stage_index == 0:
                    self.enter_stage(stage)
                else:
                    self.upscale_transition(stages[self.stage_index - 1].scale)
            started = time.perf_counter()
            while self.stage_iter < stage.iterations:
                values = self.step(stage)
                self.stage_iter += 1
                self.iteration += 1
                self._maybe_densify(stage)
                if progress is not None:
                    progress(self.iteration, values, stage)
                every = self.config.checkpoint_every
                if on_checkpoint is not None and every and self.iteration % every == 0:
                    on_checkpoint(self)
            self.stage_summaries.append({
                "scale": stage.scale,
                "kernel": stage.kernel_size,
                "iterations": stage.iterations,
                "seconds": round(time.perf_counter() - started, 3),
                "gaussians": len(self.cloud),
            })
            self.stage_index += 1
            self.stage_iter = 0

        return TrainResult(self.cloud, self.bpn, self.loss_log(), list(self.stage_summaries), self.mean_mask())

    def loss_log(self) -> pd.DataFrame:
        log = pd.DataFrame(self.rows, columns=LOG_COLUMNS)
        return log.astype({"iter": "int64", "scale": "int64"})

    def mean_mask(self) -> Optional[float]:
        """Mean BPN mask over every training view at the final scale"""
        if self.bpn is None:
            return None
        stage = self.schedule.stages[-1]
        if not self.bpn.has_head(stage.scale):
            return None
        means = []
        with no_grad():
            for view, camera in enumerate(self.cameras):
                out = render_at_scale(self.cloud, camera, stage.scale, self.background, self.config.tile_size)
                blur = self.bpn.propose(out.color, out.depth, view, stage.scale)
                means.append(float(blur.mask.data.mean()))
        return float(np.mean(means))

    # checkpoint support
    def snapshot(self) -> Sections:
        """Checkpoint sections: cloud, network, optimizer, schedule position, RNG streams"""
        sections: Sections = {"cloud": ({}, self.cloud.arrays())}
        if self.bpn is not None:
            sections["bpn"] = (self.bpn.describe(), self.bpn.arrays())
        sections["optimizer"] = ({"steps": self.optimizer.state_steps()}, self.optimizer.state_arrays())
        log = np.asarray([row for row in self.rows], dtype=np.float64).reshape(-1, len(LOG_COLUMNS))
        sections["schedule"] = (
            {
                "stage_index": self.stage_index,
                "stage_iter": self.stage_iter,
                "iteration": self.iteration,
                "view_queue": list(self.view_queue),
                "stage_summaries": list(self.stage_summaries),
                "config": self.config.to_dict(),
            },
            {"loss_log": log, "densify_grad_sum": self.stats.grad_sum, "densify_count": self.stats.count},
        )
        sections["rng"] = ({"streams": self.rngs.state()}, {})
        return sections

    def restore(self, sections: Sections) -> None:
        """Continue from a snapshot taken with the same dataset and configuration"""
        self.cloud = GaussianCloud.from_arrays(sections["cloud"][1])
        if "bpn" in sections:
            if self.bpn is None:
                raise ConfigError("checkpoint holds a blur network but this run has the network disabled")
            description, arrays = sections["bpn"]
            self.bpn = BlurProposalNetwork.from_arrays(description, arrays)
        elif self.bpn is not None:
            raise ConfigError("checkpoint has no blur network but this run expects one")

        lrs, schedules = self.optimizer.lrs, self.optimizer.schedules
        self.optimizer = Adam({}, lrs=lrs, schedules=schedules, betas=self.optimizer.betas, eps=self.optimizer.eps)
        self.optimizer.add_params(self.cloud.parameters())
        if self.bpn is not None:
            self.optimizer.add_params(self.bpn.parameters())
        meta, arrays = sections["optimizer"]
        self.optimizer.load_state(arrays, meta.get("steps", {}))

        meta, arrays = sections["schedule"]
        self.stage_index = int(meta["stage_index"])
        self.stage_iter = int(meta["stage_iter"])
        self.iteration = int(meta["iteration"])
        self.view_queue = [int(v) for v in meta["view_queue"]]
        self.stage_summaries = list(meta.get("stage_summaries", []))
        self.rows = [[int(r[0]), int(r[1]), *map(float, r[2:])] for r in arrays["loss_log"]]
        self.stats = DensifyStats(len(self.cloud))
        if arrays["densify_grad_sum"].shape[0] == len(self.cloud):
            self.stats.grad_sum = arrays["densify_grad_sum"].astype(np.float64)
            self.stats.count = arrays["densify_count"].astype(np.int64)
        self.rngs.load_state(sections["rng"][0]["streams"])
        logger.info("Resumed at iteration %d (stage %d, step %d)", self.iteration, self.stage_index, self.stage_iter)


def upscale_transition(trainer: Trainer, scale: int) -> Stage:
    return trainer.upscale_transition(scale)


def train(cloud: GaussianCloud, cameras: Sequence[Camera], images: Sequence[np.ndarray], config: RunConfig,
          progress=None) -> TrainResult:
    """Run the full schedule and return the trained cloud, network and loss log"""
    return Trainer(cloud, cameras, images, config).run(progress=progress)
