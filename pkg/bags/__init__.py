"""Blur-agnostic Gaussian splatting"""
from .errors import BagsError
from .tensor import Tensor, no_grad, set_default_dtype
from .scene import Camera, GaussianCloud, init_from_points
from .rasterizer import render, render_at_scale
from .bpn import BlurProposalNetwork, BlurField
from .config import RunConfig, ScaleSchedule, Stage
from .trainer import Trainer, train
from .blur_synth import BlurSpec, synthesize

__all__ = [
    'BagsError',
    'Tensor',
    'no_grad',
    'set_default_dtype',
    'Camera',
    'GaussianCloud',
    'init_from_points',
    'render',
    'render_at_scale',
    'BlurProposalNetwork',
    'BlurField',
    'RunConfig',
    'ScaleSchedule',
    'Stage',
    'Trainer',
    'train',
    'BlurSpec',
    'synthesize'
]
