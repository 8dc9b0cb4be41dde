"""Dataset and checkpoint persistence"""
from .store import DatasetStore, read_gaussians_ply, write_gaussians_ply, read_png, write_png, read_metrics, write_metrics
from .checkpoint import CheckpointStore

__all__ = [
    'DatasetStore',
    'CheckpointStore',
    'read_gaussians_ply',
    'write_gaussians_ply',
    'read_png',
    'write_png',
    'read_metrics',
    'write_metrics'
]
