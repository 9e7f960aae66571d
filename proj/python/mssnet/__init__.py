"""Sparse multi-scale point cloud segmentation (C++ core via pybind11)."""

from ._mssnet import (
    Error,
    Model,
    __version__,
    cross_entropy,
    lovasz_softmax,
    metrics,
    run_cli,
    synthetic_scene,
    version,
    voxelize,
)

__all__ = [
    "Error",
    "Model",
    "__version__",
    "cross_entropy",
    "lovasz_softmax",
    "metrics",
    "run_cli",
    "synthetic_scene",
    "version",
    "voxelize",
]
