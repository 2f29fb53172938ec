"""Utilities for persistence, images, reports and the MNIST download."""

from .client import download_mnist, fetch_file
from .container import ContainerError, read_container, write_container
from .images import magnitude, montage, save_image, to_uint8
from .models import EpochRecord, MetricRecord, MetricReport, RunManifest, TrainReport

__all__ = [
    "ContainerError",
    "EpochRecord",
    "MetricRecord",
    "MetricReport",
    "RunManifest",
    "TrainReport",
    "download_mnist",
    "fetch_file",
    "magnitude",
    "montage",
    "read_container",
    "save_image",
    "to_uint8",
    "write_container",
]
