"""
MNIST Mirror Client

Fetches the MNIST IDX files from a public mirror.
"""

import logging
from pathlib import Path

import requests

logger = logging.getLogger(__name__)

BASE_URL = "https://storage.googleapis.com/cvdf-datasets/mnist"
TRAIN_FILES = ("train-images-idx3-ubyte.gz", "train-labels-idx1-ubyte.gz")


def fetch_file(url, dest, timeout=60):
    """Download url to dest; errors are logged and re-raised."""
    dest = Path(dest)
    try:
        resp = requests.get(url, timeout=timeout)
        resp.raise_for_status()
    except Exception as e:
        logger.error(f"Failed to fetch {url}: {e}")
        raise
    dest.parent.mkdir(parents=True, exist_ok=True)
    dest.write_bytes(resp.content)
    logger.info(f"Fetched {len(resp.content)} bytes from {url}")
    return dest


def download_mnist(dest_dir, base_url=BASE_URL, files=TRAIN_FILES):
    """
    Download the MNIST training files that are not present yet.

    Returns list of local paths, in the order of files.
    """
    dest_dir = Path(dest_dir)
    paths = []
    for name in files:
        path = dest_dir / name
        if path.exists():
            logger.info(f"Using cached {path}")
        else:
            fetch_file(f"{base_url}/{name}", path)
        paths.append(path)
    return paths
