"""
Image Output

8-bit grayscale emission (PNG and binary PGM) and tile montages.
"""

import logging
from pathlib import Path

import numpy as np
from PIL import Image

logger = logging.getLogger(__name__)


def magnitude(image):
    """|x| of a 2-channel (real, imaginary) grid; 1-channel grids pass through."""
    image = np.asarray(image, dtype=np.float64)
    if image.ndim == 3 and image.shape[0] == 2:
        return np.hypot(image[0], image[1])
    if image.ndim == 3 and image.shape[0] == 1:
        return image[0]
    return image


def to_uint8(image, low=None, high=None):
    """Linearly map [low, high] (defaults: image min/max) onto 0..255."""
    image = np.asarray(image, dtype=np.float64)
    low = image.min() if low is None else low
    high = image.max() if high is None else high
    if high <= low:
        return np.zeros(image.shape, dtype=np.uint8)
    scaled = (np.clip(image, low, high) - low) / (high - low)
    return np.round(scaled * 255.0).astype(np.uint8)


def montage(tiles, columns=None, pad=1, fill=None):
    """
    Arrange equally sized 2D tiles on a grid.

    Args:
        tiles: Sequence of (H, W) arrays.
        columns: Tiles per row; defaults to ceil(sqrt(n)).
        pad: Pixels between tiles.
        fill: Background value; defaults to the tiles' minimum.
    """
    tiles = [np.asarray(t, dtype=np.float64) for t in tiles]
    if not tiles:
        raise ValueError("montage needs at least one tile")
    height, width = tiles[0].shape
    columns = columns or int(np.ceil(np.sqrt(len(tiles))))
    rows = int(np.ceil(len(tiles) / columns))
    fill = min(t.min() for t in tiles) if fill is None else fill
    canvas = np.full((rows * (height + pad) - pad, columns * (width + pad) - pad), fill)
    for i, tile in enumerate(tiles):
        r, c = divmod(i, columns)
        canvas[r * (height + pad) : r * (height + pad) + height, c * (width + pad) : c * (width + pad) + width] = tile
    return canvas


def save_image(path, image, low=None, high=None):
    """Write a 2D array as 8-bit grayscale; format follows the suffix (.png or .pgm)."""
    path = Path(path)
    if path.suffix.lower() not in (".png", ".pgm"):
        raise ValueError(f"unsupported image format: {path.suffix}")
    path.parent.mkdir(parents=True, exist_ok=True)
    Image.fromarray(to_uint8(image, low, high)).save(path)
    logger.debug(f"Wrote {path}")
    return path
