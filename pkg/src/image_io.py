"""
Binary PPM previews through Pillow.
"""

import logging
import os

import numpy as np
from PIL import Image

from src.exceptions import ShapeError

logging.basicConfig(
    level=logging.INFO,
    format='%(asctime)s - %(name)s - %(levelname)s - %(message)s'
)
logger = logging.getLogger(__name__)


def to_uint8(image: np.ndarray) -> np.ndarray:
    """(C, H, W) floats in [0, 1] -> (H, W, 3) bytes; one channel is replicated to gray."""
    image = np.asarray(image, dtype=np.float64)
    if image.ndim != 3 or image.shape[0] not in (1, 3):
        raise ShapeError(f"ppm: expected (1 or 3, H, W) image, got {image.shape}")
    if image.shape[0] == 1:
        image = np.repeat(image, 3, axis=0)
    return np.ascontiguousarray(np.clip(np.round(image * 255.0), 0, 255).astype(np.uint8).transpose(1, 2, 0))


def write_ppm(path: str, image: np.ndarray) -> str:
    directory = os.path.dirname(path)
    if directory:
        os.makedirs(directory, exist_ok=True)
    Image.fromarray(to_uint8(image)).save(path, format="PPM")
    logger.debug(f"Wrote {path}")
    return path


def read_ppm(path: str) -> np.ndarray:
    with Image.open(path) as img:
        pixels = np.asarray(img.convert("RGB"), dtype=np.float32)
    return (pixels / 255.0).transpose(2, 0, 1)
