import logging
from functools import lru_cache
from pathlib import Path

import numpy as np
from PIL import Image

from ..domain import ImageRecord
from ..exceptions import DatasetError

logger = logging.getLogger(__name__)

IMAGE_SUFFIXES = (".png", ".jpg", ".jpeg")


@lru_cache(maxsize=65536)
def _decode(path: str, size: int) -> np.ndarray:
    """Decoded 8-bit [3, size, size] pixels, read-only."""
    try:
        with Image.open(path) as image:
            rgb = image.convert("RGB")
            if rgb.size != (size, size):
                rgb = rgb.resize((size, size), Image.Resampling.BILINEAR)
            array = np.asarray(rgb, dtype=np.uint8)
    except OSError as e:
        logger.error(f"Failed to decode image {path}: {e}")
        raise DatasetError(f"Unreadable image {path}: {e}") from e
    # HWC -> CHW, the layout the network consumes
    decoded = np.ascontiguousarray(array.transpose(2, 0, 1))
    decoded.flags.writeable = False
    return decoded


def load_pixels(record: ImageRecord, size: int) -> np.ndarray:
    """
    Return the [3, size, size] float32 pixels of an image record in [0, 1].
    File-backed images are decoded once per (path, size) and cached as uint8.
    """
    if record.pixels is not None:
        if record.pixels.shape[-1] != size:
            raise DatasetError(
                f"{record.ref} holds {record.pixels.shape[-1]}px pixels, {size}px requested"
            )
        return record.pixels
    return _decode(record.ref, size).astype(np.float32) / np.float32(255.0)


def store_png(pixels: np.ndarray, file_path: Path) -> Path:
    """Write [3, H, W] pixels in [0, 1] as an 8-bit PNG, creating parent folders."""
    file_path.parent.mkdir(parents=True, exist_ok=True)
    array = np.clip(np.rint(pixels.transpose(1, 2, 0) * 255.0), 0, 255).astype(np.uint8)
    Image.fromarray(array).save(file_path, format="PNG")
    return file_path


def is_image_file(path: Path) -> bool:
    return path.is_file() and path.suffix.lower() in IMAGE_SUFFIXES
