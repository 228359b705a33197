"""Image files: 8-bit PPM/PGM/PNG through Pillow and a raw float32 planar dump."""
import logging
from pathlib import Path

import numpy as np
from PIL import Image

logger = logging.getLogger(__name__)

_FORMATS = {".ppm": "PPM", ".pgm": "PPM", ".png": "PNG"}


def to_uint8(image):
    return np.clip(np.rint(np.asarray(image, dtype=np.float64) * 255.0), 0, 255).astype(np.uint8)


def write_image(path, image):
    """Write an (H, W, 3) colour or (H, W) grey image with values in [0, 1]."""
    path = Path(path)
    fmt = _FORMATS.get(path.suffix.lower())
    if fmt is None:
        raise ValueError(f"unsupported image extension: {path.suffix}")
    data = to_uint8(image)
    mode = "L" if data.ndim == 2 else "RGB"
    Image.fromarray(data, mode=mode).save(path, format=fmt)


def read_image(path):
    with Image.open(path) as img:
        if img.mode not in ("RGB", "L"):
            img = img.convert("RGB")
        return np.asarray(img, dtype=np.float64) / 255.0


def write_raw(path, image):
    """Little-endian float32, one plane per channel."""
    image = np.asarray(image, dtype=np.float64)
    if image.ndim == 2:
        image = image[..., None]
    Path(path).write_bytes(np.ascontiguousarray(image.transpose(2, 0, 1)).astype("<f4").tobytes())


def read_raw(path, height, width, channels=3):
    data = np.frombuffer(Path(path).read_bytes(), dtype="<f4")
    if data.size != channels * height * width:
        raise ValueError(f"raw image has {data.size} values, expected {channels * height * width}")
    return data.reshape(channels, height, width).transpose(1, 2, 0).astype(np.float64)
