"""
Toy image generators for desk-scale experiments
"""

import logging
from pathlib import Path
from typing import List, Union

import numpy as np

from .imaging import ImagePlane, save_image

logger = logging.getLogger(__name__)

PATTERNS = ("checkerboard", "gradient", "grating", "blobs", "noise", "mosaic")


def pattern_image(pattern: str, height: int, width: int, rng: np.random.Generator) -> ImagePlane:
    """Generate one pattern image with randomized colours and scales"""
    yy, xx = np.mgrid[0:height, 0:width].astype(np.float64)
    low = rng.uniform(0.0, 0.4, size=3)
    high = rng.uniform(0.6, 1.0, size=3)

    if pattern == "checkerboard":
        cell = int(rng.integers(4, 17))
        mask = ((yy // cell + xx // cell) % 2)[..., None]
    elif pattern == "gradient":
        angle = rng.uniform(0.0, np.pi)
        ramp = np.cos(angle) * xx / max(width - 1, 1) + np.sin(angle) * yy / max(height - 1, 1)
        mask = ((ramp - ramp.min()) / max(np.ptp(ramp), 1e-12))[..., None]
    elif pattern == "grating":
        period = rng.uniform(4.0, 16.0)
        angle = rng.uniform(0.0, np.pi)
        phase = np.cos(angle) * xx + np.sin(angle) * yy
        mask = (0.5 + 0.5 * np.sin(2.0 * np.pi * phase / period))[..., None]
    elif pattern == "blobs":
        field = np.zeros((height, width))
        for _ in range(int(rng.integers(3, 8))):
            cy, cx = rng.uniform(0, height), rng.uniform(0, width)
            radius = rng.uniform(3.0, max(height, width) / 3.0)
            field += np.exp(-((yy - cy) ** 2 + (xx - cx) ** 2) / (2.0 * radius ** 2))
        mask = (field / max(field.max(), 1e-12))[..., None]
    elif pattern == "noise":
        mask = rng.uniform(0.0, 1.0, size=(height, width, 1))
    elif pattern == "mosaic":
        # flat left half, textured right half
        texture = (rng.uniform(0.0, 1.0, size=(height, width)) > 0.5).astype(np.float64)
        texture[:, : width // 2] = 0.5
        mask = texture[..., None]
    else:
        raise ValueError(f"unknown pattern '{pattern}'; expected one of {PATTERNS}")

    data = low + (high - low) * mask
    return ImagePlane(data=np.clip(data, 0.0, 1.0), metadata={"pattern": pattern})


def random_crop(image: ImagePlane, height: int, width: int, rng: np.random.Generator) -> ImagePlane:
    if height > image.height or width > image.width:
        raise ValueError("crop larger than image")
    y0 = int(rng.integers(0, image.height - height + 1))
    x0 = int(rng.integers(0, image.width - width + 1))
    data = image.data[y0:y0 + height, x0:x0 + width].copy()
    return ImagePlane(data=data, metadata={**image.metadata, "crop": (y0, x0)})


def toy_dataset(count: int, size: int = 64, seed: int = 0) -> List[ImagePlane]:
    """Textures cycling through every pattern; every third image is a crop of a larger one"""
    rng = np.random.default_rng(seed)
    images = []
    for index in range(count):
        pattern = PATTERNS[index % len(PATTERNS)]
        if index % 3 == 2:
            source = pattern_image(pattern, 2 * size, 2 * size, rng)
            images.append(random_crop(source, size, size, rng))
        else:
            images.append(pattern_image(pattern, size, size, rng))
    return images


def write_dataset(directory: Union[str, Path], count: int, size: int = 64, seed: int = 0) -> List[Path]:
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    paths = []
    for index, image in enumerate(toy_dataset(count, size=size, seed=seed)):
        paths.append(save_image(image, directory / f"toy_{index:03d}.ppm"))
    logger.info("wrote %d toy images to %s", len(paths), directory)
    return paths
