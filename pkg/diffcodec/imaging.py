"""
Image planes, file I/O, block partitioning and high-pass residual statistics
"""

import logging
import re
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Dict, List, Union

import numpy as np

from .errors import DataError, ImageFormatError
from .fsutil import atomic_write_bytes

try:
    import cv2  # type: ignore
except ImportError as exc:  # pragma: no cover - exercised only without OpenCV
    cv2 = None  # type: ignore
    _CV2_IMPORT_ERROR = exc
else:  # pragma: no cover - exercised when OpenCV is available
    _CV2_IMPORT_ERROR = None

logger = logging.getLogger(__name__)

LAPLACIAN = np.array([[0.0, -1.0, 0.0], [-1.0, 4.0, -1.0], [0.0, -1.0, 0.0]])
ACTIVITY_THRESHOLD = 0.05
PPM_SUFFIXES = {".ppm", ".pnm"}


def _require_cv2():
    """Ensure OpenCV is available before executing a function that depends on it."""
    if cv2 is None:
        raise RuntimeError(
            "OpenCV (cv2) is required for this operation. Install opencv-python-headless."
        ) from _CV2_IMPORT_ERROR


@dataclass
class ImagePlane:
    """RGB image with values in [0, 1], stored as (height, width, 3) float64"""
    data: np.ndarray
    metadata: Dict[str, Any] = field(default_factory=dict)

    def __post_init__(self):
        self.data = np.asarray(self.data, dtype=np.float64)
        if self.data.ndim != 3 or self.data.shape[2] != 3 or self.data.shape[0] == 0 or self.data.shape[1] == 0:
            raise DataError(f"image must have shape (H, W, 3), got {self.data.shape}")
        if not np.all(np.isfinite(self.data)) or self.data.min() < 0.0 or self.data.max() > 1.0:
            raise DataError("image values must lie in [0, 1]")

    @property
    def height(self) -> int:
        return self.data.shape[0]

    @property
    def width(self) -> int:
        return self.data.shape[1]

    @property
    def channels(self) -> int:
        return 3

    @property
    def pixels(self) -> int:
        return self.height * self.width

    def copy(self) -> "ImagePlane":
        return ImagePlane(data=self.data.copy(), metadata=self.metadata.copy())

    def to_bytes(self) -> np.ndarray:
        """8-bit pixel values, rounded"""
        return np.round(np.clip(self.data, 0.0, 1.0) * 255.0).astype(np.uint8)

    @classmethod
    def from_bytes(cls, pixels: np.ndarray, **metadata) -> "ImagePlane":
        return cls(data=np.asarray(pixels, dtype=np.float64) / 255.0, metadata=dict(metadata))

    def to_chw(self) -> np.ndarray:
        """(1, 3, H, W) batch layout used by the networks"""
        return np.ascontiguousarray(self.data.transpose(2, 0, 1)[None])

    @classmethod
    def from_chw(cls, array: np.ndarray) -> "ImagePlane":
        return cls(data=np.clip(array[0].transpose(1, 2, 0), 0.0, 1.0))

    def crop(self, height: int, width: int) -> "ImagePlane":
        return ImagePlane(data=self.data[:height, :width].copy(), metadata=self.metadata.copy())


# Image file I/O

_PPM_TOKEN = re.compile(rb"(\d+)")


def decode_ppm(blob: bytes, source: str = "<bytes>") -> ImagePlane:
    """Parse a binary 8-bit portable pixmap"""
    if not blob.startswith(b"P6"):
        raise ImageFormatError(source, "missing P6 magic")
    values = []
    pos = 2
    while len(values) < 3:
        # whitespace and comments between header fields
        while pos < len(blob) and (blob[pos:pos + 1].isspace() or blob[pos:pos + 1] == b"#"):
            if blob[pos:pos + 1] == b"#":
                end = blob.find(b"\n", pos)
                if end < 0:
                    raise ImageFormatError(source, "unterminated header comment")
                pos = end + 1
            else:
                pos += 1
        match = _PPM_TOKEN.match(blob, pos)
        if match is None:
            raise ImageFormatError(source, "malformed header")
        values.append(int(match.group(1)))
        pos = match.end()
    width, height, maxval = values
    if width <= 0 or height <= 0:
        raise ImageFormatError(source, f"invalid dimensions {width}x{height}")
    if maxval != 255:
        raise ImageFormatError(source, f"unsupported maxval {maxval} (only 8-bit)")
    if pos >= len(blob) or not blob[pos:pos + 1].isspace():
        raise ImageFormatError(source, "missing separator after header")
    pos += 1
    expected = width * height * 3
    payload = blob[pos:pos + expected]
    if len(payload) < expected:
        raise ImageFormatError(source, f"truncated payload: {len(payload)} of {expected} bytes")
    pixels = np.frombuffer(payload, dtype=np.uint8).reshape(height, width, 3)
    return ImagePlane.from_bytes(pixels, source=source)


def encode_ppm(image: ImagePlane) -> bytes:
    header = f"P6\n{image.width} {image.height}\n255\n".encode("ascii")
    return header + image.to_bytes().tobytes()


def load_image(path: Union[str, Path]) -> ImagePlane:
    path = Path(path)
    try:
        blob = path.read_bytes()
    except OSError as exc:
        raise DataError(f"{path}: cannot read image ({exc})") from exc
    if path.suffix.lower() in PPM_SUFFIXES or blob.startswith(b"P6"):
        return decode_ppm(blob, source=str(path))

    _require_cv2()
    decoded = cv2.imdecode(np.frombuffer(blob, dtype=np.uint8), cv2.IMREAD_COLOR)
    if decoded is None:
        raise ImageFormatError(str(path), "unrecognized image format")
    return ImagePlane.from_bytes(cv2.cvtColor(decoded, cv2.COLOR_BGR2RGB), source=str(path))


def save_image(image: ImagePlane, path: Union[str, Path]) -> Path:
    path = Path(path)
    if path.suffix.lower() in PPM_SUFFIXES:
        atomic_write_bytes(path, encode_ppm(image))
    else:
        _require_cv2()
        ok, encoded = cv2.imencode(path.suffix, cv2.cvtColor(image.to_bytes(), cv2.COLOR_RGB2BGR))
        if not ok:
            raise ImageFormatError(str(path), "OpenCV could not encode this format")
        atomic_write_bytes(path, encoded.tobytes())
    logger.debug("wrote image %s (%dx%d)", path, image.width, image.height)
    return path


# Blocks

@dataclass(frozen=True)
class Block:
    index: int
    row: int
    col: int
    y0: int
    x0: int
    size: int

    @property
    def y1(self) -> int:
        return self.y0 + self.size

    @property
    def x1(self) -> int:
        return self.x0 + self.size


@dataclass
class BlockGrid:
    """Raster-ordered square blocks tiling an edge-padded image"""
    block_size: int
    rows: int
    cols: int
    blocks: List[Block]
    padded: ImagePlane
    height: int
    width: int

    @property
    def count(self) -> int:
        return len(self.blocks)

    def coordinates(self, block: Block) -> np.ndarray:
        """Block position normalized so the corners map to 0 and 1"""
        row = block.row / (self.rows - 1) if self.rows > 1 else 0.0
        col = block.col / (self.cols - 1) if self.cols > 1 else 0.0
        return np.array([row, col])


def partition(image: ImagePlane, block_size: int = 16) -> BlockGrid:
    if block_size < 4:
        raise ValueError(f"block_size must be at least 4, got {block_size}")
    rows = -(-image.height // block_size)
    cols = -(-image.width // block_size)
    pad_h = rows * block_size - image.height
    pad_w = cols * block_size - image.width
    data = np.pad(image.data, ((0, pad_h), (0, pad_w), (0, 0)), mode="edge")
    blocks = [
        Block(index=r * cols + c, row=r, col=c, y0=r * block_size, x0=c * block_size, size=block_size)
        for r in range(rows)
        for c in range(cols)
    ]
    return BlockGrid(
        block_size=block_size,
        rows=rows,
        cols=cols,
        blocks=blocks,
        padded=ImagePlane(data=data, metadata=image.metadata.copy()),
        height=image.height,
        width=image.width,
    )


# Residuals

def luma(image: Union[ImagePlane, np.ndarray]) -> np.ndarray:
    pixels = image.data if isinstance(image, ImagePlane) else np.asarray(image, dtype=np.float64)
    return pixels.mean(axis=2)


def highpass(image: Union[ImagePlane, np.ndarray]) -> np.ndarray:
    """4-neighbour Laplacian of the luma channel with replicated borders"""
    _require_cv2()
    return cv2.filter2D(np.ascontiguousarray(luma(image)), cv2.CV_64F, LAPLACIAN,
                        borderType=cv2.BORDER_REPLICATE)


def block_stats(residual: np.ndarray, block: Block, threshold: float = ACTIVITY_THRESHOLD) -> np.ndarray:
    """[mean |h|, std h, max |h|, fraction of |h| above threshold] over one block"""
    if block.y1 > residual.shape[0] or block.x1 > residual.shape[1]:
        raise ValueError(f"block {block.index} lies outside the residual map")
    patch = residual[block.y0:block.y1, block.x0:block.x1]
    magnitude = np.abs(patch)
    return np.array([magnitude.mean(), patch.std(), magnitude.max(), np.mean(magnitude > threshold)])


def grid_stats(residual: np.ndarray, grid: BlockGrid) -> np.ndarray:
    return np.stack([block_stats(residual, block) for block in grid.blocks])
