"""
Latent encoder, per-block quantization and the PCDC bitstream

Bitstream layout (little-endian):
    "PCDC" | version u8 | height u16 | width u16 | block_size u8 | K u8 |
    latent channels u8 | scale table u16 * C (scale * 256) |
    actions 3 bits each, MSB-first, raster order, zero-padded to a byte |
    payload length u32 | range-coded payload
"""

import logging
import struct
from dataclasses import dataclass, field
from typing import Sequence, Tuple, Union

import numpy as np

from .entropy import ALPHABET_LIMIT, EntropyModel, block_sums
from .errors import BitstreamError
from .imaging import ImagePlane
from .layers import Conv2d, Module
from .numerics import Tensor, no_grad, silu
from .rangecoder import range_decode, range_encode

logger = logging.getLogger(__name__)

MAGIC = b"PCDC"
VERSION = 1
LATENT_STRIDE = 4
ACTION_BITS = 3
PREFIX = struct.Struct("<4sBHHBBB")
PAYLOAD_LENGTH = struct.Struct("<I")
CHECKSUM_BITS = 8
CODER_SLACK_BITS = 64


class EncoderNet(Module):
    """Three 3x3 convolutions (stride 2, 2, 1) with SiLU after the first two"""

    def __init__(self, rng: np.random.Generator, latent_channels: int = 8,
                 hidden: Tuple[int, int] = (32, 64)):
        self.latent_channels = latent_channels
        self.conv1 = Conv2d(3, hidden[0], 3, rng, stride=2, padding=1)
        self.conv2 = Conv2d(hidden[0], hidden[1], 3, rng, stride=2, padding=1)
        self.conv3 = Conv2d(hidden[1], latent_channels, 3, rng, stride=1, padding=1)

    def forward(self, x: Tensor) -> Tensor:
        return self.conv3(silu(self.conv2(silu(self.conv1(x)))))


def encode_latent(image: Union[ImagePlane, np.ndarray], net: EncoderNet) -> np.ndarray:
    """Real latent of shape (C, H/4, W/4)"""
    pixels = image.to_chw() if isinstance(image, ImagePlane) else np.asarray(image, dtype=np.float64)
    if pixels.ndim == 3:
        pixels = pixels[None]
    height, width = pixels.shape[2:]
    if height % LATENT_STRIDE or width % LATENT_STRIDE:
        raise ValueError(f"image {height}x{width} is not a multiple of {LATENT_STRIDE}")
    with no_grad():
        return net(Tensor(pixels)).data[0].copy()


@dataclass(frozen=True)
class StepLadder:
    """Quantization step per allocation action, coarsest first"""
    steps: Tuple[float, ...] = (4.0, 2.0, 1.0, 0.5, 0.25)

    def __post_init__(self):
        steps = tuple(float(s) for s in self.steps)
        if not steps or any(s <= 0 for s in steps):
            raise ValueError("steps must be positive")
        if any(a <= b for a, b in zip(steps, steps[1:])):
            raise ValueError(f"steps must be strictly decreasing, got {steps}")
        if len(steps) > 1 << ACTION_BITS:
            raise ValueError(f"at most {1 << ACTION_BITS} actions fit the action table")
        object.__setattr__(self, "steps", steps)

    def __len__(self) -> int:
        return len(self.steps)

    def step(self, action: int) -> float:
        return self.steps[action]


@dataclass
class QuantizedLatent:
    """Integer latent symbols with the per-block actions that produced them"""
    symbols: np.ndarray
    actions: np.ndarray
    footprint: int = LATENT_STRIDE
    clamped: int = 0

    @property
    def grid_shape(self) -> Tuple[int, int]:
        return self.symbols.shape[1] // self.footprint, self.symbols.shape[2] // self.footprint


def step_map(actions: Sequence[int], grid_shape: Tuple[int, int], footprint: int,
             ladder: StepLadder) -> np.ndarray:
    """(h, w) map of quantization steps, each block's step over its footprint"""
    rows, cols = grid_shape
    actions = np.asarray(actions, dtype=np.int64)
    if actions.shape != (rows * cols,):
        raise ValueError(f"expected {rows * cols} block actions, got {actions.shape}")
    if actions.size and (actions.min() < 0 or actions.max() >= len(ladder)):
        raise ValueError(f"actions must lie in [0, {len(ladder)})")
    steps = np.asarray(ladder.steps)[actions].reshape(rows, cols)
    return np.kron(steps, np.ones((footprint, footprint)))


def round_half_away(values: np.ndarray) -> np.ndarray:
    return np.sign(values) * np.floor(np.abs(values) + 0.5)


def quantize(z: np.ndarray, actions: Sequence[int], ladder: StepLadder,
             footprint: int = LATENT_STRIDE) -> QuantizedLatent:
    z = np.asarray(z, dtype=np.float64)
    grid = (z.shape[1] // footprint, z.shape[2] // footprint)
    if z.shape[1] % footprint or z.shape[2] % footprint:
        raise ValueError(f"latent {z.shape[1:]} not tiled by {footprint}x{footprint} blocks")
    rounded = round_half_away(z / step_map(actions, grid, footprint, ladder)[None])
    clamped = int(np.count_nonzero(np.abs(rounded) > ALPHABET_LIMIT))
    if clamped:
        logger.warning("clamped %d latent symbols to +/-%d", clamped, ALPHABET_LIMIT)
    symbols = np.clip(rounded, -ALPHABET_LIMIT, ALPHABET_LIMIT).astype(np.int64)
    return QuantizedLatent(symbols=symbols, actions=np.asarray(actions, dtype=np.int64).copy(),
                           footprint=footprint, clamped=clamped)


def dequantize(latent: QuantizedLatent, ladder: StepLadder) -> np.ndarray:
    steps = step_map(latent.actions, latent.grid_shape, latent.footprint, ladder)
    return latent.symbols * steps[None]


# Bit accounting

def action_table_bytes(num_blocks: int) -> int:
    return -(-ACTION_BITS * num_blocks // 8)


def base_bits(latent_channels: int, num_blocks: int) -> int:
    """Side information every stream carries, plus the coder's worst-case slack"""
    fixed = PREFIX.size + 2 * latent_channels + action_table_bytes(num_blocks) + PAYLOAD_LENGTH.size
    return 8 * fixed + CHECKSUM_BITS + CODER_SLACK_BITS


def block_cost_table(z: np.ndarray, ladder: StepLadder, model: EntropyModel,
                     footprint: int = LATENT_STRIDE) -> np.ndarray:
    """(B, K) coded bits of each block at every step, using the coder's own tables"""
    coding = model.quantized()
    num_blocks = (z.shape[1] // footprint) * (z.shape[2] // footprint)
    channel = np.arange(z.shape[0])[:, None, None]
    costs = np.empty((num_blocks, len(ladder)))
    for k in range(len(ladder)):
        symbols = quantize(z, [k] * num_blocks, ladder, footprint).symbols
        bits = coding.coding_bits[channel, symbols - coding.min_symbol]
        costs[:, k] = block_sums(bits, footprint)
    return costs


# Serialization

@dataclass
class Bitstream:
    data: bytes

    @property
    def total_bits(self) -> int:
        return 8 * len(self.data)

    def __len__(self) -> int:
        return len(self.data)


@dataclass
class DecodedStream:
    symbols: np.ndarray
    actions: np.ndarray
    height: int
    width: int
    block_size: int
    num_actions: int
    model: EntropyModel = field(repr=False)

    @property
    def latent(self) -> QuantizedLatent:
        return QuantizedLatent(symbols=self.symbols, actions=self.actions,
                               footprint=self.block_size // LATENT_STRIDE)


def _grid(height: int, width: int, block_size: int) -> Tuple[int, int]:
    return -(-height // block_size), -(-width // block_size)


def serialize(latent: QuantizedLatent, dims: Tuple[int, int], model: EntropyModel,
              block_size: int = 16, num_actions: int = 5) -> Bitstream:
    height, width = dims
    if block_size % LATENT_STRIDE or block_size // LATENT_STRIDE != latent.footprint:
        raise BitstreamError(f"block size {block_size} does not match latent footprint {latent.footprint}")
    rows, cols = _grid(height, width, block_size)
    channels = latent.symbols.shape[0]
    if latent.symbols.shape != (channels, rows * latent.footprint, cols * latent.footprint):
        raise BitstreamError(f"latent shape {latent.symbols.shape} does not match {height}x{width}")
    if model.channels != channels:
        raise BitstreamError(f"model has {model.channels} channels, latent has {channels}")
    actions = np.asarray(latent.actions, dtype=np.int64)
    if actions.shape != (rows * cols,) or (actions.size and (actions.min() < 0 or actions.max() >= num_actions)):
        raise BitstreamError("action table does not match the block grid")

    prefix = PREFIX.pack(MAGIC, VERSION, height, width, block_size, num_actions, channels)
    scales = model.to_fixed().astype("<u2").tobytes()
    shifts = np.arange(ACTION_BITS - 1, -1, -1)
    action_bits = ((actions[:, None] >> shifts) & 1).astype(np.uint8).reshape(-1)
    action_table = np.packbits(action_bits).tobytes()
    payload = range_encode(latent.symbols, model.quantized())
    return Bitstream(prefix + scales + action_table + PAYLOAD_LENGTH.pack(len(payload)) + payload)


def deserialize(stream: Union[Bitstream, bytes]) -> DecodedStream:
    data = stream.data if isinstance(stream, Bitstream) else bytes(stream)
    if len(data) < PREFIX.size:
        raise BitstreamError("stream shorter than the fixed header")
    magic, version, height, width, block_size, num_actions, channels = PREFIX.unpack_from(data)
    if magic != MAGIC:
        raise BitstreamError(f"bad magic {magic!r}")
    if version != VERSION:
        raise BitstreamError(f"unsupported bitstream version {version}")
    if height == 0 or width == 0 or channels == 0 or block_size % LATENT_STRIDE or block_size == 0:
        raise BitstreamError("invalid header fields")
    rows, cols = _grid(height, width, block_size)
    num_blocks = rows * cols
    offset = PREFIX.size

    scale_end = offset + 2 * channels
    table_end = scale_end + action_table_bytes(num_blocks)
    if len(data) < table_end + PAYLOAD_LENGTH.size:
        raise BitstreamError("stream truncated inside the side information")
    fixed = np.frombuffer(data[offset:scale_end], dtype="<u2")
    if np.any(fixed == 0):
        raise BitstreamError("zero entropy-model scale")
    model = EntropyModel.from_fixed(fixed)

    bits = np.unpackbits(np.frombuffer(data[scale_end:table_end], dtype=np.uint8))
    actions = bits[:ACTION_BITS * num_blocks].reshape(num_blocks, ACTION_BITS).astype(np.int64)
    actions = actions @ (1 << np.arange(ACTION_BITS - 1, -1, -1))
    if actions.size and actions.max() >= num_actions:
        raise BitstreamError("action index outside the action space")

    (payload_length,) = PAYLOAD_LENGTH.unpack_from(data, table_end)
    payload_start = table_end + PAYLOAD_LENGTH.size
    if len(data) != payload_start + payload_length:
        raise BitstreamError(
            f"payload length field says {payload_length} bytes, stream holds {len(data) - payload_start}"
        )
    footprint = block_size // LATENT_STRIDE
    shape = (channels, rows * footprint, cols * footprint)
    symbols = range_decode(data[payload_start:], shape, model)
    return DecodedStream(symbols=symbols, actions=actions, height=height, width=width,
                         block_size=block_size, num_actions=num_actions, model=model)
