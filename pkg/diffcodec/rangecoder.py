"""
Carry-propagating range coder over per-channel frequency tables

A 64-bit generalization of the LZMA range encoder. The payload is one
checksum byte (low byte of CRC-32 over the symbols as little-endian int16)
followed by the coded bytes. The encoder drops its always-zero leading byte
and any trailing zero bytes; the decoder reads past the end as zeros.
"""

import zlib
from bisect import bisect_right
from typing import Tuple, Union

import numpy as np

from .entropy import FREQ_BITS, DiscreteModel
from .errors import RangeCoderError

RANGE_BITS = 64
RANGE_MASK = (1 << RANGE_BITS) - 1
TOP = 1 << (RANGE_BITS - 8)
BYTE_SHIFT = RANGE_BITS - 8
WINDOW_BYTES = RANGE_BITS // 8


def symbol_checksum(symbols: np.ndarray) -> int:
    return zlib.crc32(np.asarray(symbols, dtype="<i2").tobytes()) & 0xFF


def _channels(shape: Tuple[int, ...], model: DiscreteModel) -> np.ndarray:
    if len(shape) < 1 or shape[0] != model.channels:
        raise RangeCoderError(f"expected {model.channels} channels on axis 0, got shape {shape}")
    per_channel = int(np.prod(shape[1:])) if len(shape) > 1 else 1
    return np.repeat(np.arange(model.channels), per_channel)


class _Encoder:
    def __init__(self):
        self.low = 0
        self.range = RANGE_MASK
        self.cache = 0
        self.cache_size = 1
        self.out = bytearray()

    def _shift_low(self):
        if self.low < (0xFF << BYTE_SHIFT) or self.low > RANGE_MASK:
            carry = self.low >> RANGE_BITS
            temp = self.cache
            while True:
                self.out.append((temp + carry) & 0xFF)
                temp = 0xFF
                self.cache_size -= 1
                if self.cache_size == 0:
                    break
            self.cache = (self.low >> BYTE_SHIFT) & 0xFF
        self.cache_size += 1
        self.low = (self.low & (TOP - 1)) << 8

    def encode(self, cum: int, freq: int):
        r = self.range >> FREQ_BITS
        self.low += r * cum
        self.range = r * freq
        while self.range < TOP:
            self.range <<= 8
            self._shift_low()

    def finish(self) -> bytes:
        # pick the value in [low, low + range) with the most trailing zero bytes
        self.low = -(-self.low // TOP) * TOP
        for _ in range(WINDOW_BYTES + 1):
            self._shift_low()
        body = bytes(self.out[1:])
        return body.rstrip(b"\x00")


def range_encode(symbols: np.ndarray, model: DiscreteModel) -> bytes:
    symbols = np.asarray(symbols)
    channels = _channels(symbols.shape, model)
    index = model.symbol_index(symbols).reshape(-1)
    tables = model.coder_tables
    encoder = _Encoder()
    for c, s in zip(channels.tolist(), index.tolist()):
        pos = tables.position[s]
        encoder.encode(tables.cums[c][pos], tables.freqs[c][pos])
    return bytes([symbol_checksum(symbols)]) + encoder.finish()


def range_decode(payload: bytes, shape: Union[int, Tuple[int, ...]], model: DiscreteModel) -> np.ndarray:
    """Decode ``shape`` symbols (axis 0 is the channel) and verify the checksum

    An integer ``shape`` is a symbol count split evenly across channels.
    """
    if isinstance(shape, (int, np.integer)):
        if shape % model.channels:
            raise RangeCoderError(f"{shape} symbols do not split across {model.channels} channels")
        shape = (model.channels, int(shape) // model.channels)
    shape = tuple(int(d) for d in shape)
    if not payload:
        raise RangeCoderError("empty payload (missing checksum byte)")
    expected_checksum, body = payload[0], payload[1:]
    channels = _channels(shape, model)
    tables = model.coder_tables

    pos = 0

    def next_byte() -> int:
        nonlocal pos
        value = body[pos] if pos < len(body) else 0
        pos += 1
        return value

    code = 0
    for _ in range(WINDOW_BYTES):
        code = (code << 8) | next_byte()
    rng = RANGE_MASK
    last = (1 << FREQ_BITS) - 1
    decoded = []
    for c in channels.tolist():
        cums = tables.cums[c]
        r = rng >> FREQ_BITS
        value = min(code // r, last)
        slot = bisect_right(cums, value) - 1
        code -= r * cums[slot]
        rng = r * tables.freqs[c][slot]
        if code < 0 or code >= rng:
            raise RangeCoderError("corrupted payload: code left the coding interval")
        while rng < TOP:
            code = ((code << 8) | next_byte()) & RANGE_MASK
            rng <<= 8
        decoded.append(tables.order[slot])

    symbols = (np.asarray(decoded, dtype=np.int64) + model.min_symbol).reshape(shape)
    if symbol_checksum(symbols) != expected_checksum:
        raise RangeCoderError("corrupted payload: checksum mismatch")
    return symbols
