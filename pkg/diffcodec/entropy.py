"""
Discrete probability models for latent symbols and their rate estimates
"""

import logging
from dataclasses import dataclass
from functools import cached_property
from typing import Iterable, List, Optional, Sequence, Union

import numpy as np
from scipy.special import ndtr

from .errors import DataError, RangeCoderError

logger = logging.getLogger(__name__)

ALPHABET_LIMIT = 127
ESCAPE_MASS = 2.0 ** -16
FREQ_BITS = 24
FREQ_TOTAL = 1 << FREQ_BITS
SCALE_FLOOR = 0.05
SCALE_FIXED_ONE = 256
MIN_FIT_SAMPLES = 100


def frequency_table(pmf: np.ndarray, total: int = FREQ_TOTAL) -> np.ndarray:
    """Integer frequencies summing to ``total``, every entry at least 1"""
    n = len(pmf)
    if n > total:
        raise ValueError("alphabet larger than frequency total")
    freqs = np.floor(np.asarray(pmf, dtype=np.float64) * (total - n)).astype(np.int64) + 1
    freqs[int(np.argmax(pmf))] += total - int(freqs.sum())
    return freqs


def zigzag_order(min_symbol: int, num_symbols: int) -> np.ndarray:
    """Symbol indices ordered 0, -1, 1, -2, 2, ... for an alphabet centred on zero"""
    symbols = np.arange(min_symbol, min_symbol + num_symbols)
    keys = np.where(symbols >= 0, 2 * symbols, -2 * symbols - 1)
    return np.argsort(keys, kind="stable")


class DiscreteModel:
    """Per-channel pmfs over a contiguous integer alphabet

    Subclasses provide ``pmfs`` with shape (channels, num_symbols) and
    ``coding_order``, the permutation of symbol indices used to lay out the
    coder's cumulative frequency table.
    """

    min_symbol: int

    @property
    def pmfs(self) -> np.ndarray:
        raise NotImplementedError

    @property
    def coding_order(self) -> np.ndarray:
        return np.arange(self.num_symbols)

    @property
    def channels(self) -> int:
        return self.pmfs.shape[0]

    @property
    def num_symbols(self) -> int:
        return self.pmfs.shape[1]

    @property
    def max_symbol(self) -> int:
        return self.min_symbol + self.num_symbols - 1

    def symbol_index(self, symbols: np.ndarray) -> np.ndarray:
        symbols = np.asarray(symbols)
        if symbols.size and (symbols.min() < self.min_symbol or symbols.max() > self.max_symbol):
            raise RangeCoderError(
                f"symbol outside alphabet [{self.min_symbol}, {self.max_symbol}]"
            )
        return symbols.astype(np.int64) - self.min_symbol

    @cached_property
    def coder_tables(self) -> "CoderTables":
        order = self.coding_order
        position = np.empty_like(order)
        position[order] = np.arange(len(order))
        freqs, cums = [], []
        for row in self.pmfs:
            ordered = frequency_table(row[order])
            freqs.append(ordered.tolist())
            cums.append([0] + np.cumsum(ordered).tolist())
        return CoderTables(order=order.tolist(), position=position.tolist(), freqs=freqs, cums=cums)

    @cached_property
    def coding_bits(self) -> np.ndarray:
        """-log2(freq / total) per channel and symbol index, as the coder spends it"""
        tables = self.coder_tables
        out = np.empty(self.pmfs.shape)
        for c, row in enumerate(tables.freqs):
            ordered = np.asarray(row, dtype=np.float64)
            out[c, tables.order] = -np.log2(ordered / FREQ_TOTAL)
        return out


@dataclass
class CoderTables:
    order: List[int]       # coding position -> symbol index
    position: List[int]    # symbol index -> coding position
    freqs: List[List[int]]
    cums: List[List[int]]


class TabulatedModel(DiscreteModel):
    """Explicit pmf table; coded in natural symbol order"""

    def __init__(self, pmfs: Union[np.ndarray, Sequence[Sequence[float]]], min_symbol: int = 0):
        table = np.atleast_2d(np.asarray(pmfs, dtype=np.float64))
        if np.any(table < 0) or np.any(np.abs(table.sum(axis=1) - 1.0) > 1e-9):
            raise ValueError("each pmf row must be non-negative and sum to 1")
        self._pmfs = table
        self.min_symbol = int(min_symbol)

    @property
    def pmfs(self) -> np.ndarray:
        return self._pmfs


def gaussian_pmf(scale: float, limit: int = ALPHABET_LIMIT, escape: float = ESCAPE_MASS) -> np.ndarray:
    """Zero-mean discretized Gaussian on [-limit, limit] with a uniform escape floor

    Mass beyond the alphabet is folded into the two edge bins.
    """
    magnitude = np.abs(np.arange(-limit, limit + 1)).astype(np.float64)
    outer = np.where(magnitude == limit, 0.0, ndtr(-(magnitude + 0.5) / scale))
    upper_tail = ndtr(-(magnitude - 0.5) / scale) - outer
    centre = 1.0 - 2.0 * ndtr(-0.5 / scale)
    mass = np.where(magnitude == 0, centre, upper_tail)
    mass = mass / mass.sum()
    n = 2 * limit + 1
    return (1.0 - escape) * mass + escape / n


class EntropyModel(DiscreteModel):
    """Factorized zero-mean Gaussian per latent channel"""

    def __init__(self, scales: Iterable[float]):
        scales = np.asarray(list(scales), dtype=np.float64)
        if scales.ndim != 1 or scales.size == 0 or np.any(scales <= 0) or not np.all(np.isfinite(scales)):
            raise ValueError("scales must be a non-empty vector of positive values")
        self.scales = scales
        self.min_symbol = -ALPHABET_LIMIT

    def __repr__(self):
        return f"EntropyModel(scales={np.round(self.scales, 4).tolist()})"

    @cached_property
    def pmfs(self) -> np.ndarray:
        return np.stack([gaussian_pmf(s) for s in self.scales])

    @property
    def coding_order(self) -> np.ndarray:
        return zigzag_order(self.min_symbol, self.num_symbols)

    def to_fixed(self) -> np.ndarray:
        """Scales as unsigned 16-bit fixed point with 8 fractional bits"""
        return np.clip(np.round(self.scales * SCALE_FIXED_ONE), 1, 0xFFFF).astype(np.uint16)

    @classmethod
    def from_fixed(cls, fixed: Iterable[int]) -> "EntropyModel":
        return cls(np.asarray(list(fixed), dtype=np.float64) / SCALE_FIXED_ONE)

    def quantized(self) -> "EntropyModel":
        """The model a decoder rebuilds from the serialized scale table"""
        return EntropyModel.from_fixed(self.to_fixed())


@dataclass
class RateEstimate:
    total_bits: float
    block_bits: np.ndarray


def symbol_bits(symbols: np.ndarray, model: DiscreteModel) -> np.ndarray:
    """-log2 p for every symbol; axis 0 of ``symbols`` is the channel"""
    symbols = np.asarray(symbols)
    if symbols.ndim < 1 or symbols.shape[0] != model.channels:
        raise ValueError(f"expected {model.channels} channels on axis 0, got shape {symbols.shape}")
    index = model.symbol_index(symbols)
    channel = np.broadcast_to(
        np.arange(model.channels).reshape((-1,) + (1,) * (symbols.ndim - 1)), symbols.shape
    )
    probs = model.pmfs[channel, index]
    if np.any(probs <= 0):
        raise RangeCoderError("symbol has zero probability under the model")
    return -np.log2(probs)


def block_sums(values: np.ndarray, footprint: int) -> np.ndarray:
    """Sum a (C, h, w) map over footprint x footprint tiles, raster order"""
    c, h, w = values.shape
    if h % footprint or w % footprint:
        raise ValueError(f"latent {h}x{w} is not tiled by {footprint}x{footprint} blocks")
    tiles = values.reshape(c, h // footprint, footprint, w // footprint, footprint)
    return tiles.sum(axis=(0, 2, 4)).reshape(-1)


def rate_estimate(symbols: np.ndarray, model: DiscreteModel,
                  footprint: Optional[int] = None) -> RateEstimate:
    """Ideal code length of ``symbols`` plus per-block partial sums

    With ``footprint`` set, ``symbols`` must be (C, h, w) and the block sums
    cover footprint x footprint latent tiles in raster order.
    """
    bits = symbol_bits(symbols, model)
    per_block = block_sums(bits, footprint) if footprint else np.array([bits.sum()])
    return RateEstimate(total_bits=float(bits.sum()), block_bits=per_block)


def fit_entropy_model(samples: Union[np.ndarray, Sequence[np.ndarray]]) -> EntropyModel:
    """Per-channel scale = max(sample std, floor); axis 0 of each sample is the channel"""
    if isinstance(samples, np.ndarray):
        samples = [samples]
    arrays = [np.asarray(s, dtype=np.float64) for s in samples]
    if not arrays or any(a.size == 0 for a in arrays):
        raise DataError("cannot fit an entropy model to empty samples")
    channels = arrays[0].shape[0]
    if any(a.shape[0] != channels for a in arrays):
        raise DataError("latent samples disagree on channel count")
    stacked = np.concatenate([a.reshape(channels, -1) for a in arrays], axis=1)
    if stacked.shape[1] < MIN_FIT_SAMPLES:
        logger.warning("fitting entropy model on only %d symbols per channel", stacked.shape[1])
    return EntropyModel(np.maximum(stacked.std(axis=1), SCALE_FLOOR))
