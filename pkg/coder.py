"""
Coder Module
Quantized CDF tables and a byte-oriented range coder (LZMA-style carry handling).

Everything inside the coding loop is integer arithmetic. The only float step is CDF
construction, which evaluates the normal CDF with a fixed rational approximation
(Abramowitz & Stegun 7.1.26) and integerizes with largest-remainder rounding.
"""
import logging
import math
from dataclasses import dataclass
from typing import Sequence, Union

import numpy as np

logger = logging.getLogger(__name__)

# --- CONFIGURATION ---
PRECISION_BITS = 16
TOTAL = 1 << PRECISION_BITS
TOP = 1 << 24
RANGE_MASK = 0xFFFFFFFF

# erf(x) ~= 1 - (a1 t + a2 t^2 + a3 t^3 + a4 t^4 + a5 t^5) exp(-x^2), t = 1 / (1 + p x)
_AS_P = 0.3275911
_AS_A = (0.254829592, -0.284496736, 1.421413741, -1.453152027, 1.061405429)


class CoderError(ValueError):
    """Out-of-range symbol, truncated stream or an unusable CDF."""


def normal_cdf(x) -> np.ndarray:
    """Standard normal CDF via the fixed rational erf approximation (|error| < 1.5e-7)."""
    x = np.asarray(x, dtype=np.float64) / math.sqrt(2.0)
    ax = np.abs(x)
    t = 1.0 / (1.0 + _AS_P * ax)
    poly = t * (_AS_A[0] + t * (_AS_A[1] + t * (_AS_A[2] + t * (_AS_A[3] + t * _AS_A[4]))))
    erf = 1.0 - poly * np.exp(-ax * ax)
    return 0.5 * (1.0 + np.where(x >= 0, erf, -erf))


@dataclass
class QuantizedCdf:
    """
    Cumulative counts over symbols s_min..s_max.

    cumulative has K+1 entries (K = s_max - s_min + 1), or shape (N, K+1) for a batch
    of tables sharing one symbol range. First entry 0, last entry 2^16.
    """
    s_min: int
    s_max: int
    cumulative: np.ndarray

    @property
    def symbols(self) -> int:
        return self.s_max - self.s_min + 1

    @property
    def batched(self) -> bool:
        return self.cumulative.ndim == 2

    def __len__(self):
        return self.cumulative.shape[0] if self.batched else 1

    def row(self, i: int) -> np.ndarray:
        return self.cumulative[i] if self.batched else self.cumulative

    def counts(self) -> np.ndarray:
        return np.diff(self.cumulative, axis=-1)

    def probabilities(self) -> np.ndarray:
        return self.counts() / TOTAL


# =============================================================================
# CDF CONSTRUCTION
# =============================================================================

def _check_range(s_min: int, s_max: int):
    if s_min > s_max:
        raise CoderError(f"empty symbol range [{s_min}, {s_max}]")
    if s_max - s_min + 1 > TOTAL:
        raise CoderError(f"symbol range [{s_min}, {s_max}] too wide for a {PRECISION_BITS}-bit "
                         f"table with count floor 1")


def quantize_pmf(pmf: np.ndarray) -> np.ndarray:
    """
    Integer counts summing to 2^16 with every count >= 1.

    Counts are floor(p * 2^16) plus one extra count for the largest remainders (ties to
    the lower index). Zero counts are then raised to 1 by taking one count at a time
    from the largest counts in turn.

    Returns:
        int64 array shaped like pmf
    """
    pmf = np.atleast_2d(np.asarray(pmf, dtype=np.float64))
    symbols = pmf.shape[-1]
    if symbols > TOTAL:
        raise CoderError(f"{symbols} symbols do not fit a {PRECISION_BITS}-bit table")
    pmf = np.maximum(pmf, 0.0)
    mass = pmf.sum(axis=-1, keepdims=True)
    if np.any(mass <= 0) or not np.all(np.isfinite(mass)):
        raise CoderError("probability mass must be positive and finite")
    scaled = pmf / mass * TOTAL
    counts = np.floor(scaled).astype(np.int64)
    remainder = scaled - counts
    deficit = TOTAL - counts.sum(axis=-1)
    order = np.argsort(-remainder, axis=-1, kind="stable")
    rank = np.empty_like(order)
    np.put_along_axis(rank, order, np.arange(symbols)[None, :].repeat(len(order), axis=0), axis=-1)
    counts += rank < deficit[:, None]

    for r in np.nonzero((counts == 0).any(axis=-1))[0]:
        row = counts[r]
        zeros = row == 0
        needed = int(zeros.sum())
        row[zeros] = 1
        donors = np.argsort(-row, kind="stable")
        k = 0
        while needed:
            donor = donors[k % symbols]
            if row[donor] > 1:
                row[donor] -= 1
                needed -= 1
            k += 1
    return counts


def _to_cumulative(counts: np.ndarray) -> np.ndarray:
    cumulative = np.zeros(counts.shape[:-1] + (counts.shape[-1] + 1,), dtype=np.int64)
    np.cumsum(counts, axis=-1, out=cumulative[..., 1:])
    return cumulative


def build_cdf_from_pmf(pmf: np.ndarray, s_min: int, s_max: int) -> QuantizedCdf:
    """Quantize pmf rows over [s_min, s_max] (tails must already be folded in)."""
    _check_range(s_min, s_max)
    pmf = np.asarray(pmf, dtype=np.float64)
    if pmf.shape[-1] != s_max - s_min + 1:
        raise CoderError(f"pmf has {pmf.shape[-1]} entries for range [{s_min}, {s_max}]")
    cumulative = _to_cumulative(quantize_pmf(pmf))
    return QuantizedCdf(s_min, s_max, cumulative if pmf.ndim == 2 else cumulative[0])


def build_cdf(mu, sigma, s_min: int, s_max: int) -> QuantizedCdf:
    """
    Coder table for N(mu, sigma) * U(-0.5, 0.5) over [s_min, s_max].

    Mass below s_min - 0.5 is folded into s_min, mass above s_max + 0.5 into s_max.
    Scalar mu/sigma give a single table; arrays give one row per element.
    """
    _check_range(s_min, s_max)
    scalar = np.ndim(mu) == 0 and np.ndim(sigma) == 0
    mu = np.atleast_1d(np.asarray(mu, dtype=np.float64)).reshape(-1, 1)
    sigma = np.atleast_1d(np.asarray(sigma, dtype=np.float64)).reshape(-1, 1)
    if np.any(sigma <= 0):
        raise CoderError("sigma must be positive")
    edges = np.arange(s_min, s_max + 2, dtype=np.float64) - 0.5
    cdf = normal_cdf((edges[None, :] - mu) / sigma)
    cdf[:, 0] = 0.0
    cdf[:, -1] = 1.0
    pmf = np.diff(cdf, axis=-1)
    table = build_cdf_from_pmf(pmf, s_min, s_max)
    if scalar:
        return QuantizedCdf(s_min, s_max, table.cumulative[0])
    return table


def uniform_cdf(s_min: int, s_max: int) -> QuantizedCdf:
    _check_range(s_min, s_max)
    return build_cdf_from_pmf(np.ones(s_max - s_min + 1), s_min, s_max)


# =============================================================================
# RANGE CODER
# =============================================================================

class RangeEncoder:
    """32-bit range coder with a carry cache; the always-zero leading byte is dropped."""

    def __init__(self):
        self.low = 0
        self.range = RANGE_MASK
        self.cache = 0
        self.cache_size = 1
        self.out = bytearray()
        self.count = 0

    def _shift_low(self):
        if self.low < 0xFF000000 or self.low > RANGE_MASK:
            carry = self.low >> 32
            temp = self.cache
            while True:
                self.out.append((temp + carry) & 0xFF)
                temp = 0xFF
                self.cache_size -= 1
                if self.cache_size == 0:
                    break
            self.cache = (self.low >> 24) & 0xFF
        self.cache_size += 1
        self.low = (self.low & 0x00FFFFFF) << 8

    def encode(self, symbol: int, cdf: QuantizedCdf, cumulative: np.ndarray = None):
        cumulative = cdf.cumulative if cumulative is None else cumulative
        if not cdf.s_min <= symbol <= cdf.s_max:
            raise CoderError(f"symbol {self.count} value {symbol} outside [{cdf.s_min}, {cdf.s_max}]")
        s = int(symbol) - cdf.s_min
        start = int(cumulative[s])
        size = int(cumulative[s + 1]) - start
        if size <= 0:
            raise CoderError(f"symbol {self.count} has zero frequency")
        r = self.range >> PRECISION_BITS
        self.low += r * start
        self.range = r * size
        while self.range < TOP:
            self.range <<= 8
            self._shift_low()
        self.count += 1

    def finish(self) -> bytes:
        for _ in range(5):
            self._shift_low()
        return bytes(self.out[1:])


class RangeDecoder:
    def __init__(self, data: bytes):
        self.data = bytes(data)
        self.pos = 0
        self.range = RANGE_MASK
        self.code = 0
        self.count = 0
        for _ in range(4):
            self.code = (self.code << 8) | self._next_byte()

    def _next_byte(self) -> int:
        if self.pos >= len(self.data):
            raise CoderError(f"truncated stream: needed byte {self.pos} of {len(self.data)} "
                             f"while decoding symbol {self.count}")
        byte = self.data[self.pos]
        self.pos += 1
        return byte

    def decode(self, cdf: QuantizedCdf, cumulative: np.ndarray = None) -> int:
        cumulative = cdf.cumulative if cumulative is None else cumulative
        r = self.range >> PRECISION_BITS
        value = min(self.code // r, TOTAL - 1)
        s = int(np.searchsorted(cumulative, value, side="right")) - 1
        s = min(max(s, 0), cdf.symbols - 1)
        start = int(cumulative[s])
        size = int(cumulative[s + 1]) - start
        self.code -= r * start
        self.range = r * size
        while self.range < TOP:
            self.range <<= 8
            self.code = ((self.code << 8) | self._next_byte()) & RANGE_MASK
        self.count += 1
        return s + cdf.s_min


CdfSource = Union[QuantizedCdf, Sequence[QuantizedCdf]]


def _row_source(cdfs: CdfSource, n: int):
    """Yield (cdf, cumulative row) for symbol i."""
    if isinstance(cdfs, QuantizedCdf):
        if cdfs.batched and len(cdfs) != n:
            raise CoderError(f"{len(cdfs)} CDF rows for {n} symbols")
        for i in range(n):
            yield cdfs, cdfs.row(i)
        return
    if len(cdfs) != n:
        raise CoderError(f"{len(cdfs)} CDFs for {n} symbols")
    for cdf in cdfs:
        yield cdf, cdf.cumulative


def range_encode(symbols, cdfs: CdfSource) -> bytes:
    """Encode symbols; cdfs is one shared table, one batched table, or one table per symbol."""
    symbols = np.asarray(symbols, dtype=np.int64).reshape(-1)
    encoder = RangeEncoder()
    for symbol, (cdf, row) in zip(symbols, _row_source(cdfs, len(symbols))):
        encoder.encode(int(symbol), cdf, row)
    data = encoder.finish()
    logger.debug("range coded %d symbols into %d bytes", len(symbols), len(data))
    return data


def range_decode(data: bytes, cdfs: CdfSource, count: int = None) -> np.ndarray:
    """Decode count symbols (defaults to the number of CDF rows supplied)."""
    if count is None:
        if isinstance(cdfs, QuantizedCdf) and not cdfs.batched:
            raise CoderError("a shared CDF needs an explicit symbol count")
        count = len(cdfs)
    decoder = RangeDecoder(data)
    out = np.empty(count, dtype=np.int64)
    for i, (cdf, row) in enumerate(_row_source(cdfs, count)):
        out[i] = decoder.decode(cdf, row)
    return out


def ideal_bits(symbols, cdfs: CdfSource) -> float:
    """Sum of -log2 of the quantized probabilities of the given symbols."""
    symbols = np.asarray(symbols, dtype=np.int64).reshape(-1)
    total = 0.0
    for symbol, (cdf, row) in zip(symbols, _row_source(cdfs, len(symbols))):
        s = int(symbol) - cdf.s_min
        total -= math.log2((int(row[s + 1]) - int(row[s])) / TOTAL)
    return total
