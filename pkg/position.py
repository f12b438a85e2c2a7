"""
Position Module
Diamond relative position encoding and the position-encoding variants used in ablations.

Offsets are 2-D (row, col) differences between a query coordinate and a key
coordinate. Diamond clipping keeps every offset whose l1 norm is at most h and sends
all other offsets to the single sentinel coordinate (h, h).
"""
import logging
import math

import numpy as np

import tensor as T
from layers import Module, Parameter, truncated_normal

logger = logging.getLogger(__name__)

# Coordinate given to the start token; any offset against it clips to the sentinel.
START_COORD = (-(1 << 20), -(1 << 20))

RPE_MODES = ("diamond", "square", "1d1d")


class PositionGrid:
    """Raster-order mapping between flat token index and (row, col)."""

    def __init__(self, height: int, width: int):
        if height < 1 or width < 1:
            raise ValueError(f"grid extents must be positive, got {height}x{width}")
        self.height = int(height)
        self.width = int(width)

    @property
    def tokens(self) -> int:
        return self.height * self.width

    def coord(self, index: int):
        if not 0 <= index < self.tokens:
            raise IndexError(f"token {index} outside {self.height}x{self.width} grid")
        return index // self.width, index % self.width

    def index(self, row: int, col: int) -> int:
        if not (0 <= row < self.height and 0 <= col < self.width):
            raise IndexError(f"position ({row}, {col}) outside {self.height}x{self.width} grid")
        return row * self.width + col

    def coords(self) -> np.ndarray:
        flat = np.arange(self.tokens)
        return np.stack([flat // self.width, flat % self.width], axis=1)

    def offsets(self, query_coords=None, key_coords=None) -> np.ndarray:
        """(nq, nk, 2) array of query_coord - key_coord."""
        q = self.coords() if query_coords is None else np.asarray(query_coords)
        k = self.coords() if key_coords is None else np.asarray(key_coords)
        return q[:, None, :] - k[None, :, :]

    def __repr__(self):
        return f"PositionGrid({self.height}x{self.width})"


# =============================================================================
# CLIPPING
# =============================================================================

def diamond_clip(offset, h: int):
    """Return offset if its l1 norm is <= h, else the sentinel (h, h)."""
    if h < 1:
        raise ValueError(f"h must be >= 1, got {h}")
    dr, dc = int(offset[0]), int(offset[1])
    if abs(dr) + abs(dc) <= h:
        return dr, dc
    return h, h


def diamond_clip_array(offsets: np.ndarray, h: int) -> np.ndarray:
    offsets = np.asarray(offsets, dtype=np.int64)
    inside = np.abs(offsets).sum(axis=-1, keepdims=True) <= h
    return np.where(inside, offsets, h)


def square_clip_array(offsets: np.ndarray, h: int) -> np.ndarray:
    return np.clip(np.asarray(offsets, dtype=np.int64), -h, h)


# =============================================================================
# RPE TABLE
# =============================================================================

class RpeTable(Module):
    """
    Learned key-side relative position embeddings.

    The dense layout stores (2h+1)^2 rows indexed by (dr+h, dc+h); the sentinel is
    the (h, h) row. In diamond mode only the 2h^2+2h+1 in-diamond rows and the
    sentinel are reachable. The 1d1d mode keeps two (2h+1)-row tables, one per axis,
    and sums their biases.
    """

    def __init__(self, h: int, dim: int, rng: np.random.Generator, mode: str = "diamond",
                 std: float = 0.02):
        if h < 1:
            raise ValueError(f"h must be >= 1, got {h}")
        if mode not in RPE_MODES:
            raise ValueError(f"unknown RPE mode '{mode}', expected one of {RPE_MODES}")
        self.h = int(h)
        self.dim = int(dim)
        self.mode = mode
        side = 2 * self.h + 1
        if mode == "1d1d":
            self.rows = Parameter(truncated_normal(rng, (side, dim), std), init_std=std)
            self.cols = Parameter(truncated_normal(rng, (side, dim), std), init_std=std)
        else:
            self.table = Parameter(truncated_normal(rng, (side * side, dim), std), init_std=std)

    @property
    def sentinel_index(self) -> int:
        side = 2 * self.h + 1
        return (2 * self.h) * side + 2 * self.h

    def index(self, offsets: np.ndarray) -> np.ndarray:
        """Table row for each offset (last axis holds (dr, dc)). Not defined for 1d1d."""
        if self.mode == "1d1d":
            raise ValueError("1d1d tables are indexed per axis")
        clip = diamond_clip_array if self.mode == "diamond" else square_clip_array
        clipped = clip(offsets, self.h)
        return (clipped[..., 0] + self.h) * (2 * self.h + 1) + (clipped[..., 1] + self.h)

    def lookup(self, offset) -> int:
        return int(self.index(np.asarray(offset)[None])[0])

    def in_diamond_count(self) -> int:
        return 2 * self.h * self.h + 2 * self.h + 1


def build_rpe_bias(grid: PositionGrid, table: RpeTable, queries, query_coords=None, key_coords=None):
    """
    Additive attention bias B[i, j] = q_i . p(clip(coord_i - coord_j)) / sqrt(d_k).

    queries is (..., nq, d_k). Coordinates default to the grid's raster coordinates.
    The bias is built as S = q @ table^T followed by a gather, so the gradient reaches
    both the queries and the table.

    Returns:
        Tensor of shape (..., nq, nk)
    """
    queries = T._lift(queries)
    q_coords = grid.coords() if query_coords is None else np.asarray(query_coords)
    k_coords = grid.coords() if key_coords is None else np.asarray(key_coords)
    if queries.shape[-2] != len(q_coords):
        raise ValueError(f"grid/query mismatch: {len(q_coords)} coordinates for "
                         f"{queries.shape[-2]} queries")
    d_k = queries.shape[-1]
    if d_k != table.dim:
        raise T.ShapeError("build_rpe_bias", queries.shape, (table.dim,))
    offsets = q_coords[:, None, :] - k_coords[None, :, :]
    scale = 1.0 / math.sqrt(d_k)

    if table.mode == "1d1d":
        rows = np.clip(offsets[..., 0], -table.h, table.h) + table.h
        cols = np.clip(offsets[..., 1], -table.h, table.h) + table.h
        bias = (T.gather(T.matmul(queries, table.rows.transpose()), rows)
                + T.gather(T.matmul(queries, table.cols.transpose()), cols))
        return bias * scale

    scores = T.matmul(queries, table.table.transpose())
    return T.gather(scores, table.index(offsets)) * scale


# =============================================================================
# ABSOLUTE POSITION ENCODING
# =============================================================================

def absolute_pe(grid: PositionGrid, dim: int, coords=None) -> np.ndarray:
    """
    Fixed 2-D sinusoidal encoding: the first dim/2 channels encode the row and the
    rest the column, each as interleaved (sin, cos) pairs.

    The highest frequency is pi/16, so on grids up to 8 wide the dot product of two
    encodings falls monotonically with distance along either axis.

    Returns:
        (tokens, dim) array
    """
    if dim % 2:
        raise ValueError(f"absolute position encoding needs an even dim, got {dim}")
    coords = grid.coords() if coords is None else np.asarray(coords)
    half = dim // 2
    pairs = max(1, (half + 1) // 2)
    freqs = (math.pi / 16.0) * np.power(100.0, -np.arange(pairs) / pairs)
    out = np.zeros((len(coords), dim))
    for axis in range(2):
        angles = coords[:, axis:axis + 1] * freqs[None, :]
        block = np.empty((len(coords), 2 * pairs))
        block[:, 0::2] = np.sin(angles)
        block[:, 1::2] = np.cos(angles)
        out[:, axis * half:(axis + 1) * half] = block[:, :half]
    return out
