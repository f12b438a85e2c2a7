"""
Entroformer Module
Transformer entropy model: hyper-encoder / hyper-decoder stacks, the masked context
model and the linear parameter head that turns features into Gaussian parameters.

Token sequences are (batch, tokens, d_model) in raster order. Context modes:
    serial          token i holds the start token (i = 0) or the embedding of y_{i-1};
                    query i sees tokens 0..i, so it only ever sees y_0..y_{i-1}
    bidirectional   checkerboard pass 2: slice-2 queries (mask token) see every slice-1 key
    unidirectional  checkerboard pass 2 restricted to slice-1 keys earlier in raster order
    pretrain        serial, with a random subset of positions zeroed, dropped as keys and
                    given no context at the query side
Slice-1 rows of the checkerboard modes are context-free and come out as zeros.
"""
import logging
from typing import TYPE_CHECKING, Optional

import numpy as np

import tensor as T
from attention import AttentionConfig, AttentionWeights, causal_mask, scaled_dot_attention
from entropy_model import GaussianParams
from layers import (Conv2d, LayerNorm, Linear, Module, Parameter, gelu, map_to_tokens,
                    pixel_shuffle, tokens_to_map, truncated_normal)
from position import START_COORD, PositionGrid, RpeTable, absolute_pe, build_rpe_bias

if TYPE_CHECKING:
    from models import ModelConfig

logger = logging.getLogger(__name__)

CONTEXT_MODES = ("none", "serial", "bidirectional", "unidirectional", "pretrain")
HYPER_STAGES = 3
HYPER_SCALE = 4


def checkerboard(height: int, width: int) -> np.ndarray:
    """Flat boolean array, True on slice-1 positions ((row + col) even)."""
    rows, cols = np.indices((height, width))
    return ((rows + cols) % 2 == 0).reshape(-1)


def checkerboard_mask(height: int, width: int, bidirectional: bool = True) -> np.ndarray:
    """Pass-2 mask: slice-2 queries may see slice-1 keys (only earlier ones if unidirectional)."""
    anchor = checkerboard(height, width)
    allowed = (~anchor)[:, None] & anchor[None, :]
    if not bidirectional:
        allowed &= np.tril(np.ones_like(allowed), k=-1)
    return allowed


# =============================================================================
# BLOCKS
# =============================================================================

class TransformerBlock(Module):
    """Pre-norm block: x + attn(norm(x)), then x + ffn(norm(x))."""

    def __init__(self, attention: AttentionConfig, ffn_ratio: int, rng: np.random.Generator,
                 rpe: Optional[RpeTable] = None, std: float = 0.02):
        d_model = attention.d_model
        self.attention = attention
        self.norm1 = LayerNorm(d_model)
        self.attn = AttentionWeights(d_model, rng, std)
        self.rpe = rpe
        self.norm2 = LayerNorm(d_model)
        self.ffn_in = Linear(d_model, ffn_ratio * d_model, rng, std)
        self.ffn_out = Linear(ffn_ratio * d_model, d_model, rng, std)

    def forward(self, x, grid: PositionGrid, mask=None, query_coords=None, key_coords=None,
                allow_empty_rows: bool = False, record: list = None):
        rpe_bias = None
        if self.rpe is not None:
            def rpe_bias(q):
                return build_rpe_bias(grid, self.rpe, q, query_coords, key_coords)
        out = scaled_dot_attention(self.norm1(x), self.attn, self.attention.heads, rpe_bias, mask,
                                   self.attention.k, allow_empty_rows,
                                   return_weights=record is not None)
        if record is not None:
            out, attention_map = out
            record.append(attention_map)
        x = x + out
        return x + self.ffn_out(gelu(self.ffn_in(self.norm2(x))))



def _replicate_pad(feature):
    """Repeat the first row and column; on an even grid a k3 s2 window reads no other padding."""
    feature = T.concat([feature[:, :, :1, :], feature], axis=2)
    return T.concat([feature[:, :, :, :1], feature], axis=3)


# =============================================================================
# ENTROFORMER
# =============================================================================

class Entroformer(Module):
    """Hyperprior + context entropy model over a C-channel latent grid."""

    def __init__(self, config: "ModelConfig", rng: np.random.Generator):
        self.config = config
        d = config.d_model
        std = config.init_std
        self.forward_passes = 0

        def block():
            rpe = None
            if config.position_encoding.startswith("rpe-"):
                rpe = RpeTable(config.h, d // config.heads, rng,
                               mode=config.position_encoding[4:], std=std)
            return TransformerBlock(attention, config.ffn_ratio, rng, rpe, std)

        attention = AttentionConfig(d, config.heads, config.k)
        stage_blocks = HYPER_STAGES * config.hyper_depth
        self.hyper_embed = Linear(config.latent_channels, d, rng, std)
        self.hyper_encoder = [block() for _ in range(stage_blocks)]
        self.downscales = [Conv2d(d, d, 3, rng, stride=2, groups=d) for _ in range(2)]
        self.hyper_out = Linear(d, config.hyper_channels, rng, std)
        self.hyper_in = Linear(config.hyper_channels, d, rng, std)
        self.hyper_decoder = [block() for _ in range(stage_blocks)]
        self.upscales = [Conv2d(d, 4 * d, 3, rng, padding=1, groups=d) for _ in range(2)]
        self.hyper_norm = LayerNorm(d)

        self.embed = Linear(config.latent_channels, d, rng, std)
        self.start_token = Parameter(truncated_normal(rng, (d,), std), init_std=std)
        self.mask_token = Parameter(truncated_normal(rng, (d,), std), init_std=std)
        self.context_blocks = [block() for _ in range(config.context_depth)]
        self.context_norm = LayerNorm(d)

        self.head_hidden = Linear(2 * d, 2 * d, rng, std)
        self.head_out = Linear(2 * d, 2 * config.latent_channels, rng, std)

    # --- helpers ---

    def _absolute(self, tokens, grid: PositionGrid, coords=None):
        if self.config.position_encoding != "absolute":
            return tokens
        return tokens + absolute_pe(grid, self.config.d_model, coords)

    def _run_stage(self, blocks, x, grid: PositionGrid):
        for blk in blocks:
            x = blk(x, grid)
        return x

    def _stages(self, blocks):
        """hyper_depth consecutive blocks per resolution stage."""
        depth = self.config.hyper_depth
        for start in range(0, len(blocks), depth):
            yield blocks[start:start + depth]

    # --- operations ---

    def embed_latents(self, y_hat):
        """(B, C, H, W) latents -> (B, H*W, d_model) raster-order tokens."""
        y_hat = T._lift(y_hat)
        if y_hat.ndim != 4 or y_hat.shape[1] != self.config.latent_channels:
            raise T.ShapeError("embed_latents", y_hat.shape, (self.config.latent_channels,))
        return self.embed(map_to_tokens(y_hat))

    def hyper_encode(self, y):
        """(B, C, H, W) continuous latents -> (B, Cz, H/4, W/4) hyper-latents."""
        y = T._lift(y)
        _, _, height, width = y.shape
        if height < HYPER_SCALE or width < HYPER_SCALE or height % HYPER_SCALE or width % HYPER_SCALE:
            raise ValueError(f"latent grid {height}x{width} must be at least 4x4 and divisible by 4")
        grid = PositionGrid(height, width)
        x = self._absolute(self.hyper_embed(map_to_tokens(y)), grid)
        stages = list(self._stages(self.hyper_encoder))
        for s, blocks in enumerate(stages):
            x = self._run_stage(blocks, x, grid)
            if s < len(self.downscales):
                feature = _replicate_pad(tokens_to_map(x, grid.height, grid.width))
                feature = self.downscales[s](feature)
                grid = PositionGrid(feature.shape[2], feature.shape[3])
                x = self._absolute(map_to_tokens(feature), grid)
        return tokens_to_map(self.hyper_out(x), grid.height, grid.width)

    def hyper_decode(self, z_hat, latent_size=None):
        """(B, Cz, h, w) quantized hyper-latents -> (B, 16hw, d_model) hyperprior features."""
        z_hat = T._lift(z_hat)
        _, channels, height, width = z_hat.shape
        if channels != self.config.hyper_channels:
            raise T.ShapeError("hyper_decode", z_hat.shape, (self.config.hyper_channels,))
        if latent_size is not None and tuple(latent_size) != (HYPER_SCALE * height, HYPER_SCALE * width):
            raise ValueError(f"hyper grid {height}x{width} does not upscale to latent grid "
                             f"{latent_size[0]}x{latent_size[1]}")
        grid = PositionGrid(height, width)
        x = self._absolute(self.hyper_in(map_to_tokens(z_hat)), grid)
        stages = list(self._stages(self.hyper_decoder))
        for s, blocks in enumerate(stages):
            x = self._run_stage(blocks, x, grid)
            if s < len(self.upscales):
                feature = pixel_shuffle(self.upscales[s](tokens_to_map(x, grid.height, grid.width)), 2)
                grid = PositionGrid(feature.shape[2], feature.shape[3])
                x = self._absolute(map_to_tokens(feature), grid)
        return self.hyper_norm(x)

    def context_features(self, y_hat, mode: str = "serial", drop=None,
                         ratio: float = 0.5, rng: np.random.Generator = None, record: list = None):
        """
        Masked-attention context features aligned with latent positions.

        drop (serial): boolean (B, n) or (n,) positions hidden from every query. They
        are zeroed at the input and removed as keys, so the following query does not
        see them through its shifted token either. Pretrain mode draws its own drop
        with probability ratio and also zeroes the features of dropped positions.
        record: list that receives the AttentionMap of every context block.

        Returns:
            (B, n, d_model) tensor
        """
        if mode not in CONTEXT_MODES:
            raise ValueError(f"unknown context mode '{mode}', expected one of {CONTEXT_MODES}")
        y_hat = T._lift(y_hat)
        batch, _, height, width = y_hat.shape
        grid = PositionGrid(height, width)
        n = grid.tokens
        d = self.config.d_model
        if mode == "none":
            return T.Tensor(np.zeros((batch, n, d)))

        if mode in ("bidirectional", "unidirectional"):
            anchor = checkerboard(height, width)
            e = self._absolute(self.embed_latents(y_hat), grid)
            x = T.where(anchor[:, None], e, self.mask_token)
            mask = checkerboard_mask(height, width, mode == "bidirectional")
            for blk in self.context_blocks:
                x = blk(x, grid, mask, allow_empty_rows=True, record=record)
            return T.where(anchor[:, None], 0.0, self.context_norm(x))

        zero_queries = None
        if mode == "pretrain":
            rng = rng if rng is not None else np.random.default_rng()
            drop = rng.random((batch, n)) < ratio
            zero_queries = drop
        mask = causal_mask(n)
        if drop is not None:
            drop = np.broadcast_to(np.asarray(drop, dtype=bool), (batch, n))
            y_hat = T.where(tokens_to_map_mask(drop, height, width), 0.0, y_hat)
            mask = np.broadcast_to(mask, (batch, n, n)).copy()
            mask[:, :, 1:] &= ~drop[:, None, :n - 1]
        e = self._absolute(self.embed_latents(y_hat), grid)
        start = self.start_token.reshape(1, 1, d) + np.zeros((batch, 1, d))
        x = T.concat([start, e[:, :n - 1, :]], axis=1)
        coords = grid.coords()
        key_coords = np.concatenate([np.array([START_COORD]), coords[:n - 1]], axis=0)
        for blk in self.context_blocks:
            x = blk(x, grid, mask, coords, key_coords, record=record)
        out = self.context_norm(x)
        if zero_queries is not None:
            out = T.where(np.asarray(zero_queries)[:, :, None], 0.0, out)
        return out

    def predict_params(self, hyper_features, context_features, height: int, width: int) -> GaussianParams:
        """concat -> Linear(2d) -> leaky_relu -> Linear(2C); sigma = softplus + floor."""
        hyper_features, context_features = T._lift(hyper_features), T._lift(context_features)
        if hyper_features.shape != context_features.shape:
            raise T.ShapeError("predict_params", hyper_features.shape, context_features.shape)
        if hyper_features.shape[1] != height * width:
            raise T.ShapeError("predict_params", hyper_features.shape, (height, width))
        c = self.config.latent_channels
        h = T.leaky_relu(self.head_hidden(T.concat([hyper_features, context_features], axis=-1)))
        out = self.head_out(h)
        mu = tokens_to_map(out[:, :, :c], height, width)
        sigma = tokens_to_map(T.softplus(out[:, :, c:]) + self.config.sigma_floor, height, width)
        return GaussianParams(mu, sigma)

    def zero_features(self, batch: int, tokens: int):
        return T.Tensor(np.zeros((batch, tokens, self.config.d_model)))

    def entropy_parameters(self, y_hat, hyper_features=None, mode: str = "serial",
                           **context_kwargs) -> GaussianParams:
        """
        One entropy-model forward pass: context features (per variant and mode) plus the
        parameter head. Counted in forward_passes.
        """
        y_hat = T._lift(y_hat)
        batch, _, height, width = y_hat.shape
        n = height * width
        variant = self.config.entropy_variant
        if variant == "hyperprior-only":
            mode = "none"
        if hyper_features is None or variant == "context-only":
            hyper_features = self.zero_features(batch, n)
        context = self.context_features(y_hat, mode, **context_kwargs)
        self.forward_passes += 1
        return self.predict_params(hyper_features, context, height, width)


def tokens_to_map_mask(flags, height: int, width: int) -> np.ndarray:
    """(B, n) position flags -> (B, 1, H, W) boolean map for masking latent maps."""
    flags = np.asarray(flags, dtype=bool)
    return flags.reshape(flags.shape[0], 1, height, width)
