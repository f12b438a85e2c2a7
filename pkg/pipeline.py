"""
Pipeline Module
End-to-end encode / decode: hyper path, then serial raster-scan or two-pass
checkerboard coding of the latents.

Encoder and decoder compute every (mu, sigma) through the same calls on identically
shaped inputs, in the coding precision, and build CDFs with the same batch shapes.
That is what keeps the range coder in sync.

Latent symbols are coded position-major (raster order), channel-minor. Hyper-latent
symbols are coded channel-major, each channel under its own factorized CDF.
"""
import logging
import math
import time
from dataclasses import dataclass
from pathlib import Path
from typing import Tuple

import numpy as np

import tensor as T
from autoencoder import crop_image, pad_image
from bitstream import Bitstream, BitstreamError, lambda_id
from coder import RangeDecoder, RangeEncoder, build_cdf, build_cdf_from_pmf
from corpus import read_image, to_uint8, write_image
from entroformer import checkerboard
from entropy_model import (GaussianParams, factorized_likelihood, gaussian_uniform_likelihood, quantize,
                           rate_bits)

logger = logging.getLogger(__name__)

CODING_PRECISION = np.float32
CODEC_MODES = ("serial", "parallel")
PSNR_CAP = 100.0


class CheckerboardSplit:
    """Slice 1 = (row + col) even, slice 2 = odd; flat raster indices."""

    def __init__(self, height: int, width: int):
        self.height = int(height)
        self.width = int(width)
        self.anchor = checkerboard(self.height, self.width)

    @property
    def slice1(self) -> np.ndarray:
        return np.nonzero(self.anchor)[0]

    @property
    def slice2(self) -> np.ndarray:
        return np.nonzero(~self.anchor)[0]

    def masks(self) -> Tuple[np.ndarray, np.ndarray]:
        grid = self.anchor.reshape(self.height, self.width)
        return grid, ~grid


@dataclass
class DecodeResult:
    x_hat: np.ndarray
    y_hat: np.ndarray
    z_hat: np.ndarray
    forward_passes: int
    elapsed: float


@dataclass
class EncodeResult:
    bitstream: Bitstream
    y_hat: np.ndarray
    z_hat: np.ndarray
    mu: np.ndarray
    sigma: np.ndarray


# =============================================================================
# HELPERS
# =============================================================================

def _rows(params, height: int, width: int):
    """GaussianParams for one image -> (mu, sigma) arrays of shape (n, C)."""
    c = params.mu.shape[1]
    mu = params.mu.data[0].reshape(c, height * width).T
    sigma = params.sigma.data[0].reshape(c, height * width).T
    return mu, sigma


def _symbol_range(values: np.ndarray) -> Tuple[int, int]:
    if values.size == 0:
        return 0, 0
    return int(values.min()), int(values.max())


def _hyper_cdf(model, z_range):
    """One factorized CDF table per hyper channel over z_range (tails folded in)."""
    s_min, s_max = z_range
    density = model.hyper_density
    symbols = np.arange(s_min, s_max + 1, dtype=np.float64)
    grid = np.tile(symbols, (density.channels, 1))
    pmf = density.pmf(grid)
    pmf[:, 0] += density.cdf(np.full((density.channels, 1), s_min - 0.5))[:, 0]
    pmf[:, -1] += 1.0 - density.cdf(np.full((density.channels, 1), s_max + 0.5))[:, 0]
    return build_cdf_from_pmf(pmf, s_min, s_max)


def _encode_rows(encoder: RangeEncoder, symbols: np.ndarray, mu: np.ndarray, sigma: np.ndarray,
                 y_range):
    table = build_cdf(mu.reshape(-1), sigma.reshape(-1), *y_range)
    for i, symbol in enumerate(symbols.reshape(-1)):
        encoder.encode(int(symbol), table, table.row(i))


def _decode_rows(decoder: RangeDecoder, mu: np.ndarray, sigma: np.ndarray, y_range) -> np.ndarray:
    table = build_cdf(mu.reshape(-1), sigma.reshape(-1), *y_range)
    return np.array([decoder.decode(table, table.row(i)) for i in range(len(table))],
                    dtype=np.int64).reshape(mu.shape)


def _context_mode(model) -> str:
    return model.config.context_mode


# =============================================================================
# ENCODE
# =============================================================================

def encode(x, model, mode: str = "serial", lam: float = 0.0) -> EncodeResult:
    """
    Compress a (3, H, W) image in [0, 1].

    Returns:
        EncodeResult with the Bitstream and the quantized latents / parameters used
    """
    if mode not in CODEC_MODES:
        raise ValueError(f"unknown codec mode '{mode}', expected one of {CODEC_MODES}")
    x = np.asarray(x, dtype=np.float64)
    if x.ndim != 3 or x.shape[0] != 3:
        raise ValueError(f"expected a (3, H, W) image, got shape {x.shape}")
    config = model.config
    ef = model.entroformer
    model.eval()
    _, height, width = x.shape

    with T.no_grad(), T.precision(CODING_PRECISION):
        padded = pad_image(x, config.pad_multiple)
        y = model.analysis(T.Tensor(padded[None]))
        y_hat = quantize(y, "round")
        c, lh, lw = y_hat.shape[1:]
        n = lh * lw
        segments = []

        hyper, z_hat, z_range, hyper_shape = None, np.zeros((0, 0, 0)), (0, 0), (0, 0, 0)
        if config.entropy_variant != "context-only":
            z_hat_t = quantize(ef.hyper_encode(y), "round")
            z_hat = z_hat_t.data[0].astype(np.int64)
            z_range = _symbol_range(z_hat)
            hyper_shape = z_hat.shape
            table = _hyper_cdf(model, z_range)
            encoder = RangeEncoder()
            for ch in range(hyper_shape[0]):
                for symbol in z_hat[ch].reshape(-1):
                    encoder.encode(int(symbol), table, table.row(ch))
            segments.append(encoder.finish())
            hyper = ef.hyper_decode(z_hat_t, (lh, lw))

        symbols = y_hat.data[0].reshape(c, n).T.astype(np.int64)
        y_range = _symbol_range(symbols)
        mu = np.zeros((n, c))
        sigma = np.zeros((n, c))
        if mode == "serial":
            mu, sigma = _rows(ef.entropy_parameters(y_hat, hyper, "serial"), lh, lw)
            encoder = RangeEncoder()
            for i in range(n):
                _encode_rows(encoder, symbols[i], mu[i], sigma[i], y_range)
            segments.append(encoder.finish())
        else:
            split = CheckerboardSplit(lh, lw)
            for rows, ctx in ((split.slice1, "none"), (split.slice2, _context_mode(model))):
                pass_mu, pass_sigma = _rows(ef.entropy_parameters(y_hat, hyper, ctx), lh, lw)
                mu[rows], sigma[rows] = pass_mu[rows], pass_sigma[rows]
                encoder = RangeEncoder()
                if len(rows):
                    _encode_rows(encoder, symbols[rows], pass_mu[rows], pass_sigma[rows], y_range)
                segments.append(encoder.finish())

    stream = Bitstream(mode=mode, variant=config.entropy_variant, image_size=(height, width),
                       model_hash=model.hash_prefix(), lambda_id=lambda_id(lam),
                       latent_shape=(c, lh, lw), hyper_shape=tuple(hyper_shape),
                       y_range=y_range, z_range=z_range, segments=segments)
    logger.debug("encoded %dx%d image in %s mode: %d bytes", height, width, mode, len(stream))
    return EncodeResult(stream, y_hat.data[0].astype(np.int64), z_hat, mu, sigma)


# =============================================================================
# DECODE
# =============================================================================

def _check_stream(stream: Bitstream, model, mode: str = None):
    if stream.model_hash != model.hash_prefix():
        raise BitstreamError("model hash mismatch: the stream was written by different weights")
    if stream.variant != model.config.entropy_variant:
        raise BitstreamError(f"stream variant {stream.variant} does not match model "
                             f"variant {model.config.entropy_variant}")
    if mode is not None and stream.mode != mode:
        raise BitstreamError(f"stream was encoded in {stream.mode} mode, not {mode}")
    expected = (1 if stream.variant != "context-only" else 0) + (1 if stream.mode == "serial" else 2)
    if len(stream.segments) != expected:
        raise BitstreamError(f"expected {expected} segments, found {len(stream.segments)}")


def _decode_hyper(stream: Bitstream, model):
    ef = model.entroformer
    c, lh, lw = stream.latent_shape
    if stream.variant == "context-only":
        return None, np.zeros((0, 0, 0), dtype=np.int64)
    hc, hh, hw = stream.hyper_shape
    table = _hyper_cdf(model, stream.z_range)
    decoder = RangeDecoder(stream.segments[0])
    z_hat = np.empty((hc, hh * hw), dtype=np.int64)
    for ch in range(hc):
        for j in range(hh * hw):
            z_hat[ch, j] = decoder.decode(table, table.row(ch))
    z_hat = z_hat.reshape(hc, hh, hw)
    hyper = ef.hyper_decode(T.Tensor(z_hat[None].astype(np.float64)), (lh, lw))
    return hyper, z_hat


def _finish(stream: Bitstream, model, y_hat: np.ndarray, z_hat: np.ndarray, started: float):
    x_hat = reconstruct(y_hat, model, stream.image_size)
    return DecodeResult(x_hat, y_hat, z_hat, model.entroformer.forward_passes,
                        time.perf_counter() - started)


def decode_serial(stream: Bitstream, model) -> DecodeResult:
    """Raster-scan decode: one entropy-model pass per latent position."""
    _check_stream(stream, model, "serial")
    started = time.perf_counter()
    model.eval()
    ef = model.entroformer
    with T.no_grad(), T.precision(CODING_PRECISION):
        hyper, z_hat = _decode_hyper(stream, model)
        ef.forward_passes = 0
        c, lh, lw = stream.latent_shape
        n = lh * lw
        y_hat = np.zeros((c, lh, lw), dtype=np.int64)
        decoder = RangeDecoder(stream.segments[-1])
        if model.config.entropy_variant == "hyperprior-only":
            params = ef.entropy_parameters(T.Tensor(y_hat[None].astype(np.float64)), hyper, "serial")
            mu, sigma = _rows(params, lh, lw)
            for i in range(n):
                y_hat[:, i // lw, i % lw] = _decode_rows(decoder, mu[i], sigma[i], stream.y_range)
        else:
            for i in range(n):
                params = ef.entropy_parameters(T.Tensor(y_hat[None].astype(np.float64)), hyper, "serial")
                mu, sigma = _rows(params, lh, lw)
                y_hat[:, i // lw, i % lw] = _decode_rows(decoder, mu[i], sigma[i], stream.y_range)
        return _finish(stream, model, y_hat, z_hat, started)


def decode_parallel(stream: Bitstream, model) -> DecodeResult:
    """Two-pass checkerboard decode: slice 1 from the hyperprior, then slice 2 in one shot."""
    _check_stream(stream, model, "parallel")
    started = time.perf_counter()
    model.eval()
    ef = model.entroformer
    with T.no_grad(), T.precision(CODING_PRECISION):
        hyper, z_hat = _decode_hyper(stream, model)
        ef.forward_passes = 0
        c, lh, lw = stream.latent_shape
        split = CheckerboardSplit(lh, lw)
        flat = np.zeros((lh * lw, c), dtype=np.int64)
        passes = ((split.slice1, "none", stream.segments[-2]),
                  (split.slice2, _context_mode(model), stream.segments[-1]))
        for rows, ctx, segment in passes:
            if not len(rows):
                continue
            current = flat.T.reshape(c, lh, lw)
            params = ef.entropy_parameters(T.Tensor(current[None].astype(np.float64)), hyper, ctx)
            mu, sigma = _rows(params, lh, lw)
            decoder = RangeDecoder(segment)
            flat[rows] = _decode_rows(decoder, mu[rows], sigma[rows], stream.y_range)
        y_hat = flat.T.reshape(c, lh, lw)
        return _finish(stream, model, y_hat, z_hat, started)


def decode(stream: Bitstream, model) -> DecodeResult:
    if stream.mode == "serial":
        return decode_serial(stream, model)
    return decode_parallel(stream, model)


# =============================================================================
# METRICS
# =============================================================================

def psnr(x: np.ndarray, x_hat: np.ndarray) -> float:
    """PSNR on the 8-bit scale, capped at 100 dB for identical images."""
    a = to_uint8(x).astype(np.float64)
    b = to_uint8(x_hat).astype(np.float64)
    mse = float(np.mean((a - b) ** 2))
    if mse == 0:
        return PSNR_CAP
    return min(PSNR_CAP, 10.0 * math.log10(255.0 ** 2 / mse))


def eval_metrics(x: np.ndarray, x_hat: np.ndarray, n_bytes: int) -> Tuple[float, float]:
    """bpp = 8 * bytes / image pixels; PSNR on the 8-bit scale."""
    x, x_hat = np.asarray(x), np.asarray(x_hat)
    if x.shape != x_hat.shape:
        raise ValueError(f"image shapes differ: {x.shape} vs {x_hat.shape}")
    pixels = x.shape[-2] * x.shape[-1]
    return 8.0 * n_bytes / pixels, psnr(x, x_hat)


def rounded_latents(x, model):
    """
    Padded image -> rounded latents, hyperprior features and hyper-latent bits.

    Returns:
        (y_hat, hyper, z_bits); hyper is None for the context-only variant
    """
    x = np.asarray(x, dtype=np.float64)
    config = model.config
    ef = model.entroformer
    model.eval()
    with T.no_grad():
        y = model.analysis(T.Tensor(pad_image(x, config.pad_multiple)[None]))
        y_hat = quantize(y, "round")
        hyper, z_bits = None, 0.0
        if config.entropy_variant != "context-only":
            z_hat = quantize(ef.hyper_encode(y), "round")
            hyper = ef.hyper_decode(z_hat, y_hat.shape[2:])
            z_bits = rate_bits(factorized_likelihood(z_hat, model.hyper_density)).item()
    return y_hat, hyper, z_bits


def estimate_bits(x, model, mode: str = "serial", **context_kwargs) -> dict:
    """
    Rate estimate (no range coding) for one image with rounded latents.

    Returns:
        dict with 'y_bits', 'z_bits', per-position 'position_bits' (n,) and 'pixels'
    """
    x = np.asarray(x, dtype=np.float64)
    ef = model.entroformer
    y_hat, hyper, z_bits = rounded_latents(x, model)
    _, _, lh, lw = y_hat.shape
    with T.no_grad():
        if mode == "serial":
            params = ef.entropy_parameters(y_hat, hyper, "serial", **context_kwargs)
        else:
            split = CheckerboardSplit(lh, lw)
            first = ef.entropy_parameters(y_hat, hyper, "none")
            second = ef.entropy_parameters(y_hat, hyper, _context_mode(model), **context_kwargs)
            anchor = split.masks()[0][None, None]
            params = GaussianParams(T.where(anchor, first.mu, second.mu),
                                 T.where(anchor, first.sigma, second.sigma))
        p = gaussian_uniform_likelihood(y_hat, params.mu, params.sigma).data[0]
        position_bits = -np.log2(p).sum(axis=0).reshape(-1)
    return {"y_bits": float(position_bits.sum()), "z_bits": float(z_bits),
            "position_bits": position_bits, "pixels": x.shape[1] * x.shape[2]}


# =============================================================================
# FILE API
# =============================================================================

def encode_file(image_path, model, mode: str = "serial", out_path=None, lam: float = 0.0) -> dict:
    """Image file -> .etf file. Returns a summary dict (bytes, bpp, seconds)."""
    image_path = Path(image_path)
    out_path = Path(out_path) if out_path else image_path.with_suffix(".etf")
    x = read_image(image_path)
    started = time.perf_counter()
    result = encode(x, model, mode, lam)
    result.bitstream.save(out_path)
    size = out_path.stat().st_size
    return {"path": str(out_path), "bytes": size, "bpp": 8.0 * size / (x.shape[1] * x.shape[2]),
            "seconds": time.perf_counter() - started}


def decode_file(stream_path, model, out_path=None) -> DecodeResult:
    stream_path = Path(stream_path)
    out_path = Path(out_path) if out_path else stream_path.with_suffix(".png")
    result = decode(Bitstream.load(stream_path), model)
    write_image(out_path, result.x_hat)
    return result



def reconstruct(y_hat: np.ndarray, model, image_size) -> np.ndarray:
    """Synthesis of coded latents exactly as the decoder runs it, cropped to image_size."""
    with T.no_grad(), T.precision(CODING_PRECISION):
        x_hat = model.synthesis(T.Tensor(np.asarray(y_hat)[None].astype(np.float64))).data[0]
    return crop_image(np.asarray(x_hat, dtype=np.float64), *image_size)


def evaluate(x, model, mode: str = "serial", lam: float = 0.0, full_decode: bool = False) -> dict:
    """
    Encode one image and score it. Without full_decode the reconstruction comes from the
    encoder's own latents, which the decoder reproduces bit-exactly.

    Returns:
        dict with 'bytes', 'bpp', 'psnr', 'encode_seconds' and, when decoded, 'decode_seconds'
    """
    x = np.asarray(x, dtype=np.float64)
    started = time.perf_counter()
    encoded = encode(x, model, mode, lam)
    row = {"encode_seconds": time.perf_counter() - started}
    if full_decode:
        result = decode(encoded.bitstream, model)
        x_hat = result.x_hat
        row["decode_seconds"] = result.elapsed
    else:
        x_hat = reconstruct(encoded.y_hat, model, x.shape[1:])
    n_bytes = len(encoded.bitstream.to_bytes())
    row["bytes"] = n_bytes
    row["bpp"], row["psnr"] = eval_metrics(x, x_hat, n_bytes)
    return row
