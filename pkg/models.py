"""
Models Module
Configuration records, the full compression model and checkpoint I/O.
"""
import hashlib
import json
import logging
from dataclasses import asdict, dataclass, fields
from pathlib import Path
from typing import Optional

import numpy as np

import tensor as T
from autoencoder import DOWNSCALE, Decoder, Encoder, decode_image, encode_image
from entroformer import HYPER_SCALE, Entroformer
from entropy_model import (SIGMA_FLOOR, FactorizedDensity, RdLoss, factorized_likelihood,
                           gaussian_uniform_likelihood, quantize, rate_bits, rd_loss)
from layers import Module

logger = logging.getLogger(__name__)

__version__ = "0.3.0"
CONFIG_VERSION = 1
CHECKPOINT_VERSION = 1

POSITION_ENCODINGS = ("none", "absolute", "rpe-1d1d", "rpe-2d", "rpe-diamond")
ENTROPY_VARIANTS = ("joint", "hyperprior-only", "context-only")
TRAIN_MODES = ("serial", "parallel")
PASS2_CONTEXTS = ("bidirectional", "unidirectional")


class _Record:
    """to_dict / from_dict shared by the config dataclasses."""

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, data: dict):
        known = {f.name for f in fields(cls)}
        unknown = sorted(set(data) - known)
        if unknown:
            raise ValueError(f"unknown {cls.__name__} keys: {', '.join(unknown)}")
        return cls(**data)


@dataclass
class ModelConfig(_Record):
    ae_channels: int = 32
    latent_channels: int = 16
    hyper_channels: int = 16
    d_model: int = 48
    heads: int = 6
    hyper_depth: int = 2  # blocks per hyper stage; the context model gets twice as many
    ffn_ratio: int = 4
    k: Optional[int] = 32
    h: int = 3
    position_encoding: str = "rpe-diamond"
    entropy_variant: str = "joint"
    train_mode: str = "serial"
    context_mode: str = "bidirectional"
    sigma_floor: float = SIGMA_FLOOR
    cdf_precision: int = 16
    init_std: float = 0.02

    def __post_init__(self):
        if self.heads < 1 or self.d_model % self.heads:
            raise ValueError(f"d_model {self.d_model} is not divisible by {self.heads} heads")
        if self.k is not None and self.k < 1:
            raise ValueError(f"k must be >= 1 or null (dense), got {self.k}")
        if self.h < 1:
            raise ValueError(f"h must be >= 1, got {self.h}")
        if self.position_encoding not in POSITION_ENCODINGS:
            raise ValueError(f"position_encoding must be one of {POSITION_ENCODINGS}")
        if self.position_encoding == "absolute" and self.d_model % 2:
            raise ValueError("absolute position encoding needs an even d_model")
        if self.entropy_variant not in ENTROPY_VARIANTS:
            raise ValueError(f"entropy_variant must be one of {ENTROPY_VARIANTS}")
        if self.train_mode not in TRAIN_MODES:
            raise ValueError(f"train_mode must be one of {TRAIN_MODES}")
        if self.context_mode not in PASS2_CONTEXTS:
            raise ValueError(f"context_mode must be one of {PASS2_CONTEXTS}")
        if self.cdf_precision != 16:
            raise ValueError("only 16-bit CDF tables are supported")
        if self.hyper_depth < 1:
            raise ValueError("hyper_depth must be >= 1")

    @property
    def context_depth(self) -> int:
        return 2 * self.hyper_depth

    @property
    def pad_multiple(self) -> int:
        if self.entropy_variant == "context-only":
            return DOWNSCALE
        return DOWNSCALE * HYPER_SCALE


@dataclass
class TrainConfig(_Record):
    lam: float = 0.02
    steps: int = 2000
    batch_size: int = 4
    patch_size: int = 64
    base_lr: float = 1e-4
    beta1: float = 0.9
    beta2: float = 0.999
    adam_eps: float = 1e-8
    warmup: float = 0.05
    decay: float = 0.75
    decay_buckets: int = 5
    clip_norm: float = 1.0
    weight_decay: float = 0.0
    pretrain_ratio: float = 0.5
    pretrain_steps: int = 0
    key_mask_ratio: float = 0.0
    seed: int = 0
    precision: str = "float64"
    log_every: int = 50

    def __post_init__(self):
        if not 0.0 < self.warmup < 1.0:
            raise ValueError(f"warmup fraction must be in (0, 1), got {self.warmup}")
        if self.steps < 1 or self.batch_size < 1:
            raise ValueError("steps and batch_size must be positive")
        if self.patch_size % 64:
            raise ValueError(f"patch_size must be a multiple of 64, got {self.patch_size}")
        if not 0.0 <= self.pretrain_ratio < 1.0 or not 0.0 <= self.key_mask_ratio < 1.0:
            raise ValueError("mask ratios must be in [0, 1)")
        if self.lam < 0:
            raise ValueError("lambda must be non-negative")
        if self.precision not in ("float32", "float64"):
            raise ValueError("precision must be float32 or float64")


def load_config(path):
    """
    Read a JSON config file: {"version": 1, "model": {...}, "train": {...}}.

    Returns:
        (ModelConfig, TrainConfig)
    """
    data = json.loads(Path(path).read_text())
    unknown = sorted(set(data) - {"version", "model", "train"})
    if unknown:
        raise ValueError(f"unknown config sections: {', '.join(unknown)}")
    version = data.get("version", CONFIG_VERSION)
    if version != CONFIG_VERSION:
        raise ValueError(f"config version {version} is not supported (expected {CONFIG_VERSION})")
    return ModelConfig.from_dict(data.get("model", {})), TrainConfig.from_dict(data.get("train", {}))


def save_config(path, model_config: ModelConfig, train_config: TrainConfig) -> Path:
    path = Path(path)
    path.write_text(json.dumps({"version": CONFIG_VERSION, "model": model_config.to_dict(),
                                "train": train_config.to_dict()}, indent=2))
    return path


# =============================================================================
# COMPRESSION MODEL
# =============================================================================

class CompressionModel(Module):
    """Main autoencoder + Entroformer entropy model + factorized hyper-latent density."""

    def __init__(self, config: ModelConfig, seed: int = 0):
        rng = np.random.default_rng(seed)
        self.config = config
        self.encoder = Encoder(config.ae_channels, config.latent_channels, rng)
        self.decoder = Decoder(config.ae_channels, config.latent_channels, rng)
        self.entroformer = Entroformer(config, rng)
        self.hyper_density = FactorizedDensity(config.hyper_channels, rng)

    def analysis(self, x):
        return encode_image(x, self.encoder)

    def synthesis(self, y_hat):
        return decode_image(y_hat, self.decoder)

    def train_context_mode(self) -> str:
        return "serial" if self.config.train_mode == "serial" else self.config.context_mode

    def forward_train(self, x, lam: float, rng: np.random.Generator, pretrain_ratio: float = 0.0,
                      key_mask_ratio: float = 0.0) -> RdLoss:
        """Noise-quantized forward pass returning the rate-distortion loss for a batch."""
        x = T._lift(x)
        batch, _, height, width = x.shape
        ef = self.entroformer
        y = self.analysis(x)
        y_tilde = quantize(y, "noise", rng)

        hyper, z_bits = None, 0.0
        if self.config.entropy_variant != "context-only":
            z_tilde = quantize(ef.hyper_encode(y), "noise", rng)
            hyper = ef.hyper_decode(z_tilde)
            z_bits = rate_bits(factorized_likelihood(z_tilde, self.hyper_density))

        mode = self.train_context_mode()
        kwargs = {}
        if pretrain_ratio > 0:
            mode, kwargs = "pretrain", {"ratio": pretrain_ratio, "rng": rng}
        elif key_mask_ratio > 0 and mode == "serial":
            n = y.shape[2] * y.shape[3]
            kwargs = {"drop": rng.random((batch, n)) < key_mask_ratio}
        params = ef.entropy_parameters(y_tilde, hyper, mode, **kwargs)
        y_bits = rate_bits(gaussian_uniform_likelihood(y_tilde, params.mu, params.sigma))
        x_hat = self.synthesis(y_tilde)
        return rd_loss(x, x_hat, y_bits, z_bits, lam, batch * height * width)

    def hash(self) -> bytes:
        return model_hash(self)

    def hash_prefix(self) -> bytes:
        return self.hash()[:8]


def model_hash(model: Module) -> bytes:
    """SHA-256 over parameter names, shapes and little-endian float64 values in order."""
    digest = hashlib.sha256()
    for name, p in model.named_parameters():
        digest.update(name.encode())
        digest.update(np.asarray(p.shape, dtype="<i8").tobytes())
        digest.update(np.ascontiguousarray(p.data, dtype="<f8").tobytes())
    return digest.digest()


# =============================================================================
# CHECKPOINTS
# =============================================================================

def save_checkpoint(model: CompressionModel, path, extra: dict = None) -> Path:
    """Write a single .npz: a JSON __header__ entry plus one array per parameter."""
    path = Path(path)
    named = list(model.named_parameters())
    header = {
        "format_version": CHECKPOINT_VERSION,
        "code_version": __version__,
        "config": model.config.to_dict(),
        "param_order": [name for name, _ in named],
        "tags": {name: {"shape": list(p.shape), "dtype": str(p.data.dtype)} for name, p in named},
        "model_hash": model.hash().hex(),
        "extra": extra or {},
    }
    arrays = {name: p.data for name, p in named}
    with open(path, "wb") as handle:
        np.savez(handle, __header__=np.array(json.dumps(header)), **arrays)
    logger.info("saved checkpoint %s (%d parameters)", path, model.parameter_count())
    return path


def read_checkpoint_header(path) -> dict:
    with np.load(Path(path), allow_pickle=False) as archive:
        return json.loads(str(archive["__header__"]))


def load_checkpoint(path) -> CompressionModel:
    """Rebuild a model from a checkpoint; raises ValueError if anything does not match."""
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(f"checkpoint {path} not found")
    with np.load(path, allow_pickle=False) as archive:
        header = json.loads(str(archive["__header__"]))
        if header.get("format_version") != CHECKPOINT_VERSION:
            raise ValueError(f"unsupported checkpoint version {header.get('format_version')}")
        with T.precision(np.float64):
            model = CompressionModel(ModelConfig.from_dict(header["config"]))
        named = dict(model.named_parameters())
        if list(named) != header["param_order"]:
            raise ValueError("checkpoint parameter order does not match the model layout")
        for name in header["param_order"]:
            tag = header["tags"][name]
            data = archive[name]
            if list(data.shape) != tag["shape"] or str(data.dtype) != tag["dtype"]:
                raise ValueError(f"parameter {name} does not match its shape/dtype tag")
            if data.shape != named[name].shape:
                raise ValueError(f"parameter {name} has shape {data.shape}, model expects "
                                 f"{named[name].shape}")
            named[name].data = np.array(data, copy=True)
    if model.hash().hex() != header["model_hash"]:
        raise ValueError(f"checkpoint {path} failed its model hash check")
    model.eval()
    return model
