"""
Bitstream Container
Self-describing header plus range-coded payload segments (.etf files).

Layout (little-endian, fixed width):
    magic[4] version:u16 mode:u8 variant:u8
    height:u32 width:u32 model_hash[8] lambda_id:u32
    latent C,H,W:u16x3  hyper C,H,W:u16x3
    y_min:i32 y_max:i32 z_min:i32 z_max:i32
    segment_count:u8 segment lengths:u32 x count
    segment payloads, back to back
"""
import logging
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import List, Tuple

logger = logging.getLogger(__name__)

MAGIC = b"ETFM"
FORMAT_VERSION = 1
HASH_BYTES = 8

MODES = ("serial", "parallel")
VARIANTS = ("joint", "hyperprior-only", "context-only")

_HEADER = struct.Struct("<4sHBBII8sI3H3H4iB")


class BitstreamError(ValueError):
    """Malformed container, or a container that does not belong to the given model."""


def lambda_id(lam: float) -> int:
    """lambda stored as an integer number of 1e-6 steps."""
    return int(round(lam * 1_000_000))


@dataclass
class Bitstream:
    mode: str
    variant: str
    image_size: Tuple[int, int]
    model_hash: bytes
    lambda_id: int
    latent_shape: Tuple[int, int, int]
    hyper_shape: Tuple[int, int, int]
    y_range: Tuple[int, int]
    z_range: Tuple[int, int]
    segments: List[bytes] = field(default_factory=list)

    def __post_init__(self):
        if self.mode not in MODES:
            raise BitstreamError(f"unknown codec mode '{self.mode}'")
        if self.variant not in VARIANTS:
            raise BitstreamError(f"unknown entropy variant '{self.variant}'")
        if len(self.model_hash) != HASH_BYTES:
            raise BitstreamError(f"model hash must be {HASH_BYTES} bytes")

    @property
    def payload_bytes(self) -> int:
        return sum(len(s) for s in self.segments)

    def header_bytes(self) -> int:
        return _HEADER.size + 4 * len(self.segments)

    def __len__(self):
        return self.header_bytes() + self.payload_bytes

    def to_bytes(self) -> bytes:
        header = _HEADER.pack(
            MAGIC, FORMAT_VERSION, MODES.index(self.mode), VARIANTS.index(self.variant),
            self.image_size[0], self.image_size[1], bytes(self.model_hash), self.lambda_id,
            *self.latent_shape, *self.hyper_shape, *self.y_range, *self.z_range,
            len(self.segments))
        lengths = struct.pack(f"<{len(self.segments)}I", *(len(s) for s in self.segments))
        return header + lengths + b"".join(self.segments)

    @classmethod
    def from_bytes(cls, data: bytes) -> "Bitstream":
        if len(data) < _HEADER.size:
            raise BitstreamError(f"stream of {len(data)} bytes is shorter than the header")
        fields = _HEADER.unpack_from(data, 0)
        magic, version, mode, variant = fields[:4]
        if magic != MAGIC:
            raise BitstreamError(f"bad magic {magic!r}")
        if version != FORMAT_VERSION:
            raise BitstreamError(f"unsupported format version {version}")
        if mode >= len(MODES) or variant >= len(VARIANTS):
            raise BitstreamError(f"bad mode/variant ids {mode}/{variant}")
        height, width, model_hash, lam_id = fields[4:8]
        latent_shape, hyper_shape = tuple(fields[8:11]), tuple(fields[11:14])
        y_range, z_range = tuple(fields[14:16]), tuple(fields[16:18])
        count = fields[18]
        offset = _HEADER.size
        if len(data) < offset + 4 * count:
            raise BitstreamError("segment table is truncated")
        lengths = struct.unpack_from(f"<{count}I", data, offset)
        offset += 4 * count
        if offset + sum(lengths) != len(data):
            raise BitstreamError(f"segment lengths sum to {sum(lengths)} but "
                                 f"{len(data) - offset} payload bytes are present")
        segments = []
        for length in lengths:
            segments.append(bytes(data[offset:offset + length]))
            offset += length
        return cls(MODES[mode], VARIANTS[variant], (height, width), model_hash, lam_id,
                   latent_shape, hyper_shape, y_range, z_range, segments)

    def save(self, path) -> Path:
        path = Path(path)
        path.write_bytes(self.to_bytes())
        logger.info("wrote %s (%d bytes)", path, len(self))
        return path

    @classmethod
    def load(cls, path) -> "Bitstream":
        return cls.from_bytes(Path(path).read_bytes())
