"""
Corpus Module
Training and evaluation images: a seeded synthetic texture generator and a directory
reader for PNG / PPM files, plus 8-bit image I/O.
"""
import logging
import os
from pathlib import Path
from typing import List

import numpy as np
from PIL import Image

logger = logging.getLogger(__name__)

# --- CONFIGURATION ---
DATA_DIR = Path(os.getenv("ENTROFORMER_DATA_DIR", "data"))
IMAGE_SUFFIXES = (".png", ".ppm", ".pnm")


def read_image(path) -> np.ndarray:
    """8-bit RGB file -> (3, H, W) float64 array in [0, 1]."""
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(f"image {path} not found")
    with Image.open(path) as img:
        data = np.asarray(img.convert("RGB"), dtype=np.float64)
    return data.transpose(2, 0, 1) / 255.0


def to_uint8(image: np.ndarray) -> np.ndarray:
    return np.clip(np.round(np.asarray(image) * 255.0), 0, 255).astype(np.uint8)


def write_image(path, image: np.ndarray) -> Path:
    """(3, H, W) array in [0, 1] -> 8-bit PNG or PPM (chosen by suffix)."""
    path = Path(path)
    pixels = to_uint8(image).transpose(1, 2, 0)
    fmt = "PPM" if path.suffix.lower() in (".ppm", ".pnm") else "PNG"
    Image.fromarray(pixels).save(path, format=fmt)
    return path


def write_pgm(path, values: np.ndarray) -> Path:
    """Scale a 2-D array to 0..255 and save it as a grayscale PGM map."""
    path = Path(path)
    values = np.asarray(values, dtype=np.float64)
    span = values.max() - values.min()
    scaled = (values - values.min()) / span if span > 0 else np.zeros_like(values)
    Image.fromarray(np.round(scaled * 255).astype(np.uint8)).save(path, format="PPM")
    return path


def list_images(directory) -> List[Path]:
    directory = Path(directory)
    if directory.is_file():
        return [directory]
    if not directory.is_dir():
        raise FileNotFoundError(f"{directory} is neither an image nor a directory")
    return sorted(p for p in directory.iterdir() if p.suffix.lower() in IMAGE_SUFFIXES)


# =============================================================================
# SYNTHETIC CORPUS
# =============================================================================

class SyntheticCorpus:
    """
    Procedural RGB textures: smooth gradients, checkerboards and Gaussian-blob fields.

    Every draw comes from the generator passed in, so a seed fixes the whole sequence.
    """

    KINDS = ("gradient", "checkerboard", "blobs")

    def __init__(self, patch_size: int = 64, kinds=KINDS):
        self.patch_size = int(patch_size)
        self.kinds = tuple(kinds)

    def image(self, rng: np.random.Generator, size: int = None, kind: str = None) -> np.ndarray:
        size = size or self.patch_size
        kind = kind or self.kinds[rng.integers(len(self.kinds))]
        rows, cols = np.mgrid[0:size, 0:size] / max(size - 1, 1)
        if kind == "gradient":
            angle = rng.uniform(0, 2 * np.pi)
            ramp = np.cos(angle) * rows + np.sin(angle) * cols
            low, high = rng.uniform(0, 1, 3), rng.uniform(0, 1, 3)
            image = low[:, None, None] + (high - low)[:, None, None] * ramp[None]
        elif kind == "checkerboard":
            cell = int(rng.integers(4, max(5, size // 4)))
            board = ((np.arange(size)[:, None] // cell + np.arange(size)[None, :] // cell) % 2)
            a, b = rng.uniform(0, 1, 3), rng.uniform(0, 1, 3)
            image = np.where(board[None] == 0, a[:, None, None], b[:, None, None])
        elif kind == "blobs":
            image = np.tile(rng.uniform(0, 0.3, 3)[:, None, None], (1, size, size))
            for _ in range(int(rng.integers(3, 8))):
                cy, cx = rng.uniform(0, 1, 2)
                radius = rng.uniform(0.05, 0.3)
                blob = np.exp(-((rows - cy) ** 2 + (cols - cx) ** 2) / (2 * radius ** 2))
                image = image + rng.uniform(-0.5, 0.7, 3)[:, None, None] * blob[None]
        else:
            raise ValueError(f"unknown texture kind '{kind}'")
        image = image + rng.normal(0, 0.01, image.shape)
        return np.clip(image, 0.0, 1.0)

    def batch(self, rng: np.random.Generator, batch_size: int) -> np.ndarray:
        return np.stack([self.image(rng) for _ in range(batch_size)])

    def held_out(self, count: int, seed: int = 12345, size: int = None) -> List[np.ndarray]:
        rng = np.random.default_rng(seed)
        return [self.image(rng, size) for _ in range(count)]


def _pad_to(image: np.ndarray, size: int) -> np.ndarray:
    _, height, width = image.shape
    if height >= size and width >= size:
        return image
    pad = ((0, 0), (0, max(0, size - height)), (0, max(0, size - width)))
    return np.pad(image, pad, mode="edge")


def _centre_crop(image: np.ndarray, size: int) -> np.ndarray:
    image = _pad_to(image, size)
    _, height, width = image.shape
    top, left = (height - size) // 2, (width - size) // 2
    return image[:, top:top + size, left:left + size]


class DirectoryCorpus:
    """Random crops from the PNG / PPM files of a directory."""

    def __init__(self, directory, patch_size: int = 64):
        self.paths = list_images(directory)
        if not self.paths:
            raise ValueError(f"no PNG/PPM images in {directory}")
        self.patch_size = int(patch_size)
        self._cache = {}

    def _load(self, path: Path) -> np.ndarray:
        if path not in self._cache:
            self._cache[path] = read_image(path)
        return self._cache[path]

    def image(self, rng: np.random.Generator) -> np.ndarray:
        image = _pad_to(self._load(self.paths[rng.integers(len(self.paths))]), self.patch_size)
        _, height, width = image.shape
        size = self.patch_size
        top = int(rng.integers(height - size + 1))
        left = int(rng.integers(width - size + 1))
        return image[:, top:top + size, left:left + size]

    def batch(self, rng: np.random.Generator, batch_size: int) -> np.ndarray:
        return np.stack([self.image(rng) for _ in range(batch_size)])

    def held_out(self, count: int = None, seed: int = 0, size: int = None) -> List[np.ndarray]:
        """
        Whole images in file order, or a seeded choice of count files when the directory
        holds more. With size set, every image is centre-cropped (edge-padded if smaller).
        """
        paths = self.paths
        if count is not None and count < len(paths):
            chosen = np.random.default_rng(seed).choice(len(paths), size=count, replace=False)
            paths = [paths[i] for i in sorted(chosen)]
        images = [self._load(p) for p in paths]
        if size is None:
            return images
        return [_centre_crop(image, int(size)) for image in images]


def make_corpus(source=None, patch_size: int = 64):
    """Synthetic corpus when source is None or 'synthetic', else a directory corpus."""
    if source is None or str(source) == "synthetic":
        return SyntheticCorpus(patch_size)
    return DirectoryCorpus(source, patch_size)
