"""
Science Module
Toy-scale experiment harness behind the CLI: position-encoding, top-k and context
ablations, the masked-position rate study, decode benchmarks, attention dumps and
directory evaluation.
"""
import json
import logging
import subprocess
import time
from dataclasses import replace
from pathlib import Path
from typing import Iterable, List, Optional

import numpy as np
import pandas as pd
from scipy import stats

import tensor as T
from autoencoder import DOWNSCALE, pad_image
from corpus import SyntheticCorpus, list_images, read_image, write_pgm
from entroformer import checkerboard
from entropy_model import gaussian_uniform_likelihood, quantize
from models import POSITION_ENCODINGS, CompressionModel, ModelConfig, TrainConfig, __version__
from pipeline import CODING_PRECISION, decode, encode, estimate_bits, evaluate, rounded_latents
from position import PositionGrid
from trainer import NonFiniteLossError, build_model, fit, mask_pretrain

logger = logging.getLogger(__name__)

# --- CONFIGURATION ---
SCRIPT_DIR = Path(__file__).parent
PE_VARIANTS = POSITION_ENCODINGS
TOPK_SWEEP = (4, 16, None)


# =============================================================================
# CSV OUTPUT
# =============================================================================

def code_version() -> str:
    """git describe of the working tree, falling back to the package version."""
    try:
        out = subprocess.run(["git", "describe", "--always", "--dirty", "--tags"], cwd=SCRIPT_DIR,
                             capture_output=True, text=True, timeout=5)
        if out.returncode == 0 and out.stdout.strip():
            return out.stdout.strip()
    except (OSError, subprocess.SubprocessError):
        pass
    return f"v{__version__}"


def write_csv(frame: pd.DataFrame, path, meta: dict = None) -> Path:
    """CSV with '#' comment lines carrying the code version and run configuration."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="") as handle:
        handle.write(f"# entroformer {code_version()}\n")
        for key, value in (meta or {}).items():
            handle.write(f"# {key}: {json.dumps(value, default=str)}\n")
        frame.to_csv(handle, index=False)
    return path


def read_csv(path) -> pd.DataFrame:
    return pd.read_csv(path, comment="#")


# =============================================================================
# SCORING
# =============================================================================

def held_out_bpp(model: CompressionModel, images: Iterable[np.ndarray], mode: str = "serial") -> float:
    """Mean estimated bpp (latents + hyper-latents) over the images."""
    values = []
    for x in images:
        bits = estimate_bits(x, model, mode)
        values.append((bits["y_bits"] + bits["z_bits"]) / bits["pixels"])
    return float(np.mean(values))


def slice2_bpp(model: CompressionModel, images: Iterable[np.ndarray]) -> float:
    """Mean estimated bpp of the checkerboard slice-2 latents alone."""
    values = []
    for x in images:
        bits = estimate_bits(x, model, "parallel")
        lh, lw = _latent_grid(model, x)
        values.append(bits["position_bits"][~checkerboard(lh, lw)].sum() / bits["pixels"])
    return float(np.mean(values))


def _latent_grid(model: CompressionModel, x: np.ndarray):
    multiple = model.config.pad_multiple
    height, width = (-(-extent // multiple) * multiple for extent in x.shape[1:])
    return height // DOWNSCALE, width // DOWNSCALE


def train_variant(model_config: ModelConfig, train_config: TrainConfig, corpus,
                  verbose: bool = True):
    """
    Train one model, with masked pretraining first when pretrain_steps is set.

    Returns:
        (model, diverged) where diverged is True if training hit a non-finite loss
    """
    model = build_model(model_config, train_config)
    try:
        if train_config.pretrain_steps:
            mask_pretrain(corpus, model, train_config, verbose=verbose)
        fit(model, corpus, train_config, verbose=verbose)
    except NonFiniteLossError as exc:
        if verbose:
            print(f"   ⚠️  {exc}")
        model.eval()
        return model, True
    return model, False


# =============================================================================
# ABLATIONS
# =============================================================================

def ablate_pe(corpus, model_config: ModelConfig, train_config: TrainConfig, held_out: List[np.ndarray],
              encodings=PE_VARIANTS, larger: List[np.ndarray] = None, verbose: bool = True) -> pd.DataFrame:
    """
    One model per position encoding, scored on held-out images (and optionally on
    larger images than the training patches).

    Returns:
        DataFrame with columns position_encoding, bpp, bpp_larger, diverged
    """
    rows = []
    for encoding in encodings:
        if verbose:
            print(f"📥 position encoding: {encoding}")
        config = replace(model_config, position_encoding=encoding)
        model, diverged = train_variant(config, train_config, corpus, verbose)
        row = {"position_encoding": encoding, "bpp": np.nan, "bpp_larger": np.nan, "diverged": diverged}
        if not diverged:
            row["bpp"] = held_out_bpp(model, held_out, config.train_mode)
            if larger:
                row["bpp_larger"] = held_out_bpp(model, larger, config.train_mode)
        rows.append(row)
    return pd.DataFrame(rows, columns=["position_encoding", "bpp", "bpp_larger", "diverged"])


def ablate_topk(corpus, model_config: ModelConfig, train_config: TrainConfig, held_out: List[np.ndarray],
                ks=TOPK_SWEEP, seeds=(0,), verbose: bool = True) -> pd.DataFrame:
    """
    Sweep the top-k budget (None = dense) over several seeds.

    Returns:
        DataFrame with columns k, bpp (mean over converged seeds), nan_rate, runs
    """
    rows = []
    for k in ks:
        scores, failures = [], 0
        for seed in seeds:
            if verbose:
                print(f"📥 top-k {k if k is not None else 'dense'}, seed {seed}")
            config = replace(model_config, k=k)
            model, diverged = train_variant(config, replace(train_config, seed=seed), corpus, verbose)
            if diverged:
                failures += 1
            else:
                scores.append(held_out_bpp(model, held_out, config.train_mode))
        rows.append({"k": "dense" if k is None else int(k),
                     "bpp": float(np.mean(scores)) if scores else np.nan,
                     "nan_rate": failures / len(seeds), "runs": len(seeds)})
    return pd.DataFrame(rows, columns=["k", "bpp", "nan_rate", "runs"])


def ablate_context(corpus, model_config: ModelConfig, train_config: TrainConfig,
                   held_out: List[np.ndarray], variants: bool = True, verbose: bool = True) -> pd.DataFrame:
    """
    Bidirectional vs unidirectional pass-2 context (checkerboard-trained models), then
    the joint / hyperprior-only / context-only entropy models.

    Returns:
        DataFrame with columns setting, bpp, slice2_bpp, diverged
    """
    settings = [(f"parallel-{ctx}", replace(model_config, train_mode="parallel", context_mode=ctx))
                for ctx in ("bidirectional", "unidirectional")]
    if variants:
        settings += [(variant, replace(model_config, entropy_variant=variant))
                     for variant in ("joint", "hyperprior-only", "context-only")]
    rows = []
    for name, config in settings:
        if verbose:
            print(f"📥 context setting: {name}")
        model, diverged = train_variant(config, train_config, corpus, verbose)
        row = {"setting": name, "bpp": np.nan, "slice2_bpp": np.nan, "diverged": diverged}
        if not diverged:
            row["bpp"] = held_out_bpp(model, held_out, config.train_mode)
            if config.train_mode == "parallel":
                row["slice2_bpp"] = slice2_bpp(model, held_out)
        rows.append(row)
    return pd.DataFrame(rows, columns=["setting", "bpp", "slice2_bpp", "diverged"])


# =============================================================================
# POSITION IMPACT
# =============================================================================

def causal_offsets(window: int):
    """(dy, dx) key-minus-query offsets inside the window that precede the query in raster order."""
    return [(dy, dx) for dy in range(-window, 1) for dx in range(-window, window + 1)
            if dy < 0 or dx < 0]


def offset_drop(height: int, width: int, offset):
    """
    One drop row per query that has a position at `offset` inside the grid.

    Returns:
        (queries, drop): query indices (m,) and boolean (m, n) with the single
        hidden position of each query set
    """
    grid = PositionGrid(height, width)
    targets = grid.coords() + np.asarray(offset)
    inside = ((targets[:, 0] >= 0) & (targets[:, 0] < height)
              & (targets[:, 1] >= 0) & (targets[:, 1] < width))
    queries = np.nonzero(inside)[0]
    drop = np.zeros((len(queries), grid.tokens), dtype=bool)
    drop[np.arange(len(queries)), targets[queries, 0] * width + targets[queries, 1]] = True
    return queries, drop


def hidden_offset_bits(model: CompressionModel, y_hat, hyper, position_bits: np.ndarray,
                       offset) -> float:
    """
    Serial latent bits of one image when every query loses the position at `offset`.
    Queries whose offset falls outside the grid keep their full-context rate from
    position_bits.
    """
    bits = np.array(position_bits, dtype=np.float64)
    _, _, lh, lw = y_hat.shape
    queries, drop = offset_drop(lh, lw, offset)
    if not len(queries):
        return float(bits.sum())
    m = len(queries)
    with T.no_grad():
        copies = T.Tensor(np.repeat(y_hat.data, m, axis=0))
        features = None if hyper is None else T.Tensor(np.repeat(hyper.data, m, axis=0))
        params = model.entroformer.entropy_parameters(copies, features, "serial", drop=drop)
        p = gaussian_uniform_likelihood(copies, params.mu, params.sigma).data
    per_position = -np.log2(p).sum(axis=1).reshape(m, -1)
    bits[queries] = per_position[np.arange(m), queries]
    return float(bits.sum())


def position_impact(model: CompressionModel, images: List[np.ndarray], window: int = 3) -> pd.DataFrame:
    """
    Rate increase when a single relative context position is hidden from every query
    of the serial context model.

    Returns:
        DataFrame with columns dy, dx, l1, delta_pct
    """
    baseline, masked = 0.0, {}
    offsets = causal_offsets(window)
    for x in images:
        bits = estimate_bits(x, model, "serial")
        baseline += bits["y_bits"]
        y_hat, hyper, _ = rounded_latents(x, model)
        for offset in offsets:
            masked[offset] = masked.get(offset, 0.0) + hidden_offset_bits(
                model, y_hat, hyper, bits["position_bits"], offset)
    rows = [{"dy": dy, "dx": dx, "l1": abs(dy) + abs(dx),
             "delta_pct": 100.0 * (masked[(dy, dx)] - baseline) / baseline} for dy, dx in offsets]
    return pd.DataFrame(rows, columns=["dy", "dx", "l1", "delta_pct"])


def distance_correlation(impact: pd.DataFrame):
    """Spearman rank correlation between l1 distance and rate increase: (rho, p)."""
    result = stats.spearmanr(impact["l1"], impact["delta_pct"])
    return float(result[0]), float(result[1])


def impact_heatmap(impact: pd.DataFrame, window: int) -> np.ndarray:
    """(window + 1, 2 * window + 1) grid of delta_pct; positions not in the causal past are 0."""
    grid = np.zeros((window + 1, 2 * window + 1))
    for row in impact.itertuples():
        grid[row.dy + window, row.dx + window] = row.delta_pct
    return grid


# =============================================================================
# BENCHMARK
# =============================================================================

def bench(model: CompressionModel, sizes=(1, 4, 8), runs: int = 10, seed: int = 0) -> pd.DataFrame:
    """
    Median serial and parallel decode times per latent-grid size (grids are rounded up
    to what the model's padding allows). Only the ratio is meaningful across machines.

    Returns:
        DataFrame with columns grid, tokens, serial_ms, parallel_ms, ratio, serial_passes,
        parallel_passes
    """
    if runs < 1:
        raise ValueError("bench needs at least one run")
    rng = np.random.default_rng(seed)
    synthetic = SyntheticCorpus()
    rows = []
    for size in sizes:
        x = synthetic.image(rng, 16 * int(size))
        timings, passes = {}, {}
        for mode in ("serial", "parallel"):
            stream = encode(x, model, mode).bitstream
            decode(stream, model)
            samples = []
            for _ in range(runs):
                started = time.perf_counter()
                result = decode(stream, model)
                samples.append(time.perf_counter() - started)
            timings[mode] = 1000.0 * float(np.median(samples))
            passes[mode] = result.forward_passes
        _, lh, lw = stream.latent_shape
        rows.append({"grid": f"{lh}x{lw}", "tokens": lh * lw, "serial_ms": timings["serial"],
                     "parallel_ms": timings["parallel"],
                     "ratio": timings["serial"] / timings["parallel"],
                     "serial_passes": passes["serial"], "parallel_passes": passes["parallel"]})
    return pd.DataFrame(rows)


# =============================================================================
# ATTENTION DUMP
# =============================================================================

def dump_attention(model: CompressionModel, image: np.ndarray, positions, out_dir=None,
                   mode: Optional[str] = None) -> pd.DataFrame:
    """
    Post-softmax attention rows of the context model for chosen latent positions, per
    layer and head, with the top-k survivor flag. In serial mode the start token shows
    up as key (-1, -1).

    Returns:
        long-form DataFrame with columns layer, head, query_row, query_col, key_row,
        key_col, weight, survivor
    """
    mode = mode or model.train_context_mode()
    model.eval()
    x = np.asarray(image, dtype=np.float64)
    lh, lw = _latent_grid(model, x)
    grid = PositionGrid(lh, lw)
    queries = []
    for row, col in positions:
        try:
            queries.append((int(row), int(col), grid.index(int(row), int(col))))
        except IndexError as exc:
            raise ValueError(str(exc)) from exc

    record = []
    with T.no_grad(), T.precision(CODING_PRECISION):
        y_hat = quantize(model.analysis(T.Tensor(pad_image(x, model.config.pad_multiple)[None])), "round")
        model.entroformer.context_features(y_hat, mode, record=record)

    coords = grid.coords()
    if mode == "serial":
        key_coords = np.concatenate([[[-1, -1]], coords[:-1]], axis=0)
    else:
        key_coords = coords
    out_dir = Path(out_dir) if out_dir else None
    if out_dir:
        out_dir.mkdir(parents=True, exist_ok=True)
    rows = []
    for layer, attention_map in enumerate(record):
        for head in range(attention_map.weights.shape[1]):
            for row, col, q in queries:
                attn = np.asarray(attention_map.weights[0, head, q], dtype=np.float64)
                keep = attention_map.keep[0, head, q]
                for (key_row, key_col), w, kept in zip(key_coords, attn, keep):
                    rows.append({"layer": layer, "head": head, "query_row": row, "query_col": col,
                                 "key_row": int(key_row), "key_col": int(key_col),
                                 "weight": float(w), "survivor": bool(kept)})
                if out_dir:
                    heat = np.zeros(grid.tokens)
                    if mode == "serial":
                        heat[:grid.tokens - 1] = attn[1:]
                    else:
                        heat[:] = attn
                    write_pgm(out_dir / f"attn_l{layer}_h{head}_r{row}_c{col}.pgm",
                              heat.reshape(lh, lw))
    frame = pd.DataFrame(rows, columns=["layer", "head", "query_row", "query_col", "key_row",
                                        "key_col", "weight", "survivor"])
    logger.debug("dumped %d attention weights for %d queries", len(frame), len(queries))
    return frame


# =============================================================================
# EVALUATION
# =============================================================================

def eval_directory(model: CompressionModel, source, mode: str = "serial", lam: float = 0.0,
                   full_decode: bool = True) -> pd.DataFrame:
    """
    Encode (and decode) every image of a file or directory.

    Returns:
        DataFrame with one row per image plus a final 'mean' row
    """
    paths = list_images(source)
    if not paths:
        raise ValueError(f"no PNG/PPM images in {source}")
    rows = []
    for path in paths:
        row = evaluate(read_image(path), model, mode, lam, full_decode)
        rows.append({"image": path.name, **row})
    frame = pd.DataFrame(rows)
    mean = frame.drop(columns=["image"]).mean(numeric_only=True).to_dict()
    return pd.concat([frame, pd.DataFrame([{"image": "mean", **mean}])], ignore_index=True)
