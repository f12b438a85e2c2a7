"""
Trainer Module
Toy-scale rate-distortion training: warmup + step-decay schedule, Adam, global-norm
clipping, masked pretraining and lambda sweeps.

Seeds: model weights come from `seed`, training batches from `seed + 1` and
quantization noise / random masks from `seed + 2`.
"""
import logging
import math
import queue
import threading
import time
from pathlib import Path

import numpy as np
import pandas as pd

import tensor as T
from entropy_model import RdLoss
from models import CompressionModel, ModelConfig, TrainConfig
from pipeline import evaluate

logger = logging.getLogger(__name__)

HISTORY_COLUMNS = ["step", "lr", "loss", "bpp_y", "bpp_z", "mse", "psnr"]
REFERENCE_LAMBDA = 0.02


class NonFiniteLossError(RuntimeError):
    """A loss term or a parameter became NaN / Inf during training."""

    def __init__(self, term: str, step: int, value=None):
        detail = f" ({value})" if value is not None else ""
        super().__init__(f"non-finite {term} at step {step}{detail}")
        self.term = term
        self.step = step


# =============================================================================
# SCHEDULE AND OPTIMIZER
# =============================================================================

def warmup_steps(total_steps: int, config: TrainConfig) -> int:
    return max(1, int(round(config.warmup * total_steps)))


def lr_schedule(step: int, total_steps: int, config: TrainConfig) -> float:
    """
    Linear ramp from 0 to base_lr over the warmup steps, then base_lr * decay^bucket,
    where the post-warmup span is cut into decay_buckets equal buckets.
    """
    if not 0 <= step <= total_steps:
        raise ValueError(f"step {step} outside [0, {total_steps}]")
    warm = warmup_steps(total_steps, config)
    if step < warm:
        return config.base_lr * step / warm
    span = max(1, total_steps - warm)
    bucket = min(config.decay_buckets - 1, (config.decay_buckets * (step - warm)) // span)
    return config.base_lr * config.decay ** bucket


class Adam:
    def __init__(self, params, lr: float = 1e-4, betas=(0.9, 0.999), eps: float = 1e-8,
                 weight_decay: float = 0.0):
        self.params = list(params)
        self.lr = lr
        self.beta1, self.beta2 = betas
        self.eps = eps
        self.weight_decay = weight_decay
        self.t = 0
        self.m = [np.zeros_like(p.data) for p in self.params]
        self.v = [np.zeros_like(p.data) for p in self.params]

    def step(self, lr: float = None):
        lr = self.lr if lr is None else lr
        self.t += 1
        correction1 = 1.0 - self.beta1 ** self.t
        correction2 = 1.0 - self.beta2 ** self.t
        for p, m, v in zip(self.params, self.m, self.v):
            if p.grad is None:
                continue
            g = p.grad + self.weight_decay * p.data if self.weight_decay else p.grad
            m *= self.beta1
            m += (1.0 - self.beta1) * g
            v *= self.beta2
            v += (1.0 - self.beta2) * g * g
            update = lr * (m / correction1) / (np.sqrt(v / correction2) + self.eps)
            p.data = p.data - update.astype(p.data.dtype, copy=False)

    def zero_grad(self):
        for p in self.params:
            p.grad = None


def clip_grad_norm(params, max_norm: float) -> float:
    """Scale all gradients so their global L2 norm is at most max_norm; returns the pre-clip norm."""
    grads = [p.grad for p in params if p.grad is not None]
    if not grads:
        return 0.0
    norm = math.sqrt(sum(float(np.sum(g * g)) for g in grads))
    if norm > max_norm > 0:
        scale = max_norm / (norm + 1e-12)
        for p in params:
            if p.grad is not None:
                p.grad = p.grad * scale
    return norm


# =============================================================================
# ASSERTIONS
# =============================================================================

def assert_truncated_normal(model) -> None:
    """Every randomly initialized weight lies within +-2 of its init std."""
    for name, p in model.named_parameters():
        std = getattr(p, "init_std", None)
        if std is not None and np.any(np.abs(p.data) > 2.0 * std + 1e-12):
            raise AssertionError(f"{name} is outside the truncated-normal init range (std {std})")


def assert_finite_parameters(model, step: int = 0) -> None:
    for name, p in model.named_parameters():
        if not np.all(np.isfinite(p.data)):
            raise NonFiniteLossError(f"parameter {name}", step)


def _check_loss(loss: RdLoss, step: int):
    for term in ("bpp_y", "bpp_z", "mse", "total"):
        value = getattr(loss, term).data
        if not np.all(np.isfinite(value)):
            raise NonFiniteLossError(term, step, float(np.asarray(value).reshape(-1)[0]))


# =============================================================================
# TRAINING
# =============================================================================

def train_step(batch, model: CompressionModel, optimizer: Adam, lam: float,
               rng: np.random.Generator, lr: float = None, step: int = 0, clip_norm: float = 1.0,
               pretrain_ratio: float = 0.0, key_mask_ratio: float = 0.0) -> RdLoss:
    """Forward, backward, global-norm clip and one Adam update on a (B, 3, P, P) batch."""
    model.train()
    optimizer.zero_grad()
    loss = model.forward_train(T.Tensor(batch), lam, rng, pretrain_ratio, key_mask_ratio)
    _check_loss(loss, step)
    loss.total.backward()
    clip_grad_norm(optimizer.params, clip_norm)
    optimizer.step(lr)
    assert_finite_parameters(model, step)
    return loss


class Prefetcher:
    """One background worker drawing batches into a small handoff queue."""

    def __init__(self, corpus, rng: np.random.Generator, batch_size: int, count: int, depth: int = 2):
        self._queue = queue.Queue(maxsize=depth)
        self._stop = threading.Event()
        self._thread = threading.Thread(target=self._run, args=(corpus, rng, batch_size, count),
                                        daemon=True)
        self._thread.start()

    def _run(self, corpus, rng, batch_size, count):
        try:
            for _ in range(count):
                if self._stop.is_set():
                    return
                self._queue.put(corpus.batch(rng, batch_size))
        except Exception as exc:  # surfaced in the training thread
            self._queue.put(exc)

    def __iter__(self):
        return self

    def __next__(self):
        item = self._queue.get()
        if isinstance(item, Exception):
            raise item
        return item

    def close(self):
        self._stop.set()
        while not self._queue.empty():
            self._queue.get_nowait()


def make_optimizer(model, config: TrainConfig) -> Adam:
    return Adam(model.parameters(), config.base_lr, (config.beta1, config.beta2), config.adam_eps,
                config.weight_decay)


def fit(model: CompressionModel, corpus, config: TrainConfig, steps: int = None,
        pretrain_ratio: float = 0.0, out_csv=None, label: str = "train",
        optimizer: Adam = None, verbose: bool = True) -> pd.DataFrame:
    """
    Run `steps` training steps (config.steps by default) and return the history.

    Returns:
        DataFrame with columns step, lr, loss, bpp_y, bpp_z, mse, psnr
    """
    steps = steps or config.steps
    optimizer = optimizer or make_optimizer(model, config)
    data_rng = np.random.default_rng(config.seed + 1)
    noise_rng = np.random.default_rng(config.seed + 2)
    rows = []
    started = time.perf_counter()
    if verbose:
        print(f"🏋️  {label}: {steps} steps, lambda={config.lam}, batch={config.batch_size}")
    batches = Prefetcher(corpus, data_rng, config.batch_size, steps)
    try:
        with T.precision(config.precision):
            for step in range(steps):
                lr = lr_schedule(step, steps, config)
                loss = train_step(next(batches), model, optimizer, config.lam, noise_rng, lr, step,
                                  config.clip_norm, pretrain_ratio, config.key_mask_ratio)
                rows.append({"step": step, "lr": lr, **loss.to_dict()})
                if verbose and (step % config.log_every == 0 or step == steps - 1):
                    print(f"   step {step:5d}  lr {lr:.2e}  loss {rows[-1]['loss']:.4f}  "
                          f"bpp {loss.bpp:.4f}  psnr {loss.psnr:.2f}")
    finally:
        batches.close()
    history = pd.DataFrame(rows, columns=HISTORY_COLUMNS)
    if out_csv is not None:
        Path(out_csv).parent.mkdir(parents=True, exist_ok=True)
        history.to_csv(out_csv, index=False)
    if verbose:
        print(f"   ✅ {label} finished in {time.perf_counter() - started:.1f}s")
    logger.info("%s: %d steps, final loss %.4f", label, steps, history["loss"].iloc[-1])
    model.eval()
    return history


def build_model(model_config: ModelConfig, train_config: TrainConfig) -> CompressionModel:
    """Fresh model in the training precision, checked for truncated-normal init."""
    with T.precision(train_config.precision):
        model = CompressionModel(model_config, seed=train_config.seed)
    assert_truncated_normal(model)
    return model


def mask_pretrain(corpus, model: CompressionModel, config: TrainConfig, out_csv=None,
                  verbose: bool = True) -> CompressionModel:
    """Train with a random share of latents corrupted to 0 and hidden from the context model."""
    steps = config.pretrain_steps or config.steps
    fit(model, corpus, config, steps, pretrain_ratio=config.pretrain_ratio, out_csv=out_csv,
        label="pretrain", verbose=verbose)
    return model


def lambda_sweep(corpus, lambdas, model_config: ModelConfig, train_config: TrainConfig,
                 held_out, mode: str = None, out_csv=None, verbose: bool = True) -> pd.DataFrame:
    """
    Train one model per lambda and score each on the held-out images with real bitstreams.

    Returns:
        DataFrame with columns lam, bpp, psnr, reference (True on the lambda = 0.02 row)
    """
    lambdas = sorted(float(lam) for lam in lambdas)
    if not lambdas:
        raise ValueError("lambda_sweep needs at least one lambda")
    mode = mode or model_config.train_mode
    rows = []
    for lam in lambdas:
        config = TrainConfig.from_dict({**train_config.to_dict(), "lam": lam})
        model = build_model(model_config, config)
        if config.pretrain_steps:
            mask_pretrain(corpus, model, config, verbose=verbose)
        fit(model, corpus, config, label=f"lambda {lam:g}", verbose=verbose)
        scores = pd.DataFrame([evaluate(x, model, mode, lam) for x in held_out])
        rows.append({"lam": lam, "bpp": scores["bpp"].mean(), "psnr": scores["psnr"].mean(),
                     "reference": math.isclose(lam, REFERENCE_LAMBDA)})
        if verbose:
            print(f"   📈 lambda {lam:g}: bpp {rows[-1]['bpp']:.4f}  psnr {rows[-1]['psnr']:.2f}")
    table = pd.DataFrame(rows, columns=["lam", "bpp", "psnr", "reference"])
    if out_csv is not None:
        table.to_csv(out_csv, index=False)
    return table
