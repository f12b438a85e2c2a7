"""
Entropy Model
Quantization, latent likelihoods, the factorized hyper-latent density and the
rate-distortion objective.
"""
import logging
import math
from dataclasses import dataclass

import numpy as np
from scipy import special

import tensor as T
from layers import Module, Parameter
from tensor import Tensor

logger = logging.getLogger(__name__)

# Lowest probability any symbol can be assigned: half of one count at 16-bit CDF resolution.
P_MIN = 2.0 ** -17
SIGMA_FLOOR = 1e-6
DISTORTION_SCALE = 255.0 ** 2


@dataclass
class GaussianParams:
    """Per-element mean and deviation maps, (batch, C, H, W)."""
    mu: Tensor
    sigma: Tensor

    @property
    def shape(self):
        return self.mu.shape


@dataclass
class RdLoss:
    """Rate terms in bits per pixel, distortion as MSE on [0,1] pixels."""
    bpp_y: Tensor
    bpp_z: Tensor
    mse: Tensor
    lam: float
    total: Tensor

    @property
    def bpp(self) -> float:
        return float(self.bpp_y.item() + self.bpp_z.item())

    @property
    def psnr(self) -> float:
        mse = self.mse.item()
        return 100.0 if mse <= 0 else min(100.0, 10.0 * math.log10(1.0 / mse))

    def to_dict(self) -> dict:
        return {
            'loss': self.total.item(),
            'bpp_y': self.bpp_y.item(),
            'bpp_z': self.bpp_z.item(),
            'mse': self.mse.item(),
            'psnr': self.psnr,
        }


# =============================================================================
# QUANTIZATION AND LIKELIHOODS
# =============================================================================

def round_half_away(values: np.ndarray) -> np.ndarray:
    return np.sign(values) * np.floor(np.abs(values) + 0.5)


def quantize(y, mode: str = "round", rng: np.random.Generator = None):
    """
    "noise": add i.i.d. U(-0.5, 0.5) (training proxy, gradient passes through).
    "round": round half away from zero (no gradient).
    """
    y = T._lift(y)
    if mode == "noise":
        rng = rng if rng is not None else np.random.default_rng()
        return y + rng.uniform(-0.5, 0.5, size=y.shape)
    if mode == "round":
        return Tensor(round_half_away(y.data))
    raise ValueError(f"unknown quantization mode '{mode}', expected 'noise' or 'round'")


def standard_normal_cdf(x):
    return 0.5 * (1.0 + T.erf(x * (1.0 / math.sqrt(2.0))))


def _absolute(x):
    return T.where(x.data >= 0, x, -x)


def gaussian_uniform_likelihood(y_hat, mu, sigma, clamp: bool = True):
    """
    P(y_hat) under N(mu, sigma) convolved with U(-0.5, 0.5).

    Evaluated on |y_hat - mu| using the lower tail, which keeps precision far from
    the mean. Clamped below at P_MIN unless clamp is False.
    """
    y_hat, mu, sigma = T._lift(y_hat), T._lift(mu), T._lift(sigma)
    distance = _absolute(y_hat - mu)
    upper = standard_normal_cdf((0.5 - distance) / sigma)
    lower = standard_normal_cdf((-0.5 - distance) / sigma)
    p = upper - lower
    return T.clamp(p, P_MIN, None) if clamp else p


def gaussian_uniform_pmf(y_hat: np.ndarray, mu, sigma) -> np.ndarray:
    """Unclamped numpy version of the likelihood (float64, reference math)."""
    distance = np.abs(np.asarray(y_hat, dtype=np.float64) - mu)
    root2 = math.sqrt(2.0)
    return 0.5 * (special.erf((0.5 - distance) / (sigma * root2))
                  - special.erf((-0.5 - distance) / (sigma * root2)))


def rate_bits(probabilities):
    """-sum(log2 p) as a scalar tensor."""
    return -T.log(T._lift(probabilities)).sum() * (1.0 / math.log(2.0))


# =============================================================================
# FACTORIZED DENSITY
# =============================================================================

class FactorizedDensity(Module):
    """
    Per-channel learned CDF: a chain of monotone maps followed by a sigmoid.

    Each layer is softplus(H) @ h + b, with a tanh(a) * tanh(.) correction on every
    layer but the last. Initialized as a logistic with scale init_scale centered on 0.
    """

    def __init__(self, channels: int, rng: np.random.Generator, filters=(3, 3, 3),
                 init_scale: float = 3.0):
        self.channels = int(channels)
        widths = (1,) + tuple(filters) + (1,)
        layers = len(widths) - 1
        scale = init_scale ** (1.0 / layers)
        self.matrices, self.biases, self.factors = [], [], []
        for i in range(layers):
            init = math.log(math.expm1(1.0 / scale / widths[i + 1]))
            self.matrices.append(Parameter(np.full((channels, widths[i + 1], widths[i]), init)))
            self.biases.append(Parameter(rng.uniform(-0.5, 0.5, size=(channels, widths[i + 1], 1))))
            if i < layers - 1:
                self.factors.append(Parameter(np.zeros((channels, widths[i + 1], 1))))
        # Factors start at zero so the map is affine; recenter the median on 0.
        offset = np.array(self._logits_numpy(np.zeros((channels, 1, 1))))
        self.biases[-1].data = self.biases[-1].data - offset

    def logits(self, values):
        """values: (channels, 1, N) tensor -> (channels, 1, N) logits."""
        h = T._lift(values)
        for i, (matrix, bias) in enumerate(zip(self.matrices, self.biases)):
            h = T.matmul(T.softplus(matrix), h) + bias
            if i < len(self.factors):
                h = h + T.tanh(self.factors[i]) * T.tanh(h)
        return h

    def _logits_numpy(self, values: np.ndarray) -> np.ndarray:
        h = values
        for i, (matrix, bias) in enumerate(zip(self.matrices, self.biases)):
            h = np.logaddexp(0.0, matrix.data) @ h + bias.data
            if i < len(self.factors):
                h = h + np.tanh(self.factors[i].data) * np.tanh(h)
        return h

    def cdf(self, values: np.ndarray) -> np.ndarray:
        """CDF per channel: values (channels, N) -> (channels, N), float64 numpy."""
        values = np.asarray(values, dtype=np.float64)
        return special.expit(self._logits_numpy(values[:, None, :]))[:, 0, :]

    def pmf(self, symbols: np.ndarray) -> np.ndarray:
        """Unclamped integer-bin probabilities per channel: (channels, N) -> (channels, N)."""
        symbols = np.asarray(symbols, dtype=np.float64)
        lower = self._logits_numpy(symbols[:, None, :] - 0.5)
        upper = self._logits_numpy(symbols[:, None, :] + 0.5)
        sign = np.where(lower + upper > 0, -1.0, 1.0)
        return np.abs(special.expit(sign * upper) - special.expit(sign * lower))[:, 0, :]

    def likelihood(self, z_hat, clamp: bool = True):
        """Per-element probabilities of a (batch, channels, h, w) map."""
        z_hat = T._lift(z_hat)
        batch, channels, height, width = z_hat.shape
        if channels != self.channels:
            raise T.ShapeError("factorized_likelihood", z_hat.shape, (self.channels,))
        flat = z_hat.transpose(1, 0, 2, 3).reshape(channels, 1, batch * height * width)
        lower = self.logits(flat - 0.5)
        upper = self.logits(flat + 0.5)
        # Evaluate on the side of the median where the sigmoid is not saturated.
        sign = np.where(lower.data + upper.data > 0, -1.0, 1.0)
        p = _absolute(T.sigmoid(upper * sign) - T.sigmoid(lower * sign))
        if clamp:
            p = T.clamp(p, P_MIN, None)
        return p.reshape(channels, batch, height, width).transpose(1, 0, 2, 3)


def factorized_likelihood(z_hat, density: FactorizedDensity, clamp: bool = True):
    return density.likelihood(z_hat, clamp)


# =============================================================================
# RATE-DISTORTION OBJECTIVE
# =============================================================================

def rd_loss(x, x_hat, latent_bits, hyper_bits, lam: float, pixel_count: int) -> RdLoss:
    """R + lambda * 255^2 * MSE with both rate terms in bits per pixel."""
    if pixel_count <= 0:
        raise ValueError(f"pixel_count must be positive, got {pixel_count}")
    x, x_hat = T._lift(x), T._lift(x_hat)
    latent_bits, hyper_bits = T._lift(latent_bits), T._lift(hyper_bits)
    diff = x - x_hat
    mse = (diff * diff).mean()
    bpp_y = latent_bits * (1.0 / pixel_count)
    bpp_z = hyper_bits * (1.0 / pixel_count)
    total = bpp_y + bpp_z + mse * (lam * DISTORTION_SCALE)
    return RdLoss(bpp_y=bpp_y, bpp_z=bpp_z, mse=mse, lam=lam, total=total)
