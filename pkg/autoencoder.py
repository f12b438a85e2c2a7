"""
Autoencoder Module
Convolutional analysis/synthesis transforms with GDN / IGDN nonlinearities.

    encoder: conv k5 s2 -> GDN -> conv k5 s2 -> GDN -> conv k5 s2 -> GDN -> conv k5 s2 (C)
    decoder: deconv k5 s2 -> IGDN -> deconv -> IGDN -> deconv -> IGDN -> deconv -> conv k3 (RGB)
"""
import logging

import numpy as np

import tensor as T
from layers import Conv2d, ConvTranspose2d, Module, Parameter

logger = logging.getLogger(__name__)

BETA_MIN = 1e-6
GAMMA_INIT = 0.1
GAMMA_PEDESTAL = 1e-6
DOWNSCALE = 16


class GdnParams(Module):
    """
    beta = beta_raw^2 + BETA_MIN and gamma = gamma_raw^2, so beta >= BETA_MIN and
    gamma >= 0 whatever the raw values.
    """

    def __init__(self, channels: int):
        self.channels = int(channels)
        self.beta_raw = Parameter(np.full(channels, np.sqrt(1.0 - BETA_MIN)))
        gamma = GAMMA_INIT * np.eye(channels) + GAMMA_PEDESTAL
        self.gamma_raw = Parameter(np.sqrt(gamma))

    @classmethod
    def from_values(cls, beta, gamma) -> "GdnParams":
        beta = np.atleast_1d(np.asarray(beta, dtype=np.float64))
        gamma = np.atleast_2d(np.asarray(gamma, dtype=np.float64))
        if np.any(beta < BETA_MIN) or np.any(gamma < 0):
            raise ValueError("GDN needs beta >= BETA_MIN and gamma >= 0")
        params = cls(len(beta))
        params.beta_raw.data = np.sqrt(beta - BETA_MIN)
        params.gamma_raw.data = np.sqrt(gamma)
        return params

    def beta(self):
        return self.beta_raw * self.beta_raw + BETA_MIN

    def gamma(self):
        return self.gamma_raw * self.gamma_raw


def gdn(x, params: GdnParams, inverse: bool = False):
    """
    y_i = x_i / sqrt(beta_i + sum_j gamma_ij x_j^2)  (inverse: multiply instead),
    applied independently at every spatial position of a (B, C, H, W) map.
    """
    x = T._lift(x)
    if x.ndim != 4 or x.shape[1] != params.channels:
        raise T.ShapeError("gdn", x.shape, (params.channels,))
    gamma = params.gamma().reshape(params.channels, params.channels, 1, 1)
    norm = T.sqrt(T.conv2d(x * x, gamma, params.beta()))
    return x * norm if inverse else x / norm


class Encoder(Module):
    def __init__(self, channels: int, latent_channels: int, rng: np.random.Generator):
        widths = [3, channels, channels, channels, latent_channels]
        self.convs = [Conv2d(widths[i], widths[i + 1], 5, rng, stride=2, padding=2)
                      for i in range(4)]
        self.gdns = [GdnParams(channels) for _ in range(3)]

    def forward(self, x):
        for i, conv in enumerate(self.convs):
            x = conv(x)
            if i < len(self.gdns):
                x = gdn(x, self.gdns[i])
        return x


class Decoder(Module):
    def __init__(self, channels: int, latent_channels: int, rng: np.random.Generator):
        widths = [latent_channels, channels, channels, channels, channels]
        self.deconvs = [ConvTranspose2d(widths[i], widths[i + 1], 5, rng, stride=2, padding=2,
                                        output_padding=1) for i in range(4)]
        self.igdns = [GdnParams(channels) for _ in range(3)]
        self.to_rgb = Conv2d(channels, 3, 3, rng, padding=1)

    def forward(self, y_hat):
        x = y_hat
        for i, deconv in enumerate(self.deconvs):
            x = deconv(x)
            if i < len(self.igdns):
                x = gdn(x, self.igdns[i], inverse=True)
        x = self.to_rgb(x)
        return x if self.training else T.clamp(x, 0.0, 1.0)


def encode_image(x, encoder: Encoder):
    """(B, 3, H, W) image in [0,1] -> (B, C, H/16, W/16) latents."""
    x = T._lift(x)
    if x.ndim != 4 or x.shape[1] != 3 or x.shape[2] % DOWNSCALE or x.shape[3] % DOWNSCALE:
        raise T.ShapeError("encode_image", x.shape, ("B", 3, f"H%{DOWNSCALE}", f"W%{DOWNSCALE}"))
    return encoder(x)


def decode_image(y_hat, decoder: Decoder):
    """(B, C, h, w) latents -> (B, 3, 16h, 16w) reconstruction, clamped to [0,1] at eval."""
    return decoder(T._lift(y_hat))


# =============================================================================
# PADDING
# =============================================================================

def pad_image(image: np.ndarray, multiple: int = DOWNSCALE) -> np.ndarray:
    """Reflect-pad a (3, H, W) image on the bottom/right to multiples of `multiple`."""
    _, height, width = image.shape
    pad_h = (-height) % multiple
    pad_w = (-width) % multiple
    if not pad_h and not pad_w:
        return image
    mode = "reflect" if height > 1 and width > 1 else "edge"
    return np.pad(image, ((0, 0), (0, pad_h), (0, pad_w)), mode=mode)


def crop_image(image: np.ndarray, height: int, width: int) -> np.ndarray:
    return image[..., :height, :width]
