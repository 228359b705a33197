"""Photometric loss with sparsity regularisers, its adjoint, and PSNR/SSIM."""
from __future__ import annotations

import logging
import math
from dataclasses import dataclass

import numpy as np
from scipy.ndimage import convolve1d

logger = logging.getLogger(__name__)

SSIM_WINDOW = 11
SSIM_SIGMA = 1.5
SSIM_C1 = 0.01 ** 2
SSIM_C2 = 0.03 ** 2


@dataclass(frozen=True)
class LossConfig:
    lambda_l1: float = 0.8
    lambda_opacity: float = 0.05
    lambda_scale: float = 0.02
    lambda_color: float = 1e-3
    tau: float = 0.05
    sh_decay: float = 0.2
    reduction: str = "mean"

    def __post_init__(self):
        for name in ("lambda_opacity", "lambda_scale", "lambda_color", "sh_decay"):
            if getattr(self, name) < 0:
                raise ValueError(f"{name} must be >= 0")
        if not 0.0 <= self.lambda_l1 <= 1.0:
            raise ValueError("lambda_l1 must lie in [0, 1]")
        if not 0.0 < self.tau < 1.0:
            raise ValueError("tau must lie in (0, 1)")
        if self.reduction not in ("mean", "sum"):
            raise ValueError("reduction must be 'mean' or 'sum'")

    @property
    def sh_weights(self) -> np.ndarray:
        """Per-basis weight: zero for the constant term, decay^l for degree l."""
        return np.array([0.0, self.sh_decay, self.sh_decay, self.sh_decay])

    def to_dict(self) -> dict:
        return {
            "lambda_l1": self.lambda_l1,
            "lambda_opacity": self.lambda_opacity,
            "lambda_scale": self.lambda_scale,
            "lambda_color": self.lambda_color,
            "tau": self.tau,
            "sh_decay": self.sh_decay,
            "reduction": self.reduction,
        }


def _window():
    x = np.arange(SSIM_WINDOW) - SSIM_WINDOW // 2
    w = np.exp(-x ** 2 / (2.0 * SSIM_SIGMA ** 2))
    return w / w.sum()


def _blur(image):
    w = _window()
    out = convolve1d(image, w, axis=0, mode="constant")
    return convolve1d(out, w, axis=1, mode="constant")


def _ssim_terms(x, y):
    mx, my = _blur(x), _blur(y)
    qxx, qyy, qxy = _blur(x * x), _blur(y * y), _blur(x * y)
    a1 = 2.0 * mx * my + SSIM_C1
    a2 = 2.0 * (qxy - mx * my) + SSIM_C2
    b1 = mx * mx + my * my + SSIM_C1
    b2 = (qxx - mx * mx) + (qyy - my * my) + SSIM_C2
    return mx, my, a1, a2, b1, b2


def ssim(x, y) -> float:
    """Mean SSIM with an 11x11 Gaussian window (sigma 1.5) per channel."""
    x, y = _check_pair(x, y)
    _, _, a1, a2, b1, b2 = _ssim_terms(x, y)
    return float(np.mean(a1 * a2 / (b1 * b2)))


def ssim_and_grad(x, y):
    """Mean SSIM and its gradient with respect to ``x``."""
    x, y = _check_pair(x, y)
    mx, my, a1, a2, b1, b2 = _ssim_terms(x, y)
    s = a1 * a2 / (b1 * b2)
    g = 1.0 / s.size
    d_mx = g * s * (2.0 * my / a1 - 2.0 * my / a2 - 2.0 * mx / b1 + 2.0 * mx / b2)
    d_qxy = g * 2.0 * s / a2
    d_qxx = -g * s / b2
    grad = _blur(d_mx) + 2.0 * x * _blur(d_qxx) + y * _blur(d_qxy)
    return float(np.mean(s)), grad


def psnr(x, y) -> float:
    x, y = _check_pair(x, y)
    mse = float(np.mean((x - y) ** 2))
    if mse == 0.0:
        return math.inf
    return -10.0 * math.log10(mse)


def metrics_psnr_ssim(image, target) -> dict:
    return {"psnr": psnr(image, target), "ssim": ssim(image, target)}


def _check_pair(x, y):
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    if x.shape != y.shape:
        raise ValueError(f"image shapes differ: {x.shape} vs {y.shape}")
    return x, y


@dataclass
class LossResult:
    value: float
    image_loss: float
    dl_dimage: np.ndarray
    d_opacity: np.ndarray  # (P,)
    d_scale: np.ndarray  # (P,)
    d_sh: np.ndarray  # (P, 4, 3)
    regularizer: np.ndarray  # (P,) each primitive's share of the regulariser


def loss_and_adjoint(image, target, opacities, scales, sh_coeffs, config: LossConfig = LossConfig()) -> LossResult:
    """L1 + D-SSIM on the image plus opacity, scale and colour sparsity terms.

    ``opacities``, ``scales`` and ``sh_coeffs`` describe the primitives inside
    the view frustum; ``scales`` are activated (pre-contraction) scales.
    """
    image, target = _check_pair(image, target)
    diff = image - target
    l1 = float(np.mean(np.abs(diff)))
    s, d_ssim = ssim_and_grad(image, target)
    image_loss = config.lambda_l1 * l1 + (1.0 - config.lambda_l1) * (1.0 - s)
    dl_dimage = config.lambda_l1 * np.sign(diff) / diff.size - (1.0 - config.lambda_l1) * d_ssim

    opacities = np.asarray(opacities, dtype=np.float64).reshape(-1)
    count = len(opacities)
    scales = np.asarray(scales, dtype=np.float64).reshape(count)
    sh_coeffs = np.asarray(sh_coeffs, dtype=np.float64).reshape(count, 4, 3)
    norm = 1.0 / count if (config.reduction == "mean" and count) else 1.0
    above = opacities > config.tau
    weights = config.sh_weights[None, :, None]
    per_primitive = norm * (
        config.lambda_opacity * np.abs(opacities) * above
        + config.lambda_scale * np.abs(scales)
        + config.lambda_color * np.sum(np.abs(weights * sh_coeffs), axis=(1, 2))
    )
    return LossResult(
        value=image_loss + float(per_primitive.sum()),
        image_loss=image_loss,
        dl_dimage=dl_dimage,
        d_opacity=norm * config.lambda_opacity * np.sign(opacities) * above,
        d_scale=norm * config.lambda_scale * np.sign(scales),
        d_sh=norm * config.lambda_color * weights * np.sign(sh_coeffs),
        regularizer=per_primitive,
    )
