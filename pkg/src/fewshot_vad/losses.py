"""Frame-prediction losses: L1, MS-SSIM, gradient difference, their weighted sum,
least-squares GAN losses and PSNR.

All image losses take tensors shaped ``(..., C, H, W)`` with values in
``[-1, 1]``. ``reduction="none"`` returns one value per leading index
(i.e. per frame), ``"mean"`` and ``"sum"`` reduce those.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import torch
import torch.nn.functional as F

from .errors import StructureError, ValidationError

MS_SSIM_WEIGHTS = (0.0448, 0.2856, 0.3001, 0.2363, 0.1333)
SSIM_K1, SSIM_K2 = 0.01, 0.03
PSNR_MSE_FLOOR = 1e-10
SSIM_FLOOR = 1e-6


@dataclass(frozen=True)
class LossWeights:
    lambda1: float = 1.0
    lambda2: float = 1.0
    lambda3: float = 1.0
    ssim_scales: int = 3
    ssim_window: int = 11
    ssim_sigma: float = 1.5

    def __post_init__(self):
        lams = (self.lambda1, self.lambda2, self.lambda3)
        if not all(math.isfinite(v) and v >= 0 for v in lams):
            raise ValidationError(f"loss weights must be finite and >= 0, got {lams}")
        if not any(v > 0 for v in lams):
            raise ValidationError("at least one loss weight must be > 0")
        if not 1 <= self.ssim_scales <= len(MS_SSIM_WEIGHTS):
            raise ValidationError(f"ssim_scales must be in [1, {len(MS_SSIM_WEIGHTS)}]")
        if self.ssim_window < 1 or self.ssim_window % 2 == 0:
            raise ValidationError("ssim_window must be a positive odd integer")


def _check_pair(pred, target, min_hw=1):
    if pred.shape != target.shape:
        raise StructureError(f"prediction shape {tuple(pred.shape)} != target shape {tuple(target.shape)}")
    if pred.dim() < 3:
        raise StructureError(f"expected (..., C, H, W) frames, got shape {tuple(pred.shape)}")
    if pred.shape[-1] < min_hw or pred.shape[-2] < min_hw:
        raise ValidationError(f"spatial size {tuple(pred.shape[-2:])} below minimum {min_hw}x{min_hw}")


def _reduce(per_frame: torch.Tensor, reduction: str):
    if reduction == "none":
        return per_frame
    if reduction == "mean":
        return per_frame.mean()
    if reduction == "sum":
        return per_frame.sum()
    raise ValueError(f"unknown reduction {reduction!r}")


def l1_loss(pred, target, reduction="mean"):
    _check_pair(pred, target)
    return _reduce((pred - target).abs().mean(dim=(-3, -2, -1)), reduction)


def _forward_diffs(x):
    """Forward differences along width and height, zero in the last column/row."""
    dx = F.pad(x[..., :, 1:] - x[..., :, :-1], (0, 1, 0, 0))
    dy = F.pad(x[..., 1:, :] - x[..., :-1, :], (0, 0, 0, 1))
    return dx, dy


def gdl_loss(pred, target, reduction="mean"):
    """Mean over pixels of ``||dx p| - |dx t|| + ||dy p| - |dy t||``."""
    _check_pair(pred, target, min_hw=2)
    pdx, pdy = _forward_diffs(pred)
    tdx, tdy = _forward_diffs(target)
    per_pixel = (pdx.abs() - tdx.abs()).abs() + (pdy.abs() - tdy.abs()).abs()
    return _reduce(per_pixel.mean(dim=(-3, -2, -1)), reduction)


def gaussian_window(size: int, sigma: float, dtype=torch.float64) -> torch.Tensor:
    coords = torch.arange(size, dtype=dtype) - (size - 1) / 2
    g = torch.exp(-coords ** 2 / (2 * sigma ** 2))
    return g / g.sum()


def _blur(x, g):
    # x: (N, C, H, W); separable valid-mode Gaussian filtering per channel
    C = x.shape[1]
    kh = g.reshape(1, 1, -1, 1).expand(C, 1, -1, 1)
    kw = g.reshape(1, 1, 1, -1).expand(C, 1, 1, -1)
    return F.conv2d(F.conv2d(x, kh, groups=C), kw, groups=C)


def _ssim_terms(x, y, g, c1, c2):
    mu_x, mu_y = _blur(x, g), _blur(y, g)
    sxx = _blur(x * x, g) - mu_x ** 2
    syy = _blur(y * y, g) - mu_y ** 2
    sxy = _blur(x * y, g) - mu_x * mu_y
    cs_map = (2 * sxy + c2) / (sxx + syy + c2)
    lum_map = (2 * mu_x * mu_y + c1) / (mu_x ** 2 + mu_y ** 2 + c1)
    return (lum_map * cs_map).mean(dim=(-2, -1)), cs_map.mean(dim=(-2, -1))


def ms_ssim(pred, target, scales=3, window=11, sigma=1.5):
    """Per-frame MS-SSIM on frames remapped from [-1, 1] to [0, 1] (peak 1).

    Per-scale factors are floored at a small positive value before the
    fractional powers, which keeps the result in ``(0, 1]``.
    """
    _check_pair(pred, target)
    need = window * 2 ** (scales - 1)
    if min(pred.shape[-2:]) < need:
        raise ValidationError(
            f"image size {tuple(pred.shape[-2:])} too small for MS-SSIM with {scales} scales and "
            f"window {window}: minimum is {need}x{need}")
    lead = pred.shape[:-3]
    C, H, W = pred.shape[-3:]
    x = ((pred.reshape(-1, C, H, W)) + 1) / 2
    y = ((target.reshape(-1, C, H, W)) + 1) / 2
    g = gaussian_window(window, sigma, dtype=x.dtype)
    w = torch.tensor(MS_SSIM_WEIGHTS[:scales], dtype=x.dtype)
    w = w / w.sum()
    c1, c2 = SSIM_K1 ** 2, SSIM_K2 ** 2
    value = torch.ones(x.shape[:2], dtype=x.dtype)
    for s in range(scales):
        ssim_s, cs_s = _ssim_terms(x, y, g, c1, c2)
        factor = ssim_s if s == scales - 1 else cs_s
        value = value * factor.clamp(min=SSIM_FLOOR) ** w[s]
        if s < scales - 1:
            x, y = F.avg_pool2d(x, 2), F.avg_pool2d(y, 2)
    return value.mean(dim=1).reshape(lead)


def ms_ssim_loss(pred, target, scales=3, window=11, sigma=1.5, reduction="mean"):
    """``1 - MS-SSIM``; zero for identical frames."""
    return _reduce(1 - ms_ssim(pred, target, scales, window, sigma), reduction)


def composite_loss(pred, target, weights: LossWeights = LossWeights(), reduction="mean"):
    total = 0
    if weights.lambda1:
        total = total + weights.lambda1 * l1_loss(pred, target, reduction="none")
    if weights.lambda2:
        total = total + weights.lambda2 * ms_ssim_loss(
            pred, target, weights.ssim_scales, weights.ssim_window, weights.ssim_sigma, reduction="none")
    if weights.lambda3:
        total = total + weights.lambda3 * gdl_loss(pred, target, reduction="none")
    return _reduce(total, reduction)


def adversarial_losses(disc_logits_real, disc_logits_fake):
    """Least-squares GAN losses ``(generator_loss, discriminator_loss)``."""
    for name, t in (("real", disc_logits_real), ("fake", disc_logits_fake)):
        if not torch.isfinite(t).all():
            raise ValidationError(f"non-finite discriminator logits ({name})")
    disc = 0.5 * ((disc_logits_real - 1) ** 2).mean() + 0.5 * (disc_logits_fake ** 2).mean()
    gen = 0.5 * ((disc_logits_fake - 1) ** 2).mean()
    return gen, disc


def psnr(pred, target):
    """Per-frame PSNR in dB with frames mapped to [0, 1]; capped at 100 dB."""
    _check_pair(pred, target)
    mse = (((pred - target) / 2) ** 2).mean(dim=(-3, -2, -1))
    return 10 * torch.log10(1.0 / mse.clamp(min=PSNR_MSE_FLOOR))


def mse(pred, target):
    """Per-frame mean squared error on the [0, 1] scale."""
    _check_pair(pred, target)
    return (((pred - target) / 2) ** 2).mean(dim=(-3, -2, -1))
