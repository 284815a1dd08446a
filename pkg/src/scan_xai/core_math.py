"""Closed-form pieces of the SCAN objective.

Everything here is a pure tensor function: the confidence activation, the
area target and its penalty, the blurred reconstruction target, and the
confidence / reconstruction / total losses. Functions accept either a single
sample (``[C, H, W]``) or a batch (``[B, C, H, W]``); batched losses are
computed per sample and averaged over the batch.
"""
from __future__ import annotations

import math
from dataclasses import dataclass

import torch
import torch.nn.functional as F

from .errors import DomainError

CLAMP_EPS = 1e-6
DEFAULT_LAMBDA = 0.1
CONF_VARIANTS = ("sine", "sigmoid")


@dataclass(frozen=True)
class SelfConfidenceMap:
    values: torch.Tensor  # [H, W] or [B, H, W], in [0, 1]
    mean: torch.Tensor    # scalar or [B]


@dataclass(frozen=True)
class ReconTarget:
    image: torch.Tensor   # [3, H, W] or [B, 3, H, W]
    kernel_size: int
    sigma: float


@dataclass(frozen=True)
class LossTerms:
    conf_loss: torch.Tensor
    recon_loss: torch.Tensor
    total: torch.Tensor
    omega: torch.Tensor
    area_target: float
    c_mean: torch.Tensor


def _check_finite(x: torch.Tensor, name: str) -> None:
    if not bool(torch.isfinite(x).all()):
        raise DomainError(f"{name} contains non-finite values")


def stretching_sine(y_c: torch.Tensor) -> torch.Tensor:
    """Elementwise ``(sign(y) sin(2 pi |y| / (8 + 0.15 |y|)) + 1) / 2``.

    ``sign(y) * sin(g(|y|))`` equals ``sin(sign(y) * g(|y|))`` because sine is
    odd, and the latter is smooth through the origin, so autograd returns the
    true derivative ``pi / 8`` at ``y = 0`` instead of a zero subgradient.
    """
    arg = 2.0 * math.pi * y_c / (8.0 + 0.15 * y_c.abs())
    return (torch.sin(arg) + 1.0) / 2.0


def confidence_activation(y_c: torch.Tensor, variant: str = "sine") -> SelfConfidenceMap:
    """Map the raw confidence channel to a self-confidence map in [0, 1].

    ``y_c`` is ``[H, W]`` or ``[B, H, W]``. The ``sigmoid`` variant exists only
    for the component ablation.
    """
    _check_finite(y_c, "confidence pre-activation")
    if variant == "sine":
        values = stretching_sine(y_c)
    elif variant == "sigmoid":
        values = torch.sigmoid(y_c)
    else:
        raise DomainError(f"unknown confidence variant {variant!r}; expected one of {CONF_VARIANTS}")
    mean = values.mean(dim=(-2, -1))
    return SelfConfidenceMap(values=values, mean=mean)


def area_target(alpha: float) -> float:
    if not alpha > 0:
        raise DomainError(f"alpha must be > 0, got {alpha}")
    return 1.0 / (1.0 + alpha)


def area_penalty(c_mean: torch.Tensor | float, target: float) -> torch.Tensor:
    """omega = (c - A)^2 / (c (1 - c)), with c clamped to [eps, 1 - eps]."""
    c = c_mean if torch.is_tensor(c_mean) else torch.tensor(float(c_mean), dtype=torch.float64)
    c = c.clamp(CLAMP_EPS, 1.0 - CLAMP_EPS)
    return (c - target) ** 2 / (c * (1.0 - c))


def blur_params(image_side: int, feature_side: int) -> tuple[int, float]:
    """Kernel size and sigma for the reconstruction-target blur."""
    if feature_side < 1 or image_side < feature_side:
        raise DomainError(f"need image_side >= feature_side >= 1, got {image_side}, {feature_side}")
    k = 2 * (image_side // feature_side) + 1
    sigma = image_side / (2.0 * feature_side)
    return k, sigma


def gaussian_kernel1d(kernel_size: int, sigma: float, dtype=None) -> torch.Tensor:
    half = kernel_size // 2
    x = torch.arange(-half, half + 1, dtype=torch.float64)
    w = torch.exp(-(x**2) / (2.0 * sigma**2))
    w = w / w.sum()
    return w.to(dtype or torch.get_default_dtype())


def gaussian_blur(image: torch.Tensor, kernel_size: int, sigma: float) -> torch.Tensor:
    """Separable Gaussian blur with reflect padding, channel by channel."""
    squeeze = image.dim() == 3
    x = image.unsqueeze(0) if squeeze else image
    b, c, h, w = x.shape
    half = kernel_size // 2
    # reflect padding needs pad < side; only hit when feature_side == 1
    mode = "reflect" if half < min(h, w) else "replicate"
    k1 = gaussian_kernel1d(kernel_size, sigma, dtype=x.dtype).to(x.device)
    x = F.pad(x, (half, half, half, half), mode=mode)
    x = x.reshape(b * c, 1, h + 2 * half, w + 2 * half)
    x = F.conv2d(x, k1.view(1, 1, 1, -1))
    x = F.conv2d(x, k1.view(1, 1, -1, 1))
    x = x.reshape(b, c, h, w)
    return x.squeeze(0) if squeeze else x


def blur_target(image: torch.Tensor, feature_side: int) -> ReconTarget:
    """Blur ``image`` so it only carries detail recoverable from an ``s_f`` grid."""
    side = image.shape[-1]
    k, sigma = blur_params(side, feature_side)
    blurred = gaussian_blur(image, k, sigma).clamp(0.0, 1.0)
    return ReconTarget(image=blurred, kernel_size=k, sigma=sigma)


def identity_target(image: torch.Tensor) -> ReconTarget:
    """Unblurred target, used by the ``no_blur`` ablation."""
    return ReconTarget(image=image, kernel_size=1, sigma=0.0)


def _as_batch(x: torch.Tensor, dims: int) -> torch.Tensor:
    return x.unsqueeze(0) if x.dim() == dims else x


def _target_image(target: ReconTarget | torch.Tensor) -> torch.Tensor:
    return target.image if isinstance(target, ReconTarget) else target


def confidence_loss(
    recon: torch.Tensor,
    target: ReconTarget | torch.Tensor,
    c_mean: torch.Tensor | float,
    alpha: float,
    lam: float = DEFAULT_LAMBDA,
) -> torch.Tensor:
    """(1 + omega) (mse + lambda) - lambda, averaged over the batch.

    The squared norm is taken as the mean over all ``3 * H * W`` elements.
    """
    tgt = _target_image(target)
    if recon.shape != tgt.shape:
        raise DomainError(f"shape mismatch: recon {tuple(recon.shape)} vs target {tuple(tgt.shape)}")
    if lam < 0:
        raise DomainError(f"lambda must be >= 0, got {lam}")
    r = _as_batch(recon, 3)
    t = _as_batch(tgt, 3)
    mse = ((t - r) ** 2).mean(dim=(1, 2, 3))
    omega = area_penalty(torch.as_tensor(c_mean, dtype=r.dtype).reshape(-1), area_target(alpha))
    return ((1.0 + omega) * (mse + lam) - lam).mean()


def reconstruction_loss(
    recon: torch.Tensor,
    target: ReconTarget | torch.Tensor,
    conf: SelfConfidenceMap | torch.Tensor,
    alpha: float,
) -> torch.Tensor:
    """Confidence-weighted MSE: each squared error scaled by ``alpha*C + (1 - C)``.

    The single confidence value at a pixel weights all three colour channels.
    """
    tgt = _target_image(target)
    c = conf.values if isinstance(conf, SelfConfidenceMap) else conf
    if recon.shape != tgt.shape or recon.shape[-2:] != c.shape[-2:]:
        raise DomainError(
            f"shape mismatch: recon {tuple(recon.shape)}, target {tuple(tgt.shape)}, conf {tuple(c.shape)}"
        )
    r = _as_batch(recon, 3)
    t = _as_batch(tgt, 3)
    c = _as_batch(c, 2).unsqueeze(1)
    weight = alpha * c + (1.0 - c)
    return (weight * (t - r) ** 2).mean()


def split_output(decoder_out: torch.Tensor) -> tuple[torch.Tensor, torch.Tensor]:
    """Split a 4-channel decoder output into (reconstruction, confidence pre-activation)."""
    if decoder_out.shape[-3] != 4:
        raise DomainError(f"decoder output must have 4 channels, got shape {tuple(decoder_out.shape)}")
    return decoder_out[..., :3, :, :], decoder_out[..., 3, :, :]


def total_loss(
    decoder_out: torch.Tensor,
    target: ReconTarget | torch.Tensor,
    alpha: float,
    lam: float = DEFAULT_LAMBDA,
    conf_variant: str = "sine",
) -> LossTerms:
    recon, y_c = split_output(decoder_out)
    tgt = _target_image(target)
    if recon.shape != tgt.shape:
        raise DomainError(f"shape mismatch: decoder {tuple(decoder_out.shape)} vs target {tuple(tgt.shape)}")
    conf = confidence_activation(y_c, conf_variant)
    a_c = area_target(alpha)
    c_mean = conf.mean.reshape(-1)
    loss_c = confidence_loss(recon, tgt, c_mean, alpha, lam)
    loss_r = reconstruction_loss(recon, tgt, conf, alpha)
    omega = area_penalty(c_mean, a_c).mean()
    return LossTerms(
        conf_loss=loss_c,
        recon_loss=loss_r,
        total=loss_c + loss_r,
        omega=omega,
        area_target=a_c,
        c_mean=c_mean.mean(),
    )
