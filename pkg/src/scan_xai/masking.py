"""Gradient-percentile masking of feature maps."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import torch

from .errors import DomainError

TRAIN_PERCENTILE_RANGE = (70.0, 100.0)


@dataclass
class MaskedFeature:
    values: torch.Tensor
    mask: torch.Tensor
    percentile: torch.Tensor | float


def _check_p(p: torch.Tensor) -> None:
    if bool(((p < 0) | (p > 100)).any()) or not bool(torch.isfinite(p).all()):
        raise DomainError(f"percentile must lie in [0, 100], got {p.tolist()}")


def percentile_threshold(g: torch.Tensor, p) -> torch.Tensor:
    """Linearly interpolated p-th percentile of the flattened values of ``g``, in float64.

    Matches ``numpy.percentile(..., method="linear")``. For a batch, pass
    ``g`` as ``[B, ...]`` together with a length-``B`` tensor ``p``; each row
    then gets its own threshold.
    """
    if g.numel() == 0:
        raise DomainError("gradient map is empty")
    p_t = torch.as_tensor(p, dtype=torch.float64)
    _check_p(p_t)
    batched = p_t.dim() == 1
    flat = g.reshape(g.shape[0], -1) if batched else g.reshape(1, -1)
    if batched and p_t.shape[0] != flat.shape[0]:
        raise DomainError(f"{p_t.shape[0]} percentiles for {flat.shape[0]} gradient maps")
    p_rows = p_t if batched else p_t.reshape(1)
    s, _ = torch.sort(flat.to(torch.float64), dim=1)
    n = s.shape[1]
    pos = p_rows / 100.0 * (n - 1)
    lo = pos.floor().long().clamp(0, n - 1)
    hi = (lo + 1).clamp(max=n - 1)
    frac = pos - lo.to(torch.float64)
    v_lo = s.gather(1, lo.view(-1, 1)).squeeze(1)
    v_hi = s.gather(1, hi.view(-1, 1)).squeeze(1)
    # exact order statistic when frac == 0 (avoids 0 * inf and keeps ties clean)
    theta = torch.where(frac == 0, v_lo, v_lo + frac * (v_hi - v_lo))
    return theta if batched else theta[0]


def gradient_mask(f: torch.Tensor, g: torch.Tensor, p, per_channel: bool = False) -> MaskedFeature:
    """Keep the features whose gradient is at or above the p-th percentile.

    ``f`` and ``g`` are ``[C, s, s]`` with scalar ``p``, or ``[B, C, s, s]``
    with scalar or per-sample ``p``. The percentile is taken over the whole
    gradient tensor of each sample unless ``per_channel`` is set.
    """
    if f.shape != g.shape:
        raise DomainError(f"feature shape {tuple(f.shape)} != gradient shape {tuple(g.shape)}")
    p_t = torch.as_tensor(p, dtype=torch.float64)
    _check_p(p_t)
    single = f.dim() == 3
    gb = g.unsqueeze(0) if single else g
    b = gb.shape[0]
    p_rows = p_t.expand(b) if p_t.dim() == 0 else p_t.reshape(-1)
    if per_channel:
        c = gb.shape[1]
        rows = gb.reshape(b * c, -1)
        theta = percentile_threshold(rows, p_rows.repeat_interleave(c)).view(b, c, 1, 1)
    else:
        theta = percentile_threshold(gb, p_rows).view(b, *([1] * (gb.dim() - 1)))
    # compare in float64 so the interpolated threshold is never rounded across a value
    mask = (gb.to(torch.float64) >= theta).to(f.dtype)
    if single:
        mask = mask[0]
    return MaskedFeature(values=f * mask, mask=mask, percentile=p)


def sample_training_percentile(rng: np.random.Generator, size: int | None = None,
                               bounds: tuple[float, float] = TRAIN_PERCENTILE_RANGE):
    """Draw the training-time mask percentile uniformly from ``bounds`` (default [70, 100])."""
    lo, hi = bounds
    if not 0 <= lo <= hi <= 100:
        raise DomainError(f"percentile bounds must satisfy 0 <= lo <= hi <= 100, got {bounds}")
    return rng.uniform(lo, hi, size=size)
