"""Reference saliency methods: GradCAM-lite and uniform random maps."""
from __future__ import annotations

import torch
import torch.nn.functional as F

from ..errors import ConfigurationError
from ..feature_tap import TargetModel


def gradcam_lite(model: TargetModel, images: torch.Tensor, classes=None, layer: str | None = None) -> torch.Tensor:
    """Grad-CAM on the last conv stage, min-max normalised and upsampled to the image.

    Accepts one image ``[3, S, S]`` or a batch; returns ``[S, S]`` or ``[B, S, S]``.
    """
    if model.architecture != "cnn":
        raise ConfigurationError("gradcam_lite supports CNN targets only")
    single = images.dim() == 3
    x = images.unsqueeze(0) if single else images
    if classes is None:
        classes = model(x).argmax(1)
    _, feats, grads = model.gradient_map(x, classes, layer=layer or model.net.stage_names[-1])
    weights = grads.mean(dim=(2, 3), keepdim=True)
    cam = F.relu((weights * feats).sum(dim=1))
    lo = cam.flatten(1).min(dim=1).values.view(-1, 1, 1)
    hi = cam.flatten(1).max(dim=1).values.view(-1, 1, 1)
    span = hi - lo
    cam = torch.where(span > 0, (cam - lo) / span.clamp(min=1e-12), torch.zeros_like(cam))
    side = x.shape[-1]
    cam = F.interpolate(cam.unsqueeze(1), size=(side, side), mode="bilinear", align_corners=False)
    cam = cam.squeeze(1).clamp(0.0, 1.0)
    return cam[0] if single else cam


def random_saliency(n: int, side: int, seed: int = 0) -> torch.Tensor:
    gen = torch.Generator().manual_seed(seed)
    return torch.rand((n, side, side), generator=gen)
