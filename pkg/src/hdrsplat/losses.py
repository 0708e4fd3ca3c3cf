"""Training objective: L1 / D-SSIM reconstruction plus a mean-normalised exposure term.

Images are ``(H, W, 3)`` tensors. SSIM uses an 11x11 Gaussian window
(sigma 1.5) with reflective border padding and the usual constants for
values in ``[0, 1]``.
"""

from __future__ import annotations

from dataclasses import dataclass

import torch
import torch.nn.functional as F

WINDOW = 11
SIGMA = 1.5
C1 = 0.01 ** 2
C2 = 0.03 ** 2
MIN_MEAN = 1e-6


@dataclass(frozen=True)
class LossWeights:
    ssim_weight: float = 0.2
    exposure_weight: float = 0.25
    per_channel_norm: bool = False

    def __post_init__(self):
        for name in ("ssim_weight", "exposure_weight"):
            if not 0.0 <= getattr(self, name) <= 1.0:
                raise ValueError(f"{name} must lie in [0, 1]")


class SkipCounter:
    """Counts exposure-loss evaluations skipped for near-black images."""

    def __init__(self):
        self.count = 0


skipped = SkipCounter()


def gaussian_kernel(size: int = WINDOW, sigma: float = SIGMA) -> torch.Tensor:
    x = torch.arange(size, dtype=torch.float64) - (size - 1) / 2
    g = torch.exp(-x * x / (2 * sigma * sigma))
    return g / g.sum()


def gaussian_window(size: int = WINDOW, sigma: float = SIGMA) -> torch.Tensor:
    g = gaussian_kernel(size, sigma)
    return g[:, None] * g[None, :]


def _filter(img: torch.Tensor, kernel: torch.Tensor) -> torch.Tensor:
    """Separable window average of ``(C, H, W)`` planes with reflect padding."""
    pad = kernel.shape[0] // 2
    c = img.shape[0]
    x = F.pad(img[None], (pad, pad, pad, pad), mode="reflect")
    x = F.conv2d(x, kernel.view(1, 1, 1, -1).expand(c, 1, 1, -1), groups=c)
    x = F.conv2d(x, kernel.view(1, 1, -1, 1).expand(c, 1, -1, 1), groups=c)
    return x[0]


def ssim_map(a: torch.Tensor, b: torch.Tensor) -> torch.Tensor:
    kernel = gaussian_kernel().to(a.dtype)
    x = a.permute(2, 0, 1)
    y = b.permute(2, 0, 1)
    stats = _filter(torch.cat([x, y, x * x, y * y, x * y]), kernel)
    mx, my, xx, yy, xy = stats.split(x.shape[0])
    sxx = xx - mx * mx
    syy = yy - my * my
    sxy = xy - mx * my
    num = (2 * mx * my + C1) * (2 * sxy + C2)
    den = (mx * mx + my * my + C1) * (sxx + syy + C2)
    return num / den


def ssim(a: torch.Tensor, b: torch.Tensor) -> torch.Tensor:
    return ssim_map(a, b).mean()


def l1(a: torch.Tensor, b: torch.Tensor) -> torch.Tensor:
    return (a - b).abs().mean()


def d_ssim(a: torch.Tensor, b: torch.Tensor) -> torch.Tensor:
    return (1.0 - ssim(a, b)) / 2.0


def reconstruction_loss(rendered, target, w: LossWeights = LossWeights()) -> torch.Tensor:
    return (1.0 - w.ssim_weight) * l1(rendered, target) + w.ssim_weight * d_ssim(rendered, target)


def mean_normalize(img: torch.Tensor, per_channel: bool = False) -> torch.Tensor:
    mean = img.mean(dim=(0, 1), keepdim=True) if per_channel else img.mean()
    return img / mean


def exposure_loss(rendered, target, per_channel: bool = False) -> torch.Tensor:
    """L1 + D-SSIM between images each divided by their own mean."""
    means = (rendered.detach().mean(), target.detach().mean())
    if min(float(m) for m in means) <= MIN_MEAN:
        skipped.count += 1
        return rendered.sum() * 0.0
    r = mean_normalize(rendered, per_channel)
    t = mean_normalize(target, per_channel)
    return l1(r, t) + d_ssim(r, t)


def total_loss(rendered, target, w: LossWeights = LossWeights()) -> torch.Tensor:
    loss = reconstruction_loss(rendered, target, w)
    if w.exposure_weight > 0:
        loss = loss + w.exposure_weight * exposure_loss(rendered, target, w.per_channel_norm)
    return loss


def loss_terms(rendered, target, w: LossWeights = LossWeights()) -> dict[str, torch.Tensor]:
    """Individual terms and their weighted total."""
    a = l1(rendered, target)
    b = d_ssim(rendered, target)
    rec = (1.0 - w.ssim_weight) * a + w.ssim_weight * b
    exp = exposure_loss(rendered, target, w.per_channel_norm)
    return {"l1": a, "d_ssim": b, "rec": rec, "exp": exp, "total": rec + w.exposure_weight * exp}
