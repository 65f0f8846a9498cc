"""Training objectives for the fusion generators and the discriminator.

All image losses take NCHW tensors and reduce with means (RMS for the dark
channel term) so their magnitudes do not depend on resolution or batch
size.  Probabilities are clamped before logs to keep every term finite.
"""

from __future__ import annotations

from dataclasses import dataclass

import torch

from . import imgproc

PROB_EPS = 1e-7
DEFAULT_DC_PATCH = 35


@dataclass
class LossWeights:
    """Coefficients of the combined deblurring objective."""

    lambda_c1: float = 50.0
    lambda_c2: float = 50.0
    lambda_grad: float = 50.0
    lambda_dc: float = 250.0

    def __post_init__(self):
        for name in ("lambda_c1", "lambda_c2", "lambda_grad", "lambda_dc"):
            if getattr(self, name) < 0:
                raise ValueError(f"{name} must be nonnegative")


@dataclass
class LossBreakdown:
    adv: float
    content: float
    grad: float
    dark_channel: float
    total: torch.Tensor  # kept as a tensor so callers can backpropagate


def _clamp_prob(p) -> torch.Tensor:
    if not isinstance(p, torch.Tensor):
        p = torch.as_tensor(p, dtype=torch.float64)
    elif not p.is_floating_point():
        p = p.double()
    return torch.clamp(p, PROB_EPS, 1.0 - PROB_EPS)


def _check_same_shape(a: torch.Tensor, b: torch.Tensor):
    if a.shape != b.shape:
        raise ValueError(f"shape mismatch: {tuple(a.shape)} vs {tuple(b.shape)}")


def adversarial_loss_discriminator(d_real, d_fake) -> torch.Tensor:
    """-[log D(real) + log(1 - D(fake))], meaned over the batch."""
    d_real = _clamp_prob(d_real)
    d_fake = _clamp_prob(d_fake)
    return -(torch.log(d_real).mean() + torch.log(1.0 - d_fake).mean())


def adversarial_loss_generator(d_fake, non_saturating: bool = False) -> torch.Tensor:
    """Generator's adversarial term.

    The default minimizes log(1 - D(fake)), the literal second term of the
    min-max objective.  The non-saturating variant minimizes -log D(fake)
    instead, trading fidelity to the formula for stronger early gradients.
    """
    d_fake = _clamp_prob(d_fake)
    if non_saturating:
        return -torch.log(d_fake).mean()
    return torch.log(1.0 - d_fake).mean()


def content_loss(output: torch.Tensor, target: torch.Tensor) -> torch.Tensor:
    """Mean absolute difference over all pixels and channels."""
    _check_same_shape(output, target)
    return (output - target).abs().mean()


def gradient_loss(output: torch.Tensor, target: torch.Tensor) -> torch.Tensor:
    """L1 distance between Sobel responses, horizontal plus vertical."""
    _check_same_shape(output, target)
    gh_o, gv_o = imgproc.sobel_nchw(output)
    gh_t, gv_t = imgproc.sobel_nchw(target)
    return (gh_o - gh_t).abs().mean() + (gv_o - gv_t).abs().mean()


def dark_channel_loss(output: torch.Tensor, target: torch.Tensor,
                      patch: int = DEFAULT_DC_PATCH) -> torch.Tensor:
    """Root-mean-square distance between the two dark channel maps."""
    _check_same_shape(output, target)
    dc_o = imgproc.dark_channel_nchw(output, patch)
    dc_t = imgproc.dark_channel_nchw(target, patch)
    return torch.sqrt(((dc_t - dc_o) ** 2).mean())


def total_deblur_loss(d_fake, output, target, weights: LossWeights,
                      patch: int = DEFAULT_DC_PATCH,
                      non_saturating: bool = False) -> LossBreakdown:
    """Adversarial + weighted content, gradient and dark channel terms."""
    adv = adversarial_loss_generator(d_fake, non_saturating=non_saturating)
    content = content_loss(output, target)
    grad = gradient_loss(output, target)
    dc = dark_channel_loss(output, target, patch)
    total = (
        adv
        + weights.lambda_c2 * content
        + weights.lambda_grad * grad
        + weights.lambda_dc * dc
    )
    return LossBreakdown(
        adv=float(adv.detach()), content=float(content.detach()),
        grad=float(grad.detach()), dark_channel=float(dc.detach()), total=total,
    )


def denoise_loss(denoised: torch.Tensor, target: torch.Tensor,
                 lambda_c1: float = 50.0) -> torch.Tensor:
    """The denoising net trains on weighted content loss alone."""
    return lambda_c1 * content_loss(denoised, target)
