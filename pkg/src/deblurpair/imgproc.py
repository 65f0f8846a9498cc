"""Image math shared by losses, data synthesis, and evaluation.

Images are H x W x C float arrays (C in {1, 3}) with values in [0, 1].
Functions accept numpy arrays or torch tensors and return the same kind;
the torch path keeps gradients so the same operators can sit inside loss
functions.  The *_nchw variants work on batched N x C x H x W tensors and
are the differentiable core used by the losses module.
"""

from __future__ import annotations

import math
from typing import NamedTuple

import numpy as np
import torch
import torch.nn.functional as F
from PIL import Image as PILImage


class GradientPair(NamedTuple):
    horizontal: "np.ndarray | torch.Tensor"
    vertical: "np.ndarray | torch.Tensor"


# Standard 3x3 Sobel kernel, applied as cross-correlation: positive response
# on intensity increasing left-to-right.
_SOBEL_H = [[-1.0, 0.0, 1.0], [-2.0, 0.0, 2.0], [-1.0, 0.0, 1.0]]

# default dark-channel neighborhood, sized for full-resolution images
DEFAULT_DC_PATCH = 35


def _to_nchw(image):
    """HWC (or HW) array -> (1,C,H,W) float tensor plus a converter back."""
    was_numpy = isinstance(image, np.ndarray)
    t = torch.as_tensor(image)
    if t.ndim == 2:
        t = t.unsqueeze(-1)
    if t.ndim != 3:
        raise ValueError(f"expected HxW or HxWxC image, got shape {tuple(t.shape)}")
    if not t.is_floating_point():
        t = t.double()
    nchw = t.permute(2, 0, 1).unsqueeze(0)
    return nchw, was_numpy


def _from_nchw(x, was_numpy, squeeze_channel=False):
    out = x.squeeze(0).permute(1, 2, 0)
    if squeeze_channel:
        out = out.squeeze(-1)
    if was_numpy:
        return out.detach().numpy()
    return out


def dark_channel_nchw(x: torch.Tensor, patch: int) -> torch.Tensor:
    """Min over channels then over a patch x patch window, (N,C,H,W) -> (N,1,H,W).

    Windows are clipped at the borders: the minimum runs over valid pixels
    only.  Realized as a min-pooling so gradients flow to the minimal
    element of each window (first in scan order on ties).
    """
    if patch < 1 or patch % 2 == 0:
        raise ValueError(f"patch size must be odd and positive, got {patch}")
    chan_min = x.min(dim=1, keepdim=True).values
    # max_pool2d pads with -inf, so -maxpool(-x) is a min over valid pixels.
    return -F.max_pool2d(-chan_min, kernel_size=patch, stride=1, padding=patch // 2)


def dark_channel(image, patch: int):
    """Dark channel map of an H x W x C image: H x W array."""
    x, was_numpy = _to_nchw(image)
    if x.shape[1] not in (1, 3):
        raise ValueError(f"image must have 1 or 3 channels, got {x.shape[1]}")
    out = dark_channel_nchw(x, patch)
    return _from_nchw(out, was_numpy, squeeze_channel=True)


def sobel_nchw(x: torch.Tensor) -> tuple[torch.Tensor, torch.Tensor]:
    """Per-channel Sobel responses with zero padding, same-size output."""
    if x.shape[-2] < 3 or x.shape[-1] < 3:
        raise ValueError(f"image must be at least 3x3, got {tuple(x.shape[-2:])}")
    c = x.shape[1]
    kh = torch.tensor(_SOBEL_H, dtype=x.dtype, device=x.device)
    kv = kh.t()
    weight_h = kh.expand(c, 1, 3, 3)
    weight_v = kv.expand(c, 1, 3, 3)
    gh = F.conv2d(x, weight_h, padding=1, groups=c)
    gv = F.conv2d(x, weight_v, padding=1, groups=c)
    return gh, gv


def sobel_gradients(image) -> GradientPair:
    """Horizontal and vertical Sobel gradient maps, same shape as the input."""
    x, was_numpy = _to_nchw(image)
    gh, gv = sobel_nchw(x)
    return GradientPair(
        horizontal=_from_nchw(gh, was_numpy),
        vertical=_from_nchw(gv, was_numpy),
    )


def psnr(a, b) -> float:
    """Peak signal-to-noise ratio in dB with peak value 1; inf when a == b."""
    ta = torch.as_tensor(a, dtype=torch.float64)
    tb = torch.as_tensor(b, dtype=torch.float64)
    if ta.shape != tb.shape:
        raise ValueError(f"shape mismatch: {tuple(ta.shape)} vs {tuple(tb.shape)}")
    mse = torch.mean((ta - tb) ** 2).item()
    if mse == 0.0:
        return math.inf
    return 10.0 * math.log10(1.0 / mse)


def _gaussian_window(size: int, sigma: float, dtype) -> torch.Tensor:
    coords = torch.arange(size, dtype=dtype) - (size - 1) / 2.0
    g = torch.exp(-(coords**2) / (2.0 * sigma**2))
    g = g / g.sum()
    return torch.outer(g, g)


def ssim(a, b, window_size: int = 11, sigma: float = 1.5) -> float:
    """Mean structural similarity over valid window positions and channels.

    Gaussian window, C1 = 0.01^2 and C2 = 0.03^2 on the [0, 1] range.
    """
    xa, _ = _to_nchw(a)
    xb, _ = _to_nchw(b)
    if xa.shape != xb.shape:
        raise ValueError(f"shape mismatch: {tuple(xa.shape)} vs {tuple(xb.shape)}")
    if xa.shape[-2] < window_size or xa.shape[-1] < window_size:
        raise ValueError(
            f"image smaller than the {window_size}x{window_size} window: "
            f"{tuple(xa.shape[-2:])}"
        )
    xa = xa.double()
    xb = xb.double()
    c = xa.shape[1]
    w = _gaussian_window(window_size, sigma, xa.dtype).expand(c, 1, window_size, window_size)
    c1, c2 = 0.01**2, 0.03**2

    mu_a = F.conv2d(xa, w, groups=c)
    mu_b = F.conv2d(xb, w, groups=c)
    var_a = F.conv2d(xa * xa, w, groups=c) - mu_a**2
    var_b = F.conv2d(xb * xb, w, groups=c) - mu_b**2
    cov = F.conv2d(xa * xb, w, groups=c) - mu_a * mu_b

    num = (2 * mu_a * mu_b + c1) * (2 * cov + c2)
    den = (mu_a**2 + mu_b**2 + c1) * (var_a + var_b + c2)
    return (num / den).mean().item()


def scale_exposure(image, factor: float):
    """Pointwise multiply by a positive factor, then clamp to [0, 1]."""
    if factor <= 0:
        raise ValueError(f"scale factor must be positive, got {factor}")
    if isinstance(image, np.ndarray):
        return np.clip(image * factor, 0.0, 1.0)
    return torch.clamp(image * factor, 0.0, 1.0)


def load_png(path) -> np.ndarray:
    """Read an 8-bit PNG as an H x W x C float64 array in [0, 1]."""
    with PILImage.open(path) as im:
        arr = np.asarray(im.convert("RGB") if im.mode not in ("L", "RGB") else im)
    if arr.ndim == 2:
        arr = arr[:, :, None]
    return arr.astype(np.float64) / 255.0


def save_png(path, image: np.ndarray) -> None:
    """Write an image as 8-bit PNG; values are clamped then rounded half-up."""
    arr = np.clip(np.asarray(image, dtype=np.float64), 0.0, 1.0)
    quantized = np.floor(arr * 255.0 + 0.5).astype(np.uint8)
    if quantized.ndim == 3 and quantized.shape[2] == 1:
        quantized = quantized[:, :, 0]
    PILImage.fromarray(quantized).save(path, format="PNG")
