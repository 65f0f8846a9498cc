"""Network definitions for the two fusion generators and the discriminator.

Both generators are encoder-decoder nets built from stride-2, kernel-5
convolutional blocks with skip connections and a convolutional LSTM at the
bottleneck.  DeblurRNN runs a denoising net and a deblurring net in
sequence, handing the recurrent state from one bottleneck to the other;
DeblurMerger encodes the two inputs with separate encoders and fuses their
bottlenecks.  Spectral normalization is applied to every convolution and
to the discriminator's final affine layer.

All forwards take NCHW float tensors with values in [0, 1].
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass
from typing import NamedTuple, Optional

import torch
import torch.nn.functional as F
from torch import nn

SN_EPS = 1e-12


@dataclass
class NetConfig:
    """Architecture hyperparameters shared by generators and discriminator."""

    encoder_depth: int = 6
    base_channels: int = 64
    channel_schedule: tuple[int, ...] = ()
    kernel_size: int = 5
    stride: int = 2
    leaky_slope: float = 0.2
    dropout_rate: float = 0.5
    dropout_layers: int = 3
    lstm_channels: int = 0
    use_spectral_norm: bool = True

    def __post_init__(self):
        if self.encoder_depth < 1:
            raise ValueError("encoder_depth must be at least 1")
        if not self.channel_schedule:
            self.channel_schedule = tuple(
                min(self.base_channels * 2**i, self.base_channels * 8)
                for i in range(self.encoder_depth)
            )
        if len(self.channel_schedule) != self.encoder_depth:
            raise ValueError(
                f"channel_schedule length {len(self.channel_schedule)} != "
                f"encoder_depth {self.encoder_depth}"
            )
        if not self.lstm_channels:
            self.lstm_channels = self.channel_schedule[-1]
        if self.kernel_size != 5 or self.stride != 2:
            warnings.warn(
                f"kernel_size={self.kernel_size}, stride={self.stride} is "
                "non-canonical (expected 5 and 2)",
                stacklevel=2,
            )

    @property
    def size_divisor(self) -> int:
        return self.stride**self.encoder_depth


class RecurrentState(NamedTuple):
    hidden: torch.Tensor
    cell: torch.Tensor


def l2_normalize(v: torch.Tensor, eps: float = SN_EPS) -> torch.Tensor:
    return v / (v.norm() + eps)


def spectral_normalize(
    weight: torch.Tensor, u: torch.Tensor, update_u: bool = True
) -> tuple[torch.Tensor, torch.Tensor]:
    """Divide a weight by its largest singular value, estimated by one
    power-iteration step.

    The weight is flattened to (output channels) x (rest).  u is the
    persistent left singular vector estimate; its update never enters the
    gradient graph.  Returns (weight / sigma, new u).
    """
    w = weight.reshape(weight.shape[0], -1)
    with torch.no_grad():
        v = l2_normalize(w.t().mv(u))
        if update_u:
            u = l2_normalize(w.mv(v))
    sigma = torch.clamp(u.dot(w.mv(v)), min=SN_EPS)
    return (weight / sigma, u)


class SNConv2d(nn.Module):
    """Plain or transposed convolution with optional spectral normalization.

    In training mode each forward advances the power iteration once; in
    inference mode the stored u estimate is used unchanged.
    """

    def __init__(self, in_ch, out_ch, kernel_size, stride=1, padding=0,
                 output_padding=0, transposed=False, spectral=True):
        super().__init__()
        self.transposed = transposed
        self.spectral = spectral
        self.stride = stride
        self.padding = padding
        self.output_padding = output_padding
        if transposed:
            weight = torch.empty(in_ch, out_ch, kernel_size, kernel_size)
        else:
            weight = torch.empty(out_ch, in_ch, kernel_size, kernel_size)
        nn.init.kaiming_uniform_(weight, a=0.2)
        self.weight = nn.Parameter(weight)
        self.bias = nn.Parameter(torch.zeros(out_ch))
        if spectral:
            self.register_buffer("sn_u", l2_normalize(torch.ones(out_ch)))

    def effective_weight(self) -> torch.Tensor:
        if not self.spectral:
            return self.weight
        # transposed conv stores weight as (in, out, kh, kw); normalize with
        # output channels leading either way
        w = self.weight.transpose(0, 1) if self.transposed else self.weight
        w_norm, u_new = spectral_normalize(w, self.sn_u, update_u=self.training)
        if self.training:
            self.sn_u.copy_(u_new)
        return w_norm.transpose(0, 1) if self.transposed else w_norm

    def forward(self, x):
        w = self.effective_weight()
        if self.transposed:
            return F.conv_transpose2d(
                x, w, self.bias, stride=self.stride, padding=self.padding,
                output_padding=self.output_padding,
            )
        return F.conv2d(x, w, self.bias, stride=self.stride, padding=self.padding)


class SNLinear(nn.Module):
    def __init__(self, in_features, out_features, spectral=True):
        super().__init__()
        self.spectral = spectral
        self.weight = nn.Parameter(torch.empty(out_features, in_features))
        nn.init.kaiming_uniform_(self.weight, a=0.2)
        self.bias = nn.Parameter(torch.zeros(out_features))
        if spectral:
            self.register_buffer("sn_u", l2_normalize(torch.ones(out_features)))

    def forward(self, x):
        w = self.weight
        if self.spectral:
            w, u_new = spectral_normalize(w, self.sn_u, update_u=self.training)
            if self.training:
                self.sn_u.copy_(u_new)
        return F.linear(x, w, self.bias)


class ConvBlock(nn.Module):
    """One stride-2 block: (spectral) conv or transposed conv, batch norm
    (skipped on the first layer of a net), LeakyReLU, optional dropout."""

    def __init__(self, in_ch, out_ch, config: NetConfig, mode: str,
                 normalize: bool = True, dropout: bool = False):
        super().__init__()
        if mode not in ("encode", "decode"):
            raise ValueError(f"mode must be 'encode' or 'decode', got {mode!r}")
        self.mode = mode
        k, s = config.kernel_size, config.stride
        pad = (k - 1) // 2
        self.conv = SNConv2d(
            in_ch, out_ch, k, stride=s, padding=pad,
            # chosen so decode exactly inverts the encode size change
            output_padding=s - k + 2 * pad if mode == "decode" else 0,
            transposed=(mode == "decode"),
            spectral=config.use_spectral_norm,
        )
        self.norm = nn.BatchNorm2d(out_ch, momentum=0.01) if normalize else None
        self.leaky_slope = config.leaky_slope
        self.dropout_rate = config.dropout_rate if dropout else 0.0

    def forward(self, x):
        if self.mode == "encode":
            h, w = x.shape[-2:]
            if h % self.conv.stride or w % self.conv.stride:
                raise ValueError(
                    f"spatial size {h}x{w} not divisible by stride {self.conv.stride}"
                )
        x = self.conv(x)
        if self.norm is not None:
            x = self.norm(x)
        x = F.leaky_relu(x, self.leaky_slope)
        if self.dropout_rate > 0:
            x = F.dropout(x, self.dropout_rate, training=self.training)
        return x


class Encoder(nn.Module):
    """Chain of encode blocks; returns the bottleneck and all intermediate
    activations for skip connections."""

    def __init__(self, in_ch: int, config: NetConfig):
        super().__init__()
        chans = [in_ch, *config.channel_schedule]
        self.blocks = nn.ModuleList(
            ConvBlock(chans[i], chans[i + 1], config, "encode", normalize=(i > 0))
            for i in range(config.encoder_depth)
        )

    def forward(self, x) -> tuple[torch.Tensor, list[torch.Tensor]]:
        skips = []
        for block in self.blocks:
            x = block(x)
            skips.append(x)
        return x, skips


class Decoder(nn.Module):
    """Mirror of the encoder; each block's output is concatenated with the
    same-resolution encoder skip.  The final block maps to 3 channels and
    squashes onto [0, 1] with a sigmoid."""

    def __init__(self, config: NetConfig, in_ch: int, out_ch: int = 3):
        super().__init__()
        depth = config.encoder_depth
        sched = config.channel_schedule
        blocks = []
        prev = in_ch
        for i in range(depth - 1):
            target = sched[depth - 2 - i]
            blocks.append(
                ConvBlock(prev, target, config, "decode",
                          dropout=(i < config.dropout_layers))
            )
            prev = 2 * target  # block output concatenated with its skip
        self.blocks = nn.ModuleList(blocks)
        k, s = config.kernel_size, config.stride
        pad = (k - 1) // 2
        self.final = SNConv2d(
            prev, out_ch, k, stride=s, padding=pad, output_padding=s - k + 2 * pad,
            transposed=True, spectral=config.use_spectral_norm,
        )

    def forward(self, x, skips: list[torch.Tensor]):
        depth = len(skips)
        for i, block in enumerate(self.blocks):
            x = block(x)
            skip = skips[depth - 2 - i]
            if skip.shape[-2:] != x.shape[-2:] or skip.shape[0] != x.shape[0]:
                raise ValueError(
                    f"skip {depth - 2 - i} has shape {tuple(skip.shape)}, "
                    f"decoder produced {tuple(x.shape)}"
                )
            x = torch.cat([x, skip], dim=1)
        return torch.sigmoid(self.final(x))


class ConvLSTMCell(nn.Module):
    """Convolutional LSTM with 3x3 gate convolutions.

    One call is one step: (features, state) -> (new hidden, new state).
    """

    def __init__(self, in_ch: int, hidden_ch: int, kernel_size: int = 3):
        super().__init__()
        self.hidden_ch = hidden_ch
        self.gates = nn.Conv2d(
            in_ch + hidden_ch, 4 * hidden_ch, kernel_size,
            padding=kernel_size // 2,
        )
        nn.init.zeros_(self.gates.bias)

    def initial_state(self, features: torch.Tensor) -> RecurrentState:
        n, _, h, w = features.shape
        zeros = features.new_zeros(n, self.hidden_ch, h, w)
        return RecurrentState(hidden=zeros, cell=zeros.clone())

    def forward(self, features, state: Optional[RecurrentState] = None):
        if state is None:
            state = self.initial_state(features)
        if state.hidden.shape != state.cell.shape:
            raise ValueError("hidden and cell state shapes differ")
        if state.hidden.shape[-2:] != features.shape[-2:]:
            raise ValueError(
                f"state spatial size {tuple(state.hidden.shape[-2:])} does not "
                f"match features {tuple(features.shape[-2:])}"
            )
        stacked = self.gates(torch.cat([features, state.hidden], dim=1))
        i, f, g, o = torch.chunk(stacked, 4, dim=1)
        cell = torch.sigmoid(f) * state.cell + torch.sigmoid(i) * torch.tanh(g)
        hidden = torch.sigmoid(o) * torch.tanh(cell)
        return hidden, RecurrentState(hidden=hidden, cell=cell)


class FusionUNet(nn.Module):
    """Encoder, ConvLSTM bottleneck, skip-connected decoder."""

    def __init__(self, in_ch: int, config: NetConfig):
        super().__init__()
        self.encoder = Encoder(in_ch, config)
        self.lstm = ConvLSTMCell(config.channel_schedule[-1], config.lstm_channels)
        self.decoder = Decoder(config, config.lstm_channels)

    def forward(self, x, state: Optional[RecurrentState] = None):
        bottleneck, skips = self.encoder(x)
        hidden, new_state = self.lstm(bottleneck, state)
        return self.decoder(hidden, skips), new_state


class DeblurRNN(nn.Module):
    """Sequential fusion: denoise the noisy input, then deblur the denoised
    image concatenated with the blurry input.  The recurrent state flows
    from the denoising bottleneck into the deblurring bottleneck."""

    def __init__(self, config: NetConfig):
        super().__init__()
        self.config = config
        self.denoise = FusionUNet(3, config)
        self.deblur = FusionUNet(6, config)

    def forward(self, noisy, blurry, carry_state: bool = True):
        if noisy.shape != blurry.shape:
            raise ValueError(
                f"shape mismatch: {tuple(noisy.shape)} vs {tuple(blurry.shape)}"
            )
        denoised, state = self.denoise(noisy)
        if not carry_state:
            state = None
        sharp, _ = self.deblur(torch.cat([denoised, blurry], dim=1), state)
        return denoised, sharp


class DeblurMerger(nn.Module):
    """Parallel fusion: separate encoders for the two inputs, bottlenecks
    concatenated and reduced by a 1x1 convolution, one decoder fed with the
    blurry branch's skips."""

    def __init__(self, config: NetConfig):
        super().__init__()
        self.config = config
        self.encoder_noisy = Encoder(3, config)
        self.encoder_blurry = Encoder(3, config)
        bottleneck_ch = config.channel_schedule[-1]
        self.merge = SNConv2d(
            2 * bottleneck_ch, config.lstm_channels, kernel_size=1,
            spectral=config.use_spectral_norm,
        )
        self.decoder = Decoder(config, config.lstm_channels)

    def forward(self, noisy, blurry):
        if noisy.shape != blurry.shape:
            raise ValueError(
                f"shape mismatch: {tuple(noisy.shape)} vs {tuple(blurry.shape)}"
            )
        b_noisy, _ = self.encoder_noisy(noisy)
        b_blurry, skips = self.encoder_blurry(blurry)
        merged = self.merge(torch.cat([b_noisy, b_blurry], dim=1))
        return self.decoder(merged, skips)


class Discriminator(nn.Module):
    """Conditional discriminator: candidate and conditioning image are
    concatenated and classified real/fake through spectrally normalized
    conv blocks, a final affine layer, and a sigmoid."""

    def __init__(self, config: NetConfig, input_size: int, depth: int = 5):
        super().__init__()
        bc = config.base_channels
        schedule = [min(bc * 2**i, bc * 8) for i in range(depth)]
        # stop before the spatial size becomes indivisible or collapses to a
        # single value per channel (batch norm needs at least 2x2)
        size = input_size
        chans = [6]
        for c in schedule:
            if size % config.stride or size // config.stride < 2:
                break
            size //= config.stride
            chans.append(c)
        self.blocks = nn.ModuleList(
            ConvBlock(chans[i], chans[i + 1], config, "encode", normalize=(i > 0))
            for i in range(len(chans) - 1)
        )
        self.input_size = input_size
        self.fc = SNLinear(chans[-1] * size * size, 1, spectral=config.use_spectral_norm)

    def forward(self, candidate, condition):
        if candidate.shape != condition.shape:
            raise ValueError(
                f"shape mismatch: {tuple(candidate.shape)} vs {tuple(condition.shape)}"
            )
        if candidate.shape[-1] != self.input_size or candidate.shape[-2] != self.input_size:
            raise ValueError(
                f"discriminator built for {self.input_size}x{self.input_size} "
                f"inputs, got {tuple(candidate.shape[-2:])}"
            )
        x = torch.cat([candidate, condition], dim=1)
        for block in self.blocks:
            x = block(x)
        logits = self.fc(x.flatten(start_dim=1))
        return torch.sigmoid(logits).squeeze(1)


def build_generator(model: str, config: NetConfig) -> nn.Module:
    if model == "rnn":
        return DeblurRNN(config)
    if model == "merger":
        return DeblurMerger(config)
    raise ValueError(f"unknown model {model!r}, expected 'rnn' or 'merger'")


def generator_output(model: nn.Module, noisy, blurry) -> torch.Tensor:
    """The fused sharp estimate, regardless of generator flavor."""
    out = model(noisy, blurry)
    return out[1] if isinstance(out, tuple) else out
