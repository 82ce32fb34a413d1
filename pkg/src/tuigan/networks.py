"""Scale-aware generator (Phi, Psi, mask blend) and the patch discriminator.

Every convolution is 3x3, stride 1, zero-padded by 1, so spatial size is
preserved. A stack of five such layers sees an 11x11 window, which is the
patch size shared by Phi and the discriminator.
"""

from __future__ import annotations

import contextlib
from typing import TYPE_CHECKING, Iterator

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from .errors import ShapeError

if TYPE_CHECKING:
    from .config import TrainConfig

PHI_LAYERS = 5
PSI_LAYERS = 4
DISC_LAYERS = 5
RECEPTIVE_FIELD = 1 + 2 * PHI_LAYERS  # 11
LEAKY_SLOPE = 0.2
INIT_STD = 0.02
MASK_CHANNELS = 3


class BatchStatNorm(nn.Module):
    """Batch normalization that always uses the statistics of the current input.

    Training runs on a single image pair, so running averages would just
    track one repeated batch; using live statistics keeps training and
    inference numerically identical.
    """

    def __init__(self, channels: int, eps: float = 1e-5):
        super().__init__()
        self.eps = eps
        self.weight = nn.Parameter(torch.ones(channels))
        self.bias = nn.Parameter(torch.zeros(channels))
        # Treat the statistics as constants w.r.t. the input. Only used to
        # probe the convolutional receptive field.
        self.detach_stats = False

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        if not self.detach_stats:
            return F.batch_norm(x, None, None, self.weight, self.bias, training=True, eps=self.eps)
        mean = x.mean(dim=(0, 2, 3)).detach()
        var = x.var(dim=(0, 2, 3), unbiased=False).detach()
        return F.batch_norm(x, mean, var, self.weight, self.bias, training=False, eps=self.eps)


class ConvBlock(nn.Sequential):
    def __init__(self, in_ch: int, out_ch: int):
        super().__init__(
            nn.Conv2d(in_ch, out_ch, kernel_size=3, stride=1, padding=1),
            BatchStatNorm(out_ch),
            nn.LeakyReLU(LEAKY_SLOPE),
        )


def conv_stack(in_ch: int, hidden: int, out_ch: int, n_layers: int) -> nn.Sequential:
    """``n_layers - 1`` Conv-Norm-LeakyReLU blocks followed by a bare output conv."""
    layers: list[nn.Module] = [ConvBlock(in_ch, hidden)]
    layers += [ConvBlock(hidden, hidden) for _ in range(n_layers - 2)]
    layers.append(nn.Conv2d(hidden, out_ch, kernel_size=3, stride=1, padding=1))
    return nn.Sequential(*layers)


class Phi(nn.Module):
    """Initial translation of the source image, squashed to [-1, 1]."""

    def __init__(self, channels: int = 32):
        super().__init__()
        self.body = conv_stack(3, channels, 3, PHI_LAYERS)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return torch.tanh(self.body(x))


class Psi(nn.Module):
    """Attention mask from (initial translation, source, upsampled coarser output)."""

    def __init__(self, channels: int = 32):
        super().__init__()
        self.body = conv_stack(9, channels, MASK_CHANNELS, PSI_LAYERS)

    def forward(self, phi_out: torch.Tensor, source: torch.Tensor, prev_up: torch.Tensor) -> torch.Tensor:
        return torch.sigmoid(self.body(torch.cat([phi_out, source, prev_up], dim=1)))


class Generator(nn.Module):
    def __init__(self, channels: int = 32, attention: bool = True):
        super().__init__()
        self.attention = attention
        self.phi = Phi(channels)
        self.psi = Psi(channels) if attention else None

    def forward(
        self,
        source: torch.Tensor,
        prev_up: torch.Tensor | None = None,
        mask: torch.Tensor | None = None,
    ) -> tuple[torch.Tensor, torch.Tensor | None]:
        """Translate ``source``; returns ``(output, mask)``.

        Without ``prev_up`` (coarsest scale) the output is Phi(source) and no
        mask is produced. Passing ``mask`` bypasses Psi with a fixed mask.
        """
        phi_out = self.phi(source)
        if prev_up is None:
            return phi_out, None
        if prev_up.shape != source.shape:
            raise ShapeError(
                f"prev_up {tuple(prev_up.shape)} does not match source {tuple(source.shape)}"
            )
        if not self.attention and mask is None:
            return (phi_out + prev_up).clamp(-1.0, 1.0), None
        if mask is None:
            mask = self.psi(phi_out, source, prev_up)
        out = mask * phi_out + (1.0 - mask) * prev_up
        return out.clamp(-1.0, 1.0), mask


class Discriminator(nn.Module):
    """Markovian patch critic: one unbounded score per 11x11 input window."""

    def __init__(self, channels: int = 32):
        super().__init__()
        self.body = conv_stack(3, channels, 1, DISC_LAYERS)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        if x.shape[-1] < RECEPTIVE_FIELD or x.shape[-2] < RECEPTIVE_FIELD:
            raise ShapeError(
                f"discriminator input {tuple(x.shape[-2:])} is smaller than the "
                f"{RECEPTIVE_FIELD}x{RECEPTIVE_FIELD} receptive field"
            )
        return self.body(x)


def generator_forward(
    g: Generator,
    source: torch.Tensor,
    prev_up: torch.Tensor | None = None,
    mask: torch.Tensor | None = None,
) -> tuple[torch.Tensor, torch.Tensor | None]:
    return g(source, prev_up, mask)


def discriminator_forward(d: Discriminator, img: torch.Tensor) -> torch.Tensor:
    return d(img)


class ScaleModule(nn.Module):
    """The two generators and two discriminators of one pyramid scale."""

    def __init__(self, scale_index: int, channels: int = 32, attention: bool = True):
        super().__init__()
        self.scale_index = scale_index
        self.g_ab = Generator(channels, attention)
        self.g_ba = Generator(channels, attention)
        self.d_a = Discriminator(channels)
        self.d_b = Discriminator(channels)
        self.frozen = False

    def freeze(self) -> "ScaleModule":
        for p in self.parameters():
            p.requires_grad_(False)
        self.frozen = True
        return self

    def generator_parameters(self) -> Iterator[nn.Parameter]:
        yield from self.g_ab.parameters()
        yield from self.g_ba.parameters()

    def discriminator_parameters(self) -> Iterator[nn.Parameter]:
        yield from self.d_a.parameters()
        yield from self.d_b.parameters()


def reset_parameters(module: nn.Module, generator: torch.Generator) -> None:
    """Conv weights ~ N(0, 0.02), norm scales ~ N(1, 0.02), all biases zero."""
    with torch.no_grad():
        for m in module.modules():
            if isinstance(m, nn.Conv2d):
                m.weight.normal_(0.0, INIT_STD, generator=generator)
                if m.bias is not None:
                    m.bias.zero_()
            elif isinstance(m, BatchStatNorm):
                m.weight.normal_(1.0, INIT_STD, generator=generator)
                m.bias.zero_()


def scale_seed(seed: int, n: int) -> int:
    return int(np.random.SeedSequence([seed, n]).generate_state(1)[0])


def init_scale_module(n: int, seed: int, cfg: "TrainConfig") -> ScaleModule:
    module = ScaleModule(n, channels=cfg.channels, attention=cfg.attention)
    reset_parameters(module, torch.Generator().manual_seed(scale_seed(seed, n)))
    return module


@contextlib.contextmanager
def detached_statistics(module: nn.Module):
    """Temporarily freeze normalization statistics so gradients follow only the convolutions."""
    norms = [m for m in module.modules() if isinstance(m, BatchStatNorm)]
    previous = [m.detach_stats for m in norms]
    for m in norms:
        m.detach_stats = True
    try:
        yield module
    finally:
        for m, prev in zip(norms, previous):
            m.detach_stats = prev


def receptive_field_support(
    net: nn.Module, size: int = 33, out_pos: tuple[int, int] | None = None, seed: int = 0
) -> tuple[int, int, int, int]:
    """Bounding box ``(top, left, height, width)`` of the input gradient of one output pixel."""
    gen = torch.Generator().manual_seed(seed)
    param = next(net.parameters())
    x = (torch.rand(1, 3, size, size, generator=gen, dtype=param.dtype) * 2 - 1).requires_grad_(True)
    oy, ox = out_pos if out_pos is not None else (size // 2, size // 2)
    with detached_statistics(net):
        out = net(x)
        out[0, :, oy, ox].sum().backward()
    support = (x.grad.abs().sum(dim=(0, 1)) > 0).nonzero()
    if support.numel() == 0:
        return (oy, ox, 0, 0)
    top, left = support.min(dim=0).values.tolist()
    bottom, right = support.max(dim=0).values.tolist()
    return (top, left, bottom - top + 1, right - left + 1)
