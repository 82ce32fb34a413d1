"""Adversarial (WGAN-GP), cycle, identity and total-variation losses."""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import torch

from .errors import ContractError, ShapeError, TrainingDivergence

TV_EPS = 1e-8


@dataclass(frozen=True)
class LossWeights:
    lambda_cyc: float = 1.0
    lambda_idt: float = 1.0
    lambda_tv: float = 0.1
    lambda_pen: float = 0.1

    def __post_init__(self):
        for name in ("lambda_cyc", "lambda_idt", "lambda_tv", "lambda_pen"):
            if getattr(self, name) < 0:
                raise ValueError(f"{name} must be >= 0, got {getattr(self, name)}")


@dataclass
class LossReport:
    """Scalar loss values of one training iteration at one scale."""

    adv: float
    cyc: float
    idt: float
    tv: float
    total: float
    d_obj: float = 0.0
    per_direction: dict[str, float] = field(default_factory=dict)

    def is_finite(self) -> bool:
        values = [self.adv, self.cyc, self.idt, self.tv, self.total, self.d_obj]
        values += list(self.per_direction.values())
        return all(math.isfinite(v) for v in values)

    def to_log_line(self, iteration: int, scale: int) -> str:
        return (
            f"{iteration} {scale} {self.adv:.8g} {self.cyc:.8g} {self.idt:.8g} "
            f"{self.tv:.8g} {self.total:.8g} {self.d_obj:.8g}"
        )

    @classmethod
    def from_log_line(cls, line: str) -> tuple[int, int, "LossReport"]:
        parts = line.split()
        if len(parts) != 8:
            raise ValueError(f"malformed loss record: {line!r}")
        it, scale = int(parts[0]), int(parts[1])
        adv, cyc, idt, tv, total, d_obj = (float(p) for p in parts[2:])
        return it, scale, cls(adv, cyc, idt, tv, total, d_obj)


def _same_shape(a: torch.Tensor, b: torch.Tensor, what: str) -> None:
    if a.shape != b.shape:
        raise ShapeError(f"{what}: shapes {tuple(a.shape)} and {tuple(b.shape)} differ")


def l1(a: torch.Tensor, b: torch.Tensor) -> torch.Tensor:
    """Mean absolute difference."""
    _same_shape(a, b, "l1")
    return (a - b).abs().mean()


def gradient_norm_penalty(d, real: torch.Tensor, fake: torch.Tensor, alpha) -> torch.Tensor:
    """``(||grad_x D(x)||_2 - 1)^2`` at ``x = alpha * real + (1 - alpha) * fake``.

    The norm runs over every pixel and channel jointly; the graph is kept so
    the penalty can be differentiated w.r.t. the critic's parameters.
    """
    interp = (alpha * real + (1.0 - alpha) * fake).detach().requires_grad_(True)
    scores = d(interp).mean()
    grad = None
    if scores.requires_grad:
        (grad,) = torch.autograd.grad(scores, interp, create_graph=True, allow_unused=True)
    if grad is None:
        # critic does not depend on its input at all
        grad = torch.zeros_like(interp)
    return (grad.flatten().norm(2) - 1.0) ** 2


def wgan_gp_discriminator_objective(
    d, real: torch.Tensor, fake: torch.Tensor, lambda_pen: float, alpha=None, generator: torch.Generator | None = None
) -> torch.Tensor:
    """Critic objective to be *maximized*: mean D(real) - mean D(fake) - lambda_pen * penalty.

    ``alpha`` is a single scalar mixing weight; drawn from U(0, 1) when omitted.
    """
    _same_shape(real, fake, "wgan_gp_discriminator_objective")
    fake = fake.detach()
    if alpha is None:
        alpha = torch.rand((), generator=generator, dtype=real.dtype).item()
    score_gap = d(real).mean() - d(fake).mean()
    return score_gap - lambda_pen * gradient_norm_penalty(d, real, fake, alpha)


def wgan_gp_generator_objective(d, fake: torch.Tensor) -> torch.Tensor:
    """Generator side of the adversarial term, to be minimized."""
    return -d(fake).mean()


def _chain_pair(chain, scale: int, first: tuple[str, str], second: tuple[str, str]):
    try:
        level = chain.levels[scale]
    except (AttributeError, KeyError, IndexError) as exc:
        raise ContractError(f"chain has no entries for scale {scale}") from exc
    tensors = []
    for name in (*first, *second):
        value = getattr(level, name, None)
        if value is None:
            raise ContractError(f"chain entry {name!r} missing at scale {scale}")
        tensors.append(value)
    return tensors


def cycle_loss(chain, scale: int) -> torch.Tensor:
    real_a, aba, real_b, bab = _chain_pair(chain, scale, ("real_a", "aba"), ("real_b", "bab"))
    return l1(real_a, aba) + l1(real_b, bab)


def identity_loss(chain, scale: int) -> torch.Tensor:
    real_a, aa, real_b, bb = _chain_pair(chain, scale, ("real_a", "aa"), ("real_b", "bb"))
    return l1(real_a, aa) + l1(real_b, bb)


def tv(x: torch.Tensor, eps: float = TV_EPS, reduction: str = "sum") -> torch.Tensor:
    """Total variation: sqrt(dx^2 + dy^2 + eps) per channel and pixel, last row/column excluded.

    ``reduction="sum"`` adds up all terms; ``"mean"`` divides by their count,
    which keeps the term on the same footing as the mean L1 losses at every
    resolution.
    """
    if x.shape[-1] < 2 or x.shape[-2] < 2:
        raise ShapeError(f"total variation needs at least 2x2 pixels, got {tuple(x.shape[-2:])}")
    base = x[..., :-1, :-1]
    dx = x[..., :-1, 1:] - base
    dy = x[..., 1:, :-1] - base
    terms = torch.sqrt(dx * dx + dy * dy + eps)
    if reduction == "sum":
        return terms.sum()
    if reduction == "mean":
        return terms.mean()
    raise ValueError(f"reduction must be 'sum' or 'mean', got {reduction!r}")


def tv_loss(img_ab: torch.Tensor, img_ba: torch.Tensor, eps: float = TV_EPS, reduction: str = "sum") -> torch.Tensor:
    return tv(img_ab, eps, reduction) + tv(img_ba, eps, reduction)


def _as_float(value) -> float:
    return value.detach().item() if isinstance(value, torch.Tensor) else float(value)


def total_loss(adv, cyc, idt, tv_value, w: LossWeights):
    """``adv + lambda_cyc * cyc + lambda_idt * idt + lambda_tv * tv``.

    Works on floats or tensors (tensors keep their graph). Raises
    :class:`TrainingDivergence` if any component is NaN or infinite.
    """
    for name, value in (("adv", adv), ("cyc", cyc), ("idt", idt), ("tv", tv_value)):
        if not math.isfinite(_as_float(value)):
            raise TrainingDivergence(f"loss component {name} is not finite")
    return adv + w.lambda_cyc * cyc + w.lambda_idt * idt + w.lambda_tv * tv_value
