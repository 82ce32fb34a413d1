"""Coarse-to-fine training of the two generator/discriminator pyramids."""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable

import torch

from . import checkpoint
from .config import TrainConfig
from .errors import ConfigError, ContractError, TrainingDivergence
from .imaging import ImagePyramid, build_pyramid, check_image, image_size, resample
from .losses import (
    LossReport,
    l1,
    total_loss,
    tv,
    wgan_gp_discriminator_objective,
    wgan_gp_generator_objective,
)
from .networks import ScaleModule, init_scale_module, scale_seed

log = logging.getLogger(__name__)

DIRECTIONS = ("ab", "ba")


@dataclass
class ChainLevel:
    """All images produced at one scale of a pyramid forward pass."""

    real_a: torch.Tensor
    real_b: torch.Tensor
    ab: torch.Tensor
    ba: torch.Tensor
    aba: torch.Tensor
    bab: torch.Tensor
    aa: torch.Tensor
    bb: torch.Tensor
    mask_ab: torch.Tensor | None = None
    mask_ba: torch.Tensor | None = None

    def detached(self) -> "ChainLevel":
        def d(t):
            return None if t is None else t.detach()

        return ChainLevel(*(d(getattr(self, f)) for f in self.__dataclass_fields__))


@dataclass
class ChainOutputs:
    levels: dict[int, ChainLevel] = field(default_factory=dict)

    @property
    def finest(self) -> int:
        return min(self.levels)

    def __getitem__(self, n: int) -> ChainLevel:
        return self.levels[n]


@dataclass
class TuiGANModel:
    scales: list[ScaleModule]
    config: TrainConfig
    history: dict[int, list[LossReport]] = field(default_factory=dict)

    def scale(self, n: int) -> ScaleModule:
        for module in self.scales:
            if module.scale_index == n:
                return module
        raise ContractError(f"scale {n} is not initialized")

    @property
    def complete(self) -> bool:
        have = {m.scale_index for m in self.scales if m.frozen}
        return have == set(range(self.config.N + 1))


def lr_at(iteration: int, cfg: TrainConfig) -> float:
    return cfg.lr_initial * cfg.lr_decay_factor ** (iteration // cfg.lr_decay_interval)


def _up(img: torch.Tensor, like: torch.Tensor) -> torch.Tensor:
    return resample(img, *image_size(like))


def forward_scale(
    module: ScaleModule, a: torch.Tensor, b: torch.Tensor, prev: ChainLevel | None
) -> ChainLevel:
    """One scale of translation, cycle and identity chains.

    ``prev`` is the coarser scale's level (None at the coarsest scale); its
    entries are bicubically upsampled to this scale before conditioning.
    """
    g_ab, g_ba = module.g_ab, module.g_ba
    if prev is None:
        ab, mask_ab = g_ab(a)
        ba, mask_ba = g_ba(b)
        aba, _ = g_ba(ab)
        bab, _ = g_ab(ba)
        aa, _ = g_ba(a)
        bb, _ = g_ab(b)
    else:
        ab, mask_ab = g_ab(a, _up(prev.ab, a))
        ba, mask_ba = g_ba(b, _up(prev.ba, b))
        aba, _ = g_ba(ab, _up(prev.aba, a))
        bab, _ = g_ab(ba, _up(prev.bab, b))
        aa, _ = g_ba(a, _up(prev.aa, a))
        bb, _ = g_ab(b, _up(prev.bb, b))
    return ChainLevel(a, b, ab, ba, aba, bab, aa, bb, mask_ab, mask_ba)


def pyramid_forward(
    model: TuiGANModel,
    pyr_a: ImagePyramid,
    pyr_b: ImagePyramid,
    down_to: int = 0,
    start: ChainOutputs | None = None,
) -> ChainOutputs:
    """Run scales N..down_to; ``start`` may supply already computed coarser levels."""
    N = model.config.N
    if pyr_a.N != N or pyr_b.N != N:
        raise ConfigError(f"pyramids have {pyr_a.N}/{pyr_b.N} scales, model expects {N}")
    if not 0 <= down_to <= N:
        raise ContractError(f"down_to={down_to} outside 0..{N}")
    chain = ChainOutputs(dict(start.levels) if start is not None else {})
    prev = None
    for n in range(N, down_to - 1, -1):
        if n in chain.levels:
            prev = chain.levels[n]
            continue
        level = forward_scale(model.scale(n), pyr_a[n], pyr_b[n], prev)
        chain.levels[n] = level
        prev = level
    return chain


def translate_pyramid(model: TuiGANModel, pyr: ImagePyramid, direction: str) -> torch.Tensor:
    if direction not in DIRECTIONS:
        raise ValueError(f"direction must be one of {DIRECTIONS}, got {direction!r}")
    out = None
    with torch.no_grad():
        for n in range(model.config.N, -1, -1):
            module = model.scale(n)
            g = module.g_ab if direction == "ab" else module.g_ba
            src = pyr[n]
            out, _ = g(src) if out is None else g(src, _up(out, src))
    return out


def translate(model: TuiGANModel, img: torch.Tensor, direction: str = "ab") -> torch.Tensor:
    """Translate ``img`` with the full pyramid: direction ``"ab"`` uses G_AB, ``"ba"`` uses G_BA."""
    check_image(img)
    if not model.complete:
        raise ContractError("model is not fully trained")
    cfg = model.config
    pyr = build_pyramid(img, cfg.N, cfg.s, cfg.min_size)
    return translate_pyramid(model, pyr, direction)


def _report(level: ChainLevel, d_a, d_b, cfg: TrainConfig, d_obj: float):
    w = cfg.weights
    adv_ab = wgan_gp_generator_objective(d_b, level.ab)
    adv_ba = wgan_gp_generator_objective(d_a, level.ba)
    cyc_a, cyc_b = l1(level.real_a, level.aba), l1(level.real_b, level.bab)
    idt_a, idt_b = l1(level.real_a, level.aa), l1(level.real_b, level.bb)
    tv_ab, tv_ba = tv(level.ab, reduction=cfg.tv_reduction), tv(level.ba, reduction=cfg.tv_reduction)
    adv = adv_ab + adv_ba
    cyc = cyc_a + cyc_b
    idt = idt_a + idt_b
    tv_sum = tv_ab + tv_ba
    total = total_loss(adv, cyc, idt, tv_sum, w)
    parts = dict(
        adv_ab=adv_ab, adv_ba=adv_ba, cyc_a=cyc_a, cyc_b=cyc_b,
        idt_a=idt_a, idt_b=idt_b, tv_ab=tv_ab, tv_ba=tv_ba,
    )
    report = LossReport(
        adv=adv.item(), cyc=cyc.item(), idt=idt.item(), tv=tv_sum.item(), total=total.item(), d_obj=d_obj,
        per_direction={k: v.item() for k, v in parts.items()},
    )
    return total, report


def train_scale(
    n: int,
    model: TuiGANModel,
    pyr_a: ImagePyramid,
    pyr_b: ImagePyramid,
    cfg: TrainConfig | None = None,
    module: ScaleModule | None = None,
    on_report: Callable[[int, LossReport], None] | None = None,
) -> ScaleModule:
    """Train scale ``n`` with every coarser scale frozen, then freeze it.

    Each iteration takes ``d_steps`` critic ascent steps on both D_A and D_B,
    then ``g_steps`` descent steps on the summed generator objective of both
    directions.
    """
    cfg = cfg or model.config
    for m in model.scales:
        if m.scale_index > n and not m.frozen:
            raise ContractError(f"scale {m.scale_index} must be frozen before training scale {n}")
    if module is None:
        module = init_scale_module(n, cfg.seed, cfg)
    if n < cfg.N:
        with torch.no_grad():
            coarse = pyramid_forward(model, pyr_a, pyr_b, down_to=n + 1)
        prev = coarse.levels[n + 1]
    else:
        prev = None
    a, b = pyr_a[n], pyr_b[n]
    w = cfg.weights

    opt_d = torch.optim.Adam(module.discriminator_parameters(), lr=cfg.lr_initial, betas=cfg.adam_betas)
    opt_g = torch.optim.Adam(module.generator_parameters(), lr=cfg.lr_initial, betas=cfg.adam_betas)
    alpha_gen = torch.Generator().manual_seed(scale_seed(cfg.seed, n) + 1)

    for it in range(cfg.iters_per_scale):
        lr = lr_at(it, cfg)
        for opt in (opt_d, opt_g):
            for group in opt.param_groups:
                group["lr"] = lr

        level = forward_scale(module, a, b, prev)
        d_obj = 0.0
        for _ in range(cfg.d_steps):
            obj_b = wgan_gp_discriminator_objective(module.d_b, b, level.ab, w.lambda_pen, generator=alpha_gen)
            obj_a = wgan_gp_discriminator_objective(module.d_a, a, level.ba, w.lambda_pen, generator=alpha_gen)
            obj = obj_a + obj_b
            d_obj = obj.item()
            if not math.isfinite(d_obj):
                raise TrainingDivergence(f"critic objective diverged at scale {n}, iteration {it}", n, it)
            opt_d.zero_grad(set_to_none=True)
            (-obj).backward()
            opt_d.step()

        for step in range(cfg.g_steps):
            if step > 0:
                level = forward_scale(module, a, b, prev)
            try:
                total, report = _report(level, module.d_a, module.d_b, cfg, d_obj)
            except TrainingDivergence as exc:
                raise TrainingDivergence(f"{exc} at scale {n}, iteration {it}", n, it) from exc
            opt_g.zero_grad(set_to_none=True)
            total.backward()
            opt_g.step()
            # D received gradients through the adversarial term; they are not used
            opt_d.zero_grad(set_to_none=True)
        if cfg.g_steps == 0:
            _, report = _report(level, module.d_a, module.d_b, cfg, d_obj)
        if not report.is_finite():
            raise TrainingDivergence(f"non-finite loss at scale {n}, iteration {it}", n, it)
        if on_report is not None:
            on_report(it, report)

    return module.freeze()


def train_all(
    img_a: torch.Tensor,
    img_b: torch.Tensor,
    cfg: TrainConfig,
    run_dir: str | Path | None = None,
    extra_manifest: dict[str, object] | None = None,
    on_report: Callable[[int, int, LossReport], None] | None = None,
) -> TuiGANModel:
    """Train scales N, N-1, ..., 0 in order.

    With ``run_dir``, the config manifest is written first, each finished
    scale is checkpointed, and scales already on disk are loaded instead of
    retrained (resume).
    """
    check_image(img_a, "img_a")
    check_image(img_b, "img_b")
    pyr_a = build_pyramid(img_a, cfg.N, cfg.s, cfg.min_size)
    pyr_b = build_pyramid(img_b, cfg.N, cfg.s, cfg.min_size)
    model = TuiGANModel(scales=[], config=cfg)

    log_file = None
    if run_dir is not None:
        run_dir = Path(run_dir)
        if (run_dir / checkpoint.CONFIG_FILE).exists():
            existing, _ = checkpoint.read_config(run_dir)
            if existing != cfg:
                raise ConfigError(f"{run_dir} holds a run with a different configuration")
        checkpoint.write_config(run_dir, cfg, extra_manifest)
        done = set(checkpoint.completed_scales(run_dir, cfg.N))
        log_path = run_dir / checkpoint.LOG_FILE
        kept = []
        if log_path.exists():
            for line in log_path.read_text().splitlines():
                if line.strip() and int(line.split()[1]) in done:
                    kept.append(line)
        log_path.write_text("".join(line + "\n" for line in kept))
        log_file = open(log_path, "a")
    else:
        done = set()

    try:
        for n in range(cfg.N, -1, -1):
            if n in done:
                log.info("scale %d: loaded from checkpoint", n)
                model.scales.append(checkpoint.load_scale(run_dir, n, cfg))
                continue
            history = model.history.setdefault(n, [])

            def record(it: int, report: LossReport, n=n, history=history) -> None:
                history.append(report)
                if log_file is not None:
                    log_file.write(report.to_log_line(it, n) + "\n")
                if on_report is not None:
                    on_report(n, it, report)

            log.info("scale %d: training %d iterations", n, cfg.iters_per_scale)
            module = train_scale(n, model, pyr_a, pyr_b, cfg, on_report=record)
            model.scales.append(module)
            if run_dir is not None:
                log_file.flush()
                checkpoint.save_scale(run_dir, module)
    finally:
        if log_file is not None:
            log_file.close()
    return model


def load_model(run_dir: str | Path) -> TuiGANModel:
    cfg, _ = checkpoint.read_config(run_dir)
    missing = checkpoint.missing_scales(run_dir, cfg.N)
    if missing:
        raise checkpoint.CheckpointError(
            f"{run_dir}: incomplete checkpoint, missing scales {missing}", missing_scales=missing
        )
    scales = [checkpoint.load_scale(run_dir, n, cfg) for n in range(cfg.N, -1, -1)]
    return TuiGANModel(scales=scales, config=cfg)
