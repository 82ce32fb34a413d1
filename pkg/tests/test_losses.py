import math

import pytest
import torch
import torch.nn as nn
from hypothesis import given, settings
from hypothesis import strategies as st

from tuigan.errors import ContractError, ShapeError, TrainingDivergence
from tuigan.losses import (
    TV_EPS,
    LossReport,
    LossWeights,
    cycle_loss,
    gradient_norm_penalty,
    identity_loss,
    total_loss,
    tv,
    tv_loss,
    wgan_gp_discriminator_objective,
    wgan_gp_generator_objective,
)
from tuigan.networks import Discriminator, reset_parameters
from tuigan.trainer import ChainLevel, ChainOutputs

from conftest import random_image


class MeanCritic(nn.Module):
    """D(x) = mean of x; its input gradient is 1/numel everywhere."""

    def forward(self, x):
        return x.mean().reshape(1, 1, 1, 1)


class UnitGradCritic(nn.Module):
    def __init__(self, shape):
        super().__init__()
        v = torch.randn(shape, generator=torch.Generator().manual_seed(0), dtype=torch.float64)
        self.v = v / v.norm()

    def forward(self, x):
        return (x * self.v).sum().reshape(1, 1, 1, 1)


def zero_critic():
    d = Discriminator(channels=4)
    with torch.no_grad():
        for p in d.parameters():
            p.zero_()
    return d


def tv_oracle(x: torch.Tensor, eps: float = TV_EPS) -> float:
    """Brute-force loop over every channel and pixel that has a right and lower neighbour."""
    total = 0.0
    c, h, w = x.shape[-3:]
    flat = x.reshape(-1, h, w).tolist()
    for ch in flat:
        for i in range(h - 1):
            for j in range(w - 1):
                dx = ch[i][j + 1] - ch[i][j]
                dy = ch[i + 1][j] - ch[i][j]
                total += math.sqrt(dx * dx + dy * dy + eps)
    return total


def central_difference(fn, tensor: torch.Tensor, index: tuple, h: float = 1e-4) -> float:
    # fn runs with grad enabled: the penalty itself differentiates its critic
    data = tensor.data
    orig = data[index].item()
    data[index] = orig + h
    up = fn().item()
    data[index] = orig - h
    down = fn().item()
    data[index] = orig
    return (up - down) / (2 * h)


def relative_error(a: float, b: float, floor: float = 1e-6) -> float:
    return abs(a - b) / max(abs(a), abs(b), floor)


def random_coords(shape, k, seed):
    gen = torch.Generator().manual_seed(seed)
    return [tuple(int(torch.randint(0, s, (1,), generator=gen)) for s in shape) for _ in range(k)]


# --- WGAN-GP ---------------------------------------------------------------


def test_zero_critic_objective_is_minus_lambda():
    real = random_image(16, 16, 1, dtype=torch.float64)
    fake = random_image(16, 16, 2, dtype=torch.float64)
    obj = wgan_gp_discriminator_objective(zero_critic().double(), real, fake, lambda_pen=0.1, alpha=0.3)
    assert obj.item() == pytest.approx(-0.1, abs=1e-12)
    # a critic with no dependence on its input at all
    obj = wgan_gp_discriminator_objective(
        lambda x: torch.zeros(1, 1, 1, 1, dtype=x.dtype), real, fake, 0.1, alpha=0.5
    )
    assert obj.item() == pytest.approx(-0.1, abs=1e-12)


def test_linear_critic_penalty_closed_form():
    real = random_image(16, 16, 1, dtype=torch.float64)
    fake = random_image(16, 16, 2, dtype=torch.float64)
    numel = real.numel()
    grad_norm = math.sqrt(numel * (1.0 / numel) ** 2)  # = 1/sqrt(numel)
    lam = 0.1
    expected_penalty = lam * (grad_norm - 1.0) ** 2
    pen = gradient_norm_penalty(MeanCritic(), real, fake, alpha=0.37)
    assert lam * pen.item() == pytest.approx(expected_penalty, rel=1e-12)
    obj = wgan_gp_discriminator_objective(MeanCritic(), real, fake, lam, alpha=0.37)
    gap = real.mean().item() - fake.mean().item()
    assert obj.item() == pytest.approx(gap - expected_penalty, rel=1e-12)


def test_unit_gradient_gives_zero_penalty():
    real = random_image(12, 12, 1, dtype=torch.float64)
    fake = random_image(12, 12, 2, dtype=torch.float64)
    pen = gradient_norm_penalty(UnitGradCritic(real.shape), real, fake, alpha=0.8)
    assert pen.item() == pytest.approx(0.0, abs=1e-24)


def test_real_equals_fake_gap_is_zero():
    d = Discriminator(channels=4)
    reset_parameters(d, torch.Generator().manual_seed(1))
    x = random_image(16, 16, 5)
    obj_pen_only = -0.1 * gradient_norm_penalty(d, x, x, 0.4)
    obj = wgan_gp_discriminator_objective(d, x, x, 0.1, alpha=0.4)
    assert obj.item() == obj_pen_only.item()


def test_alpha_drawn_from_generator():
    d = MeanCritic()
    real, fake = random_image(12, 12, 1), random_image(12, 12, 2)
    a = wgan_gp_discriminator_objective(d, real, fake, 0.1, generator=torch.Generator().manual_seed(3))
    b = wgan_gp_discriminator_objective(d, real, fake, 0.1, generator=torch.Generator().manual_seed(3))
    assert a.item() == b.item()


def test_discriminator_objective_shape_mismatch():
    with pytest.raises(ShapeError):
        wgan_gp_discriminator_objective(MeanCritic(), random_image(12, 12), random_image(12, 13), 0.1, 0.5)


def test_generator_objective_values():
    fake = random_image(16, 16)
    assert wgan_gp_generator_objective(zero_critic(), fake).item() == 0.0
    assert wgan_gp_generator_objective(MeanCritic(), torch.ones(1, 3, 16, 16)).item() == -1.0


def _double_critic(seed=0):
    d = Discriminator(channels=4).double()
    reset_parameters(d, torch.Generator().manual_seed(seed))
    # larger weights than the 0.02 init so gradients are well above round-off
    with torch.no_grad():
        for m in d.modules():
            if isinstance(m, nn.Conv2d):
                m.weight.mul_(10.0)
    return d


def test_generator_objective_gradient_fd():
    d = _double_critic()
    fake = random_image(14, 14, 9, dtype=torch.float64).requires_grad_(True)
    wgan_gp_generator_objective(d, fake).backward()
    for idx in random_coords(fake.shape, 10, seed=1):
        fd = central_difference(lambda: wgan_gp_generator_objective(d, fake), fake, idx)
        assert relative_error(fd, fake.grad[idx].item()) < 1e-3


def test_gradient_penalty_gradient_fd():
    d = _double_critic(seed=2)
    real = random_image(14, 14, 3, dtype=torch.float64)
    fake = random_image(14, 14, 4, dtype=torch.float64)

    def penalty():
        return 0.1 * gradient_norm_penalty(d, real, fake, 0.6)

    d.zero_grad()
    penalty().backward()
    params = [p for p in d.parameters()]
    gen = torch.Generator().manual_seed(7)
    for _ in range(20):
        p = params[int(torch.randint(0, len(params), (1,), generator=gen))]
        idx = tuple(int(torch.randint(0, s, (1,), generator=gen)) for s in p.shape)
        fd = central_difference(penalty, p, idx)
        # the output bias cannot change an input gradient, so it gets no grad
        analytic = 0.0 if p.grad is None else p.grad[idx].item()
        assert relative_error(fd, analytic) < 1e-3


# --- cycle / identity --------------------------------------------------------


def _chain(a, b, **overrides):
    entries = dict(real_a=a, real_b=b, ab=b, ba=a, aba=a, bab=b, aa=a, bb=b)
    entries.update(overrides)
    return ChainOutputs({0: ChainLevel(**entries)})


def test_cycle_identity_zero_for_perfect_reconstruction():
    a, b = random_image(16, 16, 1), random_image(16, 16, 2)
    chain = _chain(a, b)
    assert cycle_loss(chain, 0).item() == 0.0
    assert identity_loss(chain, 0).item() == 0.0


def test_cycle_offset():
    a, b = random_image(16, 16, 1), random_image(16, 16, 2)
    assert cycle_loss(_chain(a, b, aba=a + 0.5), 0).item() == pytest.approx(0.5, abs=1e-6)


def test_identity_offset():
    a, b = random_image(16, 16, 1), random_image(16, 16, 2)
    assert identity_loss(_chain(a, b, aa=a + 0.25), 0).item() == pytest.approx(0.25, abs=1e-6)


def test_missing_chain_entries():
    a, b = random_image(16, 16, 1), random_image(16, 16, 2)
    with pytest.raises(ContractError):
        cycle_loss(_chain(a, b, aba=None), 0)
    with pytest.raises(ContractError):
        identity_loss(_chain(a, b), 3)


@settings(max_examples=25, deadline=None)
@given(st.integers(0, 10_000))
def test_reconstruction_losses_nonnegative(seed):
    a, b = random_image(8, 8, seed), random_image(8, 8, seed + 1)
    noisy = _chain(a, b, aba=random_image(8, 8, seed + 2), aa=random_image(8, 8, seed + 3))
    assert cycle_loss(noisy, 0).item() >= 0
    assert identity_loss(noisy, 0).item() >= 0


# --- total variation ---------------------------------------------------------


def test_tv_constant_is_sum_sqrt_eps():
    img = torch.full((1, 3, 10, 12), 0.3)
    expected = 3 * 9 * 11 * math.sqrt(TV_EPS)
    assert tv(img).item() == pytest.approx(expected, rel=1e-5)
    assert tv_loss(img, img).item() == pytest.approx(2 * expected, rel=1e-5)


@pytest.mark.parametrize(
    "pos, hand_value",
    [
        ((0, 0), math.sqrt(1 + 1 + TV_EPS)),  # two unit differences at the only valid position
        ((0, 1), math.sqrt(1 + TV_EPS)),
        ((1, 0), math.sqrt(1 + TV_EPS)),
        ((1, 1), math.sqrt(TV_EPS)),
    ],
)
def test_tv_single_pixel_2x2(pos, hand_value):
    x = torch.zeros(1, 1, 2, 2, dtype=torch.float64)
    x[0, 0, pos[0], pos[1]] = 1.0
    assert tv_oracle(x) == pytest.approx(hand_value, rel=1e-12)
    assert tv(x).item() == pytest.approx(hand_value, rel=1e-12)


def test_tv_matches_oracle_on_random_images():
    for seed in range(3):
        x = random_image(9, 13, seed, dtype=torch.float64)
        assert tv(x).item() == pytest.approx(tv_oracle(x), rel=1e-12)


def test_tv_mean_reduction():
    x = random_image(9, 13, 0, dtype=torch.float64)
    assert tv(x, reduction="mean").item() == pytest.approx(tv_oracle(x) / (3 * 8 * 12), rel=1e-12)


def test_tv_undersized():
    with pytest.raises(ShapeError):
        tv(torch.zeros(1, 3, 1, 5))


def test_tv_gradient_fd():
    x = random_image(12, 12, 4, dtype=torch.float64).requires_grad_(True)
    y = random_image(12, 12, 5, dtype=torch.float64)
    tv_loss(x, y).backward()
    for idx in random_coords(x.shape, 10, seed=2):
        fd = central_difference(lambda: tv_loss(x, y), x, idx)
        assert relative_error(fd, x.grad[idx].item()) < 1e-3


@settings(max_examples=25, deadline=None)
@given(st.integers(0, 10_000))
def test_tv_nonnegative(seed):
    assert tv(random_image(6, 7, seed)).item() >= 0


# --- total -------------------------------------------------------------------


def test_total_loss_examples():
    w = LossWeights()
    assert total_loss(0.0, 0.0, 0.0, 0.0, w) == 0.0
    assert total_loss(1.0, 2.0, 3.0, 4.0, w) == pytest.approx(6.4, abs=1e-12)
    only_adv = LossWeights(0.0, 0.0, 0.0, 0.0)
    assert total_loss(1.5, 2.0, 3.0, 4.0, only_adv) == 1.5


def test_total_loss_tensor_keeps_graph():
    adv = torch.tensor(1.0, requires_grad=True)
    out = total_loss(adv, torch.tensor(2.0), torch.tensor(3.0), torch.tensor(4.0), LossWeights())
    out.backward()
    assert adv.grad.item() == 1.0
    assert out.item() == pytest.approx(6.4, abs=1e-6)


def test_total_loss_nan():
    with pytest.raises(TrainingDivergence):
        total_loss(float("nan"), 0.0, 0.0, 0.0, LossWeights())
    with pytest.raises(TrainingDivergence):
        total_loss(0.0, torch.tensor(float("inf")), 0.0, 0.0, LossWeights())


@settings(max_examples=50, deadline=None)
@given(
    st.lists(st.floats(0, 10), min_size=4, max_size=4),
    st.floats(0, 5),
    st.floats(0, 5),
)
def test_total_linear_in_each_lambda(parts, lam1, lam2):
    adv, cyc, idt, tv_value = parts
    f = lambda lam: total_loss(adv, cyc, idt, tv_value, LossWeights(lambda_cyc=lam))
    # affine in lambda_cyc with slope cyc
    assert f(lam2) - f(lam1) == pytest.approx((lam2 - lam1) * cyc, abs=1e-9)
    g = lambda lam: total_loss(adv, cyc, idt, tv_value, LossWeights(lambda_tv=lam))
    assert g(lam2) - g(lam1) == pytest.approx((lam2 - lam1) * tv_value, abs=1e-9)


def test_negative_weight_rejected():
    with pytest.raises(ValueError):
        LossWeights(lambda_tv=-0.1)


def test_report_log_round_trip():
    r = LossReport(adv=1.5, cyc=0.25, idt=0.125, tv=3.0, total=2.0, d_obj=-0.5)
    it, scale, back = LossReport.from_log_line(r.to_log_line(12, 3))
    assert (it, scale) == (12, 3)
    assert (back.adv, back.cyc, back.idt, back.tv, back.total, back.d_obj) == (1.5, 0.25, 0.125, 3.0, 2.0, -0.5)
    assert len(r.to_log_line(0, 0).split()) == 8
