import math

import pytest
import torch

from fabgpt.core.errors import InputError, NumericError
from fabgpt.objectives import cross_entropy, dice_loss, focal_loss, total_loss
from fabgpt.schemas.config import LossConfig


def test_focal_at_half():
    assert float(focal_loss(torch.tensor([0.5]), 2.0)) == pytest.approx(0.25 * math.log(2), abs=1e-6)


def test_focal_gamma_zero_is_log_loss():
    p = torch.tensor([0.2, 0.7, 0.9])
    assert float(focal_loss(p, 0.0)) == pytest.approx(float(-torch.log(p).mean()), abs=1e-6)


def test_focal_clamps_zero_probability():
    assert math.isfinite(float(focal_loss(torch.tensor([0.0, 1.0]))))
    assert float(focal_loss(torch.tensor([1.0]))) == 0.0


def test_dice_values():
    y = torch.tensor([[1.0, 0.0], [1.0, 0.0]])
    assert float(dice_loss(y, y)) == pytest.approx(-0.5, abs=1e-6)
    assert float(dice_loss(torch.zeros(2, 2), torch.zeros(2, 2))) == 0.0
    half = torch.tensor([[1.0, 1.0], [0.0, 0.0]])
    assert float(dice_loss(y, half)) == pytest.approx(-0.25, abs=1e-6)


def test_dice_shape_mismatch():
    with pytest.raises(InputError):
        dice_loss(torch.zeros(2, 2), torch.zeros(2, 3))


def test_cross_entropy_uniform():
    assert float(cross_entropy(torch.zeros(4), torch.tensor(2))) == pytest.approx(math.log(4), abs=1e-6)
    probs = torch.full((3, 4), 0.25)
    assert float(cross_entropy(probs, torch.tensor([0, 1, 3]), from_logits=False)) == pytest.approx(math.log(4), abs=1e-6)


def test_cross_entropy_bad_index():
    with pytest.raises(InputError):
        cross_entropy(torch.zeros(4), torch.tensor(4))
    with pytest.raises(InputError):
        cross_entropy(torch.zeros(2, 4), torch.tensor([0, -1]))


def test_total_loss_weights():
    assert total_loss(0.1, -0.4, 0.2, 0.3) == pytest.approx(0.2)
    cfg = LossConfig(alpha=2.0, beta=0.0, delta=1.0, epsilon=0.5, zeta=3.0)
    assert total_loss(0.1, -0.4, 0.2, 0.3, cfg, l_gate=0.1) == pytest.approx(0.2 + 0.2 + 0.15 + 0.3)


def test_total_loss_names_the_bad_term():
    with pytest.raises(NumericError) as exc:
        total_loss(0.1, float("nan"), 0.2, 0.3, step=7)
    assert exc.value.exit_code == 2
    assert "dice" in str(exc.value)
    with pytest.raises(NumericError) as exc:
        total_loss(torch.tensor(0.1), torch.tensor(0.0), torch.tensor(float("inf")), 0.0)
    assert "ce1" in str(exc.value)


def test_gradients_match_finite_differences():
    torch.manual_seed(0)
    y = (torch.rand(6, 6) > 0.5).double()

    def dice(y_hat):
        return dice_loss(torch.sigmoid(y_hat), y)

    def focal(z):
        return focal_loss(torch.sigmoid(z), 2.0)

    def ce(z):
        return cross_entropy(z, torch.tensor([1, 0, 2]))

    assert torch.autograd.gradcheck(dice, (torch.randn(6, 6, dtype=torch.float64, requires_grad=True),),
                                    eps=1e-3, rtol=1e-4, atol=1e-6)
    assert torch.autograd.gradcheck(focal, (torch.randn(10, dtype=torch.float64, requires_grad=True),),
                                    eps=1e-3, rtol=1e-4, atol=1e-6)
    assert torch.autograd.gradcheck(ce, (torch.randn(3, 4, dtype=torch.float64, requires_grad=True),),
                                    eps=1e-3, rtol=1e-4, atol=1e-6)


# ===== properties =====
@pytest.mark.parametrize("gamma", [0.0, 0.5, 2.0, 5.0])
def test_focal_is_non_increasing_in_p(gamma):
    p = torch.linspace(0.01, 1.0, 100, dtype=torch.float64)
    values = torch.stack([focal_loss(p[i:i + 1], gamma) for i in range(len(p))])
    assert (values[1:] <= values[:-1] + 1e-12).all()
    assert float(values[-1]) == 0.0


@pytest.mark.parametrize("seed", range(5))
def test_dice_bounds_on_random_maps(seed):
    gen = torch.Generator().manual_seed(seed)
    y = (torch.rand(3, 16, 16, generator=gen) > 0.7).float()
    y_hat = torch.rand(3, 16, 16, generator=gen)
    value = float(dice_loss(y, y_hat))
    assert -0.5 - 1e-6 <= value <= 0.0


def test_dice_is_zero_for_disjoint_supports():
    y = torch.zeros(8, 8)
    y_hat = torch.zeros(8, 8)
    y[:3, :3] = 1.0
    y_hat[5:, 5:] = 0.8
    assert float(dice_loss(y, y_hat)) == 0.0


def test_cross_entropy_confident_prediction():
    target = torch.tensor([2, 0])
    one_hot = torch.nn.functional.one_hot(target, 4).float()
    assert float(cross_entropy(one_hot, target, from_logits=False)) == 0.0
    assert float(cross_entropy(one_hot * 100.0, target)) == pytest.approx(0.0, abs=1e-6)


@pytest.mark.parametrize("coeff,index", [("alpha", 0), ("beta", 1), ("delta", 2), ("epsilon", 3)])
def test_doubling_a_coefficient_doubles_its_term(coeff, index):
    gen = torch.Generator().manual_seed(index)
    terms = [float(v) for v in torch.rand(4, generator=gen)]
    base = LossConfig()
    doubled = LossConfig(**{coeff: 2 * getattr(base, coeff)})
    gap = total_loss(*terms, doubled) - total_loss(*terms, base)
    assert gap == pytest.approx(getattr(base, coeff) * terms[index], rel=1e-9)


def test_zero_alpha_drops_focal():
    cfg = LossConfig(alpha=0.0)
    assert total_loss(5.0, -0.2, 0.3, 0.4, cfg) == pytest.approx(total_loss(0.0, -0.2, 0.3, 0.4, cfg))
