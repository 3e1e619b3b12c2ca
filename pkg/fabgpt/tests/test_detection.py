import inspect

import pytest
import torch

from fabgpt.core.errors import ShapeError
from fabgpt.models.detection import (
    DetectionHead, MaskProjector, MaskTensor, detect, masks_from_logits, project_mask,
)
from fabgpt.objectives import detection_focal, dice_loss
from fabgpt.schemas.config import RunConfig


@pytest.fixture
def head():
    torch.manual_seed(0)
    return DetectionHead(64, [32, 32, 16, 16])


def test_output_shape_and_normalisation(head):
    t_img, t_txt = torch.randn(4 + 16, 64), torch.randn(20, 64)
    m = detect(t_img, t_txt, head, n_expert=4)
    assert m.probs.shape == (1, 2, 64, 64)
    assert m.binary.shape == (1, 64, 64)
    assert torch.allclose(m.probs.sum(dim=1), torch.ones(1, 64, 64), atol=1e-6)
    assert ((m.probs >= 0) & (m.probs <= 1)).all()
    assert torch.equal(m.anomaly_map, m.probs[:, 1])


def test_equal_logits_are_normal(head):
    with torch.no_grad():
        head.out.weight.zero_()
        head.out.bias.zero_()
    m = detect(torch.randn(16, 64), torch.randn(5, 64), head)
    assert torch.equal(m.probs, torch.full_like(m.probs, 0.5))
    assert not m.binary.any()


def test_fuse_gates_rows_by_mean_similarity():
    t_img = torch.tensor([[1.0, 0.0, 2.0], [0.0, 3.0, 0.0]])
    t_txt = torch.tensor([[1.0, 1.0, 0.0], [0.0, 1.0, 1.0]])
    # row similarities (1, 2) and (3, 3); unscaled means 1.5 and 3.0
    expected = torch.tensor([[1.5, 0.0, 3.0], [0.0, 9.0, 0.0]])
    assert torch.equal(DetectionHead.fuse(t_img, t_txt), expected)


def test_non_square_grid(head):
    with pytest.raises(ShapeError):
        detect(torch.randn(4 + 15, 64), torch.randn(5, 64), head, n_expert=4)


def test_width_mismatch(head):
    with pytest.raises(ShapeError):
        detect(torch.randn(16, 64), torch.randn(5, 32), head)


def test_binary_is_argmax_with_ties_to_normal():
    normal = torch.tensor([[0.0, 1.0], [2.0, 0.5]])
    defect = torch.tensor([[0.0, 0.0], [1.0, 3.0]])
    m = masks_from_logits(torch.stack([normal, defect])[None])
    assert m.binary.tolist() == [[[0, 0], [0, 1]]]


def test_monotone_in_defect_logit():
    torch.manual_seed(1)
    logits = torch.randn(1, 2, 8, 8)
    base = masks_from_logits(logits).anomaly_map[0, 3, 5]
    for bump in (0.1, 1.0, 5.0):
        moved = logits.clone()
        moved[0, 1, 3, 5] += bump
        assert masks_from_logits(moved).anomaly_map[0, 3, 5] >= base


def test_no_threshold_knob():
    assert list(inspect.signature(masks_from_logits).parameters) == ["logits"]
    fields = set()
    for section in ("generation", "model", "loss", "train", "ablation"):
        fields |= set(getattr(RunConfig(), section).model_fields)
    assert not any("threshold" in f for f in fields)


def test_loss_gradient_matches_finite_differences():
    torch.manual_seed(2)
    target = (torch.rand(1, 8, 8) > 0.6).long()

    def loss(logits):
        m = masks_from_logits(logits)
        return detection_focal(m.probs, target, 2.0) + dice_loss(m.anomaly_map, target)

    logits = torch.randn(1, 2, 8, 8, dtype=torch.float64, requires_grad=True)
    assert torch.autograd.gradcheck(loss, (logits,), eps=1e-3, rtol=1e-4, atol=1e-6)


def test_project_mask():
    torch.manual_seed(3)
    proj = MaskProjector(64, grid=4)
    zeros = torch.zeros(64, 64)
    t = proj(zeros)
    assert t.shape == (16, 64)
    assert torch.allclose(t, proj.proj.bias.expand(16, 64))
    amap = torch.rand(64, 64)
    m = MaskTensor(logits=None, probs=None, binary=None, anomaly_map=amap[None])
    single = project_mask(m, proj)[0]
    double = proj(2 * amap)
    bias = proj.proj.bias
    assert torch.allclose(double - bias, 2 * (single - bias), atol=1e-5)
