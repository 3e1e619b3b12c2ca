import math

import pytest
import torch

from fabgpt.core.errors import ShapeError
from fabgpt.models.enhancement import (
    EnhancementStage, PredictionModule, apply_confidence, expert_branch_forward, init_expert,
    pm_predict, safe_cosine,
)
from fabgpt.models.encoders import ClipBundle
from fabgpt.schemas.config import PMSimilarity


def _identity_pm(dim=4):
    pm = PredictionModule(dim, dim)
    with torch.no_grad():
        pm.proj.weight.copy_(torch.eye(dim))
        pm.proj.bias.zero_()
    return pm


def test_safe_cosine_zero_norm():
    assert safe_cosine(torch.zeros(3), torch.ones(3)).item() == 0.0
    assert safe_cosine(torch.tensor([1.0, 0.0]), torch.tensor([2.0, 0.0])).item() == pytest.approx(1.0)


def test_pm_picks_matching_label():
    pm = _identity_pm(5)
    labels = torch.eye(5)
    v_img = labels[2].expand(3, 5).clone()          # pooled feature equals the "particle" row
    probs, p_n, pred = pm_predict(v_img, labels, pm)
    out = pm(v_img, labels)
    assert torch.allclose(out.scores[0], torch.tensor([0.0, 0.0, 1.0, 0.0, 0.0]))
    assert int(pred[0]) == 2
    assert p_n[0] == probs[0].max()


def test_pm_orthogonal_is_uniform():
    pm = _identity_pm(5)
    labels = torch.eye(5)[:4]
    v_img = torch.tensor([[0.0, 0.0, 0.0, 0.0, 3.0]])
    probs, p_n, _ = pm_predict(v_img, labels, pm)
    assert torch.allclose(probs, torch.full((1, 4), 0.25))
    assert p_n.item() == pytest.approx(0.25)


def test_pm_matches_scalar_oracle():
    torch.manual_seed(4)
    pm = PredictionModule(6, 6).double()
    v_img = torch.randn(5, 6, dtype=torch.float64)
    labels = torch.randn(5, 6, dtype=torch.float64)
    probs, p_n, pred = pm_predict(v_img, labels, pm)

    W, b = pm.proj.weight.tolist(), pm.proj.bias.tolist()
    pooled = [sum(v_img[r, c].item() for r in range(5)) / 5 for c in range(6)]

    def feat(x):
        return [max(0.0, sum(W[o][i] * x[i] for i in range(6)) + b[o]) for o in range(6)]

    def cos(u, v):
        nu, nv = math.sqrt(sum(a * a for a in u)), math.sqrt(sum(a * a for a in v))
        return 0.0 if nu < 1e-12 or nv < 1e-12 else sum(a * c for a, c in zip(u, v)) / (nu * nv)

    f_img = feat(pooled)
    p = [cos(f_img, feat(labels[k].tolist())) for k in range(5)]
    z = sum(math.exp(x) for x in p)
    expected = [math.exp(x) / z for x in p]
    assert probs[0].tolist() == pytest.approx(expected, abs=1e-12)
    assert int(pred[0]) == max(range(5), key=lambda k: expected[k])


@pytest.mark.parametrize("mode", list(PMSimilarity))
def test_pm_softmax_invariants(mode):
    torch.manual_seed(0)
    pm = PredictionModule(8, 8, mode)
    out = pm(torch.randn(3, 4, 8), torch.randn(5, 8))
    assert torch.allclose(out.probs.sum(-1), torch.ones(3), atol=1e-6)
    assert torch.equal(out.p_n, out.probs.max(-1).values)
    assert torch.equal(out.predicted, out.probs.argmax(-1))
    if mode in (PMSimilarity.cosine, PMSimilarity.linear_relu_cosine):
        assert (out.scores.abs() <= 1 + 1e-6).all()


def test_apply_confidence():
    v = torch.ones(2, 2)
    a, b = apply_confidence(1.0, v, v)
    assert torch.equal(a, v) and torch.equal(b, v)
    a, _ = apply_confidence(0.25, v, v)
    assert torch.equal(a, torch.full((2, 2), 0.25))
    rows = torch.randn(4, 3)
    scaled, _ = apply_confidence(0.4, rows, rows)
    assert torch.allclose(safe_cosine(rows, scaled), torch.ones(4))


def test_expert_init_and_concat():
    v = torch.randn(16, 8)
    e = init_expert(v, 4, seed=7)
    assert torch.equal(e.prompts, e.guide_snapshot)
    assert torch.equal(init_expert(v, 4, seed=7).prompts, e.prompts)
    assert not torch.equal(init_expert(v, 4, seed=8).prompts, e.prompts)
    t = expert_branch_forward(e, v)
    assert t.shape == (20, 8)
    assert torch.equal(t[4:], v)


def test_zero_prompts_give_zero_rows():
    v = torch.randn(16, 8)
    e = init_expert(torch.zeros(3, 8), 4, seed=1)
    assert torch.equal(expert_branch_forward(e, v)[:4], torch.zeros(4, 8))


def test_expert_width_mismatch():
    e = init_expert(torch.randn(3, 8), 2, seed=1)
    with pytest.raises(ShapeError):
        expert_branch_forward(e, torch.randn(5, 6))


def test_one_step_moves_only_prompt_rows():
    v = torch.randn(16, 8)
    e = init_expert(v, 4, seed=3)
    opt = torch.optim.AdamW(e.parameters(), lr=0.1)
    before = expert_branch_forward(e, v).detach()
    expert_branch_forward(e, v)[:4].sum().backward()
    opt.step()
    after = expert_branch_forward(e, v).detach()
    assert not torch.equal(before[:4], after[:4])
    assert torch.equal(after[4:], v)
    assert torch.equal(e.guide_snapshot, before[:4])


def test_stage_switches():
    torch.manual_seed(0)
    bundle = ClipBundle(torch.randn(2, 4, 8), torch.randn(2, 3, 8), torch.randn(5, 8))
    full = EnhancementStage(8, 2, PMSimilarity.linear_relu_cosine)
    _, tok = full(bundle)
    assert tok.t_img.shape == (2, 6, 8) and tok.t_txt.shape == (2, 5, 8) and tok.n_expert == 2
    bare = EnhancementStage(8, 2, PMSimilarity.linear_relu_cosine, use_pm=False, use_experts=False)
    _, tok = bare(bundle)
    assert torch.equal(tok.t_img, bundle.v_img_clip) and tok.n_expert == 0
