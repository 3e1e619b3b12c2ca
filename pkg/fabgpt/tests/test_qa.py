import json
import math
import os

import numpy as np
import pytest
import torch
from pydantic import ValidationError

from fabgpt.core.errors import ConfigurationError, InputError
from fabgpt.models.lm import ToyLM, answer, lm_loss, prefix_lm_mask
from fabgpt.models.modulation import PromptInstruction
from fabgpt.models.vocab import EOS_ID, PAD_ID, UNK_ID
from fabgpt.schemas.config import InstructionFormat
from fabgpt.schemas.corpus import CorpusEntry, Facet
from fabgpt.schemas.dataset import DEFECT_LABELS, DefectLabel
from fabgpt.services.corpus_service import (
    alternation_schedule, build_corpora, count_regions, default_corpora, entry_applies,
    grade_answer, heldout_defect_items, heldout_general_items, location_cell, render_entry,
)
from fabgpt.services.synth_service import WaferSample

FIXTURES = os.path.join(os.path.dirname(__file__), "fixtures")


@pytest.fixture(scope="module")
def corpora():
    return default_corpora()


def _sample(label, blobs=((4, 4),), size=64):
    mask = np.zeros((size, size), dtype=np.uint8)
    for r, c in blobs:
        mask[r - 1:r + 2, c - 1:c + 2] = 1
    if label == DefectLabel.good:
        mask[:] = 0
    return WaferSample(image=np.zeros((size, size), dtype=np.float32), mask=mask, label=DefectLabel(label),
                       text_marks="", sample_id=f"{label}-0", seed=0)


# ===== corpora =====
def test_corpus_sizes(corpora):
    templates, a, b = corpora
    assert len(a) == 60
    assert len(b) == 100
    assert {e.category for e in a} == {label.value for label in DEFECT_LABELS}
    assert all(e.corpus_tag == "A" and e.facet != Facet.general for e in a)
    assert all(e.corpus_tag == "B" and e.facet == Facet.general for e in b)


def test_too_few_general_facts(tmp_path, corpora):
    templates = corpora[0]
    facts = tmp_path / "facts.txt"
    facts.write_text("".join(f"question {i}?\tanswer {i}.\n" for i in range(99)))
    with pytest.raises(ConfigurationError):
        build_corpora(DEFECT_LABELS, templates.causes, str(facts), templates=templates)


def test_missing_cause(corpora):
    templates = corpora[0]
    causes = dict(templates.causes)
    causes.pop("scratch")
    with pytest.raises(ConfigurationError):
        build_corpora(DEFECT_LABELS, causes, templates=templates)


def test_general_entries_cannot_use_image_slots():
    with pytest.raises(ValidationError):
        CorpusEntry(question_template="what is {type}?", answer_template="x", corpus_tag="B",
                    category="general", facet=Facet.general)


# ===== slots =====
def test_two_particles_top_left(corpora):
    templates, a, _ = corpora
    s = _sample("particle", blobs=((3, 3), (8, 8)))
    assert count_regions(s.mask) == 2
    assert location_cell(s.mask) == "top-left"
    quantity = next(e for e in a if e.category == "particle" and e.facet == Facet.quantity)
    item = render_entry(quantity, s, templates)
    assert item.expected == {"count": "2"}
    assert grade_answer(item.answer, item.expected)
    location = next(e for e in a if e.category == "particle" and e.facet == Facet.location)
    item = render_entry(location, s, templates)
    assert item.expected == {"location": "top-left"}
    assert "top-left" in item.answer


def test_good_sample_answers(corpora):
    templates, a, _ = corpora
    s = _sample("good")
    presence = next(e for e in a if e.facet == Facet.presence)
    assert entry_applies(presence, s)
    item = render_entry(presence, s, templates)
    assert item.expected == {"presence": "no"}
    assert grade_answer(item.answer, item.expected)
    location = next(e for e in a if e.facet == Facet.location)
    assert not entry_applies(location, s)


def test_every_rendered_answer_grades_true_and_encodes(corpora, tiny_vocab):
    templates, a, b = corpora
    for e in a:
        s = _sample(e.category, blobs=((50, 30),))
        item = render_entry(e, s, templates)
        assert grade_answer(item.answer, item.expected), item
        assert UNK_ID not in tiny_vocab.encode(item.answer)
        assert UNK_ID not in tiny_vocab.encode(item.question)
    for e in b:
        item = render_entry(e, None, templates)
        assert item.expected == {"answer": e.answer_template}
        assert UNK_ID not in tiny_vocab.encode(item.answer)


def test_heldout_items(corpora):
    templates = corpora[0]
    samples = [_sample(label) for label in DefectLabel]
    items = heldout_defect_items(samples, templates)
    assert len(items) == 24
    assert {i.facet for i in items} == {f for f in Facet if f != Facet.general}
    general = heldout_general_items()
    assert len(general) == 20
    assert all(i.corpus_tag == "B" for i in general)


# ===== schedule =====
def test_schedule():
    assert alternation_schedule(6) == list("AABAAB")
    assert alternation_schedule(1) == ["A"]
    s = alternation_schedule(300)
    assert s.count("A") == 200 and s.count("B") == 100
    with pytest.raises(InputError):
        alternation_schedule(0)


# ===== grading =====
def test_grading_fixture():
    with open(os.path.join(FIXTURES, "grading_cases.json")) as f:
        cases = json.load(f)
    assert len(cases) == 10
    for case in cases:
        assert grade_answer(case["answer"], case["expected"]) is case["correct"], case


def test_empty_expected_is_false():
    assert grade_answer("anything", {}) is False


def test_slot_values_must_be_contiguous():
    assert grade_answer("the defect sits top left", {"location": "top-left"})
    assert not grade_answer("bottom of the wafer, top right", {"location": "bottom right"})
    assert not grade_answer("left top", {"location": "top left"})


# ===== language model =====
@pytest.fixture
def lm():
    torch.manual_seed(0)
    return ToyLM(30, 16, 1, 2, 32)


def _instruction(P=5, dim=16):
    return PromptInstruction(tokens=torch.randn(1, P, dim), mask=torch.ones(1, P, dtype=torch.bool),
                             block_spans=[("que", 0, P)], format_tag=InstructionFormat.eq9_gated)


def test_prefix_mask():
    m = prefix_lm_mask(2, 3)
    assert not m[:2, :2].any()
    assert m[:2, 2:].all()
    assert m[2:, 2:].tolist() == [[False, True, True], [False, False, True], [False, False, False]]


def test_answer_positions_are_causal(lm):
    inst = _instruction()
    answer_in = torch.tensor([[1, 7, 8, 9, 10, 11]])
    before = lm(inst.tokens, inst.mask, answer_in)
    moved = answer_in.clone()
    moved[0, 4] = 20
    after = lm(inst.tokens, inst.mask, moved)
    assert torch.allclose(before[:, :4], after[:, :4], atol=1e-6)
    assert not torch.allclose(before[:, 4:], after[:, 4:])


def test_uniform_lm_loss_is_log_vocab(lm):
    with torch.no_grad():
        lm.embed.weight.zero_()
    ids = torch.tensor([[7, 9, EOS_ID, PAD_ID]])
    assert float(lm_loss(_instruction(), ids, lm)) == pytest.approx(math.log(30), abs=1e-5)


def test_lm_loss_rejects_bad_answers(lm):
    with pytest.raises(InputError):
        lm_loss(_instruction(), torch.tensor([[7, 30, EOS_ID]]), lm)
    with pytest.raises(InputError):
        lm_loss(_instruction(), torch.tensor([[7, 9, PAD_ID]]), lm)
    with pytest.raises(InputError):
        lm_loss(_instruction(), torch.tensor([[PAD_ID, PAD_ID]]), lm)


def test_context_overflow(lm):
    with pytest.raises(InputError):
        lm(torch.randn(1, 30, 16), torch.ones(1, 30, dtype=torch.bool), torch.ones(1, 5, dtype=torch.long))


def test_greedy_answer_is_deterministic(tiny_vocab):
    torch.manual_seed(1)
    model = ToyLM(len(tiny_vocab), 16, 1, 2, 40)
    inst = _instruction()
    first = answer(inst, model, tiny_vocab, 8)
    assert answer(inst, model, tiny_vocab, 8) == first
    assert answer(inst, model, tiny_vocab, 0) == ""
