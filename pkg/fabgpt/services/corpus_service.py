"""
Q&A corpora: Corpus-A (defect knowledge templates filled from sample
metadata), Corpus-B (general facts), the AAB schedule and answer grading.
"""
import json
import logging
import os
import re
from typing import Dict, Iterable, List, Mapping, Optional, Sequence, Tuple, Union

import numpy as np
from pydantic import ValidationError
from scipy import ndimage

from fabgpt.core.config import settings
from fabgpt.core.errors import ConfigurationError, InputError
from fabgpt.models.vocab import Vocabulary
from fabgpt.schemas.corpus import CorpusEntry, Facet, QAItem, TemplateFile
from fabgpt.schemas.dataset import DEFECT_LABELS, DefectLabel
from fabgpt.services.synth_service import PRODUCTION_STEPS, WaferSample

log = logging.getLogger(__name__)

# ===== constants =====
MIN_FACTS = 100
TEMPLATES_PER_CATEGORY = 15
GRID_NAMES = (
    ("top-left", "top", "top-right"),
    ("left", "center", "right"),
    ("bottom-left", "bottom", "bottom-right"),
)
_SLOT_RE = re.compile(r"\{(\w+)\}")
_WORD_RE = re.compile(r"[a-z0-9]+")


def _asset(name: str) -> str:
    return os.path.join(settings.ASSET_DIR, name)


# ===== loading =====
def load_templates(path: Optional[str] = None) -> TemplateFile:
    path = path or _asset("corpus_templates.json")
    try:
        with open(path, "r") as f:
            return TemplateFile.model_validate(json.load(f))
    except OSError as e:
        raise ConfigurationError(f"cannot read templates {path}: {e}")
    except (json.JSONDecodeError, ValidationError) as e:
        raise ConfigurationError(f"templates {path} do not parse: {e}")


def read_fact_pairs(path: str) -> List[Tuple[str, str]]:
    """`Q<TAB>A` per line; blank lines skipped."""
    try:
        with open(path, "r") as f:
            lines = [ln.rstrip("\n") for ln in f]
    except OSError as e:
        raise ConfigurationError(f"cannot read facts {path}: {e}")
    pairs = []
    for n, ln in enumerate(lines, 1):
        if not ln.strip():
            continue
        parts = ln.split("\t")
        if len(parts) != 2 or not parts[0].strip() or not parts[1].strip():
            raise ConfigurationError(f"{path}:{n}: expected 'question<TAB>answer'")
        pairs.append((parts[0].strip(), parts[1].strip()))
    return pairs


# ===== corpora =====
def build_corpora(label_set: Sequence[Union[str, DefectLabel]], cause_table: Mapping[str, str],
                  general_facts_file: Optional[str] = None,
                  templates: Optional[TemplateFile] = None) -> Tuple[List[CorpusEntry], List[CorpusEntry]]:
    templates = templates or load_templates()
    labels = [DefectLabel(l) if not isinstance(l, DefectLabel) else l for l in label_set]
    labels = [l for l in labels if l != DefectLabel.good]
    missing = [l.value for l in labels if not str(cause_table.get(l.value, "")).strip()]
    if missing:
        raise ConfigurationError(f"cause table has no root cause for: {', '.join(missing)}")
    if len(templates.templates) != TEMPLATES_PER_CATEGORY:
        log.warning("corpus has %d templates per category, expected %d",
                    len(templates.templates), TEMPLATES_PER_CATEGORY)

    corpus_a = [
        CorpusEntry(question_template=t.question, answer_template=t.answer or "", corpus_tag="A",
                    category=label.value, facet=t.facet, good_answer_template=t.good_answer)
        for label in labels for t in templates.templates
    ]
    facts = read_fact_pairs(general_facts_file or _asset("general_facts.txt"))
    if len(facts) < MIN_FACTS:
        raise ConfigurationError(f"general facts file has {len(facts)} pairs, need at least {MIN_FACTS}")
    corpus_b = [
        CorpusEntry(question_template=q, answer_template=a, corpus_tag="B", category="general", facet=Facet.general)
        for q, a in facts[:MIN_FACTS]
    ]
    return corpus_a, corpus_b


def default_corpora() -> Tuple[TemplateFile, List[CorpusEntry], List[CorpusEntry]]:
    templates = load_templates()
    a, b = build_corpora(DEFECT_LABELS, templates.causes, templates=templates)
    return templates, a, b


def export_corpora(out_dir: str, corpus_a: List[CorpusEntry], corpus_b: List[CorpusEntry]) -> List[str]:
    os.makedirs(out_dir, exist_ok=True)
    written = []
    for name, corpus in (("corpus_a.json", corpus_a), ("corpus_b.json", corpus_b)):
        path = os.path.join(out_dir, name)
        with open(path, "w") as f:
            json.dump([e.model_dump(mode="json") for e in corpus], f, indent=2)
            f.write("\n")
        written.append(path)
    return written


# ===== slots =====
def count_regions(mask: np.ndarray) -> int:
    """4-connected components (scipy's default cross structure)."""
    _, n = ndimage.label(np.asarray(mask) > 0)
    return int(n)


def location_cell(mask: np.ndarray) -> str:
    m = np.asarray(mask) > 0
    if not m.any():
        raise InputError("location of an empty mask")
    h, w = m.shape
    cy, cx = ndimage.center_of_mass(m)
    row = min(int(cy * 3 // h), 2)
    col = min(int(cx * 3 // w), 2)
    return GRID_NAMES[row][col]


def slot_values(sample: WaferSample, templates: TemplateFile) -> Dict[str, str]:
    if sample.label == DefectLabel.good:
        return {"type": "no defect", "count": "0"}
    key = sample.meta.cause_key if sample.meta and sample.meta.cause_key else sample.label.value
    return {
        "type": sample.label.text,
        "count": str(count_regions(sample.mask)),
        "location": location_cell(sample.mask),
        "description": templates.descriptions[key],
        "cause": templates.causes[key],
    }


def fill(template: str, slots: Mapping[str, str]) -> str:
    def _sub(m):
        name = m.group(1)
        if name not in slots:
            raise InputError(f"slot '{name}' has no value")
        return slots[name]
    return _SLOT_RE.sub(_sub, template)


_FACET_SLOT = {
    Facet.category: "type",
    Facet.location: "location",
    Facet.quantity: "count",
    Facet.description: "description",
    Facet.analysis: "cause",
}


def expected_slots(facet: Facet, slots: Mapping[str, str], good: bool) -> Dict[str, str]:
    if facet == Facet.presence:
        return {"presence": "no" if good else "yes"}
    key = _FACET_SLOT[facet]
    return {key: slots[key]}


def entry_applies(entry: CorpusEntry, sample: WaferSample) -> bool:
    if entry.corpus_tag == "B":
        return True
    if sample.label == DefectLabel.good:
        return entry.good_answer_template is not None
    return entry.category == sample.label.value


def render_entry(entry: CorpusEntry, sample: Optional[WaferSample], templates: TemplateFile) -> QAItem:
    if entry.corpus_tag == "B":
        return QAItem(question=entry.question_template, answer=entry.answer_template,
                      expected={"answer": entry.answer_template}, facet=Facet.general, corpus_tag="B")
    if sample is None:
        raise InputError("Corpus-A entries need a sample to fill their slots")
    slots = slot_values(sample, templates)
    good = sample.label == DefectLabel.good
    answer_t = entry.good_answer_template if good else entry.answer_template
    if answer_t is None:
        raise InputError(f"template '{entry.question_template}' has no answer for good samples")
    return QAItem(question=fill(entry.question_template, slots), answer=fill(answer_t, slots),
                  expected=expected_slots(entry.facet, slots, good), facet=entry.facet,
                  corpus_tag="A", sample_id=sample.sample_id)


def heldout_defect_items(samples: Sequence[WaferSample], templates: TemplateFile) -> List[QAItem]:
    """One paraphrased question per facet for the first test sample of each defect category."""
    items = []
    for label in DEFECT_LABELS:
        sample = next((s for s in samples if s.label == label), None)
        if sample is None:
            log.warning("no test sample of category %s; its held-out questions are skipped", label.value)
            continue
        slots = slot_values(sample, templates)
        for t in templates.eval_templates:
            items.append(QAItem(question=t.question, answer="", expected=expected_slots(t.facet, slots, False),
                                facet=t.facet, corpus_tag="A", sample_id=sample.sample_id))
    return items


def heldout_general_items(path: Optional[str] = None) -> List[QAItem]:
    return [QAItem(question=q, answer=a, expected={"answer": a}, facet=Facet.general, corpus_tag="B")
            for q, a in read_fact_pairs(path or _asset("general_eval.txt"))]


# ===== schedule =====
def alternation_schedule(n_steps: int) -> List[str]:
    if n_steps < 1:
        raise InputError("schedule needs at least one step")
    return ["B" if i % 3 == 2 else "A" for i in range(n_steps)]


# ===== grading =====
def normalise(text: str) -> List[str]:
    """Lowercase words and whole numbers; punctuation and hyphens split words."""
    return _WORD_RE.findall(text.lower())


def _contains(hay: List[str], needle: List[str]) -> bool:
    n = len(needle)
    return any(hay[i:i + n] == needle for i in range(len(hay) - n + 1))


def grade_answer(answer: str, expected: Mapping[str, str]) -> bool:
    """True when every expected value appears in the answer as a contiguous run of normalised words."""
    if not expected:
        return False
    hay = normalise(answer)
    for value in expected.values():
        needle = normalise(str(value))
        if not needle or not _contains(hay, needle):
            return False
    return True


# ===== vocabulary =====
def corpus_texts(corpus_a: Iterable[CorpusEntry], corpus_b: Iterable[CorpusEntry],
                 templates: TemplateFile) -> List[str]:
    texts: List[str] = []
    for e in list(corpus_a) + list(corpus_b):
        texts += [e.question_template, e.answer_template, e.good_answer_template or ""]
    texts += [t.question for t in templates.eval_templates]
    texts += list(templates.descriptions.values()) + list(templates.causes.values())
    texts += [name for row in GRID_NAMES for name in row]
    texts += [label.text for label in DefectLabel] + ["no defect", "w"] + list(PRODUCTION_STEPS)
    return [_SLOT_RE.sub(" ", t) for t in texts]


def build_vocabulary(corpus_a, corpus_b, templates: TemplateFile, max_size: int = 1024) -> Vocabulary:
    return Vocabulary.build(corpus_texts(corpus_a, corpus_b, templates), max_size=max_size)
