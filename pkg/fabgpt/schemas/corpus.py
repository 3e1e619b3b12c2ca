import enum
from typing import Dict, List, Literal, Optional

from pydantic import BaseModel, ConfigDict, Field, model_validator


class Facet(str, enum.Enum):
    presence = "presence"
    category = "category"
    location = "location"
    quantity = "quantity"
    description = "description"
    analysis = "analysis"
    general = "general"


DEFECT_FACETS: List[Facet] = [f for f in Facet if f != Facet.general]
IMAGE_SLOTS = ("type", "count", "location", "description", "cause")


class CorpusEntry(BaseModel):
    model_config = ConfigDict(extra="forbid")

    question_template: str
    answer_template: str
    corpus_tag: Literal["A", "B"]
    category: str                       # defect label value, or "general"
    facet: Facet
    good_answer_template: Optional[str] = None

    @model_validator(mode="after")
    def _tag_matches_facet(self):
        if self.corpus_tag == "A" and (self.facet == Facet.general or self.category == "general"):
            raise ValueError("Corpus-A entries need a defect category and a defect facet")
        if self.corpus_tag == "B":
            if self.facet != Facet.general:
                raise ValueError("Corpus-B entries have facet 'general'")
            text = self.question_template + self.answer_template
            if any("{" + s + "}" in text for s in IMAGE_SLOTS):
                raise ValueError("Corpus-B entries cannot reference image slots")
        return self


class TemplateSpec(BaseModel):
    facet: Facet
    question: str
    answer: Optional[str] = None
    good_answer: Optional[str] = None


class TemplateFile(BaseModel):
    """Schema of data/corpus_templates.json."""
    version: int = 1
    slots: Dict[str, str] = Field(default_factory=dict)
    descriptions: Dict[str, str]
    causes: Dict[str, str]
    templates: List[TemplateSpec]
    eval_templates: List[TemplateSpec]


class QAItem(BaseModel):
    """One rendered question with its reference answer and grading slots."""
    question: str
    answer: str
    expected: Dict[str, str]
    facet: Facet
    corpus_tag: Literal["A", "B"]
    sample_id: Optional[str] = None
