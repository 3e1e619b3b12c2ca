from typing import Dict, List, Optional

from pydantic import BaseModel, Field

DETECTION_METRICS = ("image_auc", "pixel_auc", "pro", "ap")
# Table column order for CSV export
QA_FACETS = ("presence", "category", "location", "quantity", "description", "analysis")


class DetectionScores(BaseModel):
    image_auc: Optional[float] = Field(None, ge=0.0, le=1.0)
    pixel_auc: Optional[float] = Field(None, ge=0.0, le=1.0)
    pro: Optional[float] = Field(None, ge=0.0, le=1.0)
    ap: Optional[float] = Field(None, ge=0.0, le=1.0)


class QAScores(BaseModel):
    # percentages; None = facet had no graded questions
    facets: Dict[str, Optional[float]]
    unrelated: Optional[float] = None
    overall: Optional[float] = None
    defect_related: Optional[float] = None
    counts: Dict[str, int] = Field(default_factory=dict)


class EvalReport(BaseModel):
    per_class: Dict[str, DetectionScores]
    average: DetectionScores
    pm_accuracy: Optional[float] = None
    qa: Optional[QAScores] = None
    mean_gate: Dict[str, float] = Field(default_factory=dict)
    oracle: bool = False
    notes: List[str] = Field(default_factory=list)
    config: Dict
    seed: int
    checkpoint_id: Optional[str] = None
    timestamp: str
