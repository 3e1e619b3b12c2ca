import enum
from typing import Dict, List, Optional, Tuple

from pydantic import BaseModel, ConfigDict


class DefectLabel(str, enum.Enum):
    good = "good"
    hole = "hole"
    particle = "particle"
    scratch = "scratch"
    pattern_deformation = "pattern_deformation"

    @property
    def text(self) -> str:
        """Label-set phrasing fed to the text encoder and the corpora."""
        return self.value.replace("_", " ")


# class index order used by the PM and every per-class table
LABEL_ORDER: List[DefectLabel] = [
    DefectLabel.good,
    DefectLabel.hole,
    DefectLabel.particle,
    DefectLabel.scratch,
    DefectLabel.pattern_deformation,
]
DEFECT_LABELS: List[DefectLabel] = LABEL_ORDER[1:]


class SampleMeta(BaseModel):
    """Sidecar written to <root>/meta/<id>.json."""
    model_config = ConfigDict(extra="forbid")

    sample_id: str
    label: DefectLabel
    text_marks: str
    seed: int
    defect_bbox: Optional[Tuple[int, int, int, int]] = None  # r0, c0, r1, c1 (inclusive)
    defect_pixel_count: int
    cause_key: Optional[str] = None


class ManifestEntry(BaseModel):
    sample_id: str
    label: DefectLabel
    image: str
    mask: str
    meta: str


class DatasetManifest(BaseModel):
    root: str
    seed: int
    generation: Dict
    splits: Dict[str, List[ManifestEntry]]

    def entries(self, split: str) -> List[ManifestEntry]:
        return self.splits.get(split, [])

    def class_counts(self, split: Optional[str] = None) -> Dict[str, int]:
        out: Dict[str, int] = {}
        for name, rows in self.splits.items():
            if split is not None and name != split:
                continue
            for r in rows:
                out[r.label.value] = out.get(r.label.value, 0) + 1
        return out
