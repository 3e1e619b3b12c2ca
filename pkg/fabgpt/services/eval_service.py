"""
Test-split evaluation: detection metrics per defect class, PM accuracy,
held-out Q&A accuracy with gate statistics, report and table export.
"""
import os
from dataclasses import dataclass
from datetime import datetime, timezone
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np
import pandas as pd
import torch

from fabgpt.models.lm import answer
from fabgpt.models.pipeline import FabPipeline
from fabgpt.schemas.corpus import QAItem
from fabgpt.schemas.dataset import DEFECT_LABELS, LABEL_ORDER, DefectLabel
from fabgpt.schemas.report import DETECTION_METRICS, EvalReport, QAScores
from fabgpt.services import detect_service
from fabgpt.services.corpus_service import (
    grade_answer, heldout_defect_items, heldout_general_items, load_templates,
)
from fabgpt.services.metrics_service import PRO_FPR_LIMIT, per_class_scores, qa_accuracy
from fabgpt.services.run_service import atomic_write_json
from fabgpt.services.synth_service import WaferSample

REPORT_NOTES = [
    "pixel AUC, PRO and AP pool pixels over every image of a class group (that class plus the good images)",
    "image score is the maximum of the anomaly map",
    f"PRO integrates up to FPR {PRO_FPR_LIMIT}, 4-connected regions, last point held flat to the limit",
    "averages are unweighted means over the defect classes",
    "Q&A overall is the unweighted mean of the six facet groups and the unrelated group",
]


@dataclass
class Predictions:
    maps: np.ndarray            # N x H x W
    binary: np.ndarray          # N x H x W
    predicted: List[str]        # PM label values
    p_n: np.ndarray


def predict(pipeline: FabPipeline, samples: Sequence[WaferSample], batch_size: int = 16) -> Predictions:
    pipeline.eval()
    maps, binary, predicted, p_n = [], [], [], []
    for i in range(0, len(samples), batch_size):
        chunk = samples[i:i + batch_size]
        images = torch.from_numpy(np.stack([s.image for s in chunk]).astype(np.float32))
        pm_out, mask = pipeline.detect(images, [s.text_marks for s in chunk])
        maps.append(mask.anomaly_map.numpy())
        binary.append(mask.binary.numpy())
        predicted += [LABEL_ORDER[int(k)].value for k in pm_out.predicted]
        p_n.append(pm_out.p_n.numpy())
    return Predictions(maps=np.concatenate(maps), binary=np.concatenate(binary),
                       predicted=predicted, p_n=np.concatenate(p_n))


@torch.no_grad()
def ask(pipeline: FabPipeline, question: str, image: Optional[np.ndarray] = None,
        text_marks: str = "") -> Tuple[str, float]:
    """Answer one question; a missing image is the blank image. Returns (answer, gate)."""
    pipeline.eval()
    size = pipeline.image_size
    img = np.zeros((size, size), dtype=np.float32) if image is None else image.astype(np.float32)
    q_ids, q_mask = pipeline.question_ids([question])
    out = pipeline(torch.from_numpy(img)[None], [text_marks], q_ids, q_mask)
    text = answer(out.instruction, pipeline.qa, pipeline.vocab, pipeline.cfg.model.max_answer_tokens)
    return text, float(out.a[0])


def evaluate_qa(pipeline: FabPipeline, samples: Sequence[WaferSample]) -> Tuple[QAScores, Dict[str, float], List[Dict]]:
    templates = load_templates()
    by_id = {s.sample_id: s for s in samples}
    defect_items = heldout_defect_items(samples, templates)
    general_items = heldout_general_items()
    # unrelated questions are asked with a defect image attached
    hosts = [s for s in samples if s.label != DefectLabel.good] or list(samples)

    transcript, graded = [], []
    gates: Dict[str, List[float]] = {"defect": [], "unrelated": []}

    def _run(item: QAItem, sample: Optional[WaferSample], group: str):
        text, a = ask(pipeline, item.question, sample.image if sample else None,
                      sample.text_marks if sample else "")
        ok = grade_answer(text, item.expected)
        graded.append((item.facet.value, ok))
        gates[group].append(a)
        transcript.append({"question": item.question, "answer": text, "expected": item.expected,
                           "facet": item.facet.value, "correct": ok, "gate": a,
                           "sample_id": sample.sample_id if sample else None})

    for item in defect_items:
        _run(item, by_id[item.sample_id], "defect")
    for k, item in enumerate(general_items):
        _run(item, hosts[k % len(hosts)] if hosts else None, "unrelated")
    mean_gate = {k: float(np.mean(v)) for k, v in gates.items() if v}
    return qa_accuracy(graded), mean_gate, transcript


def evaluate(pipeline: FabPipeline, samples: Sequence[WaferSample], *, oracle: bool = False,
             with_qa: bool = True, checkpoint_id: Optional[str] = None) -> Tuple[EvalReport, List[Dict]]:
    preds = predict(pipeline, samples)
    masks = np.stack([s.mask for s in samples]).astype(np.int64)
    maps = masks.astype(np.float64) if oracle else preds.maps
    labels = [s.label.value for s in samples]
    per_class, average = per_class_scores(maps, masks, labels, [l.value for l in DEFECT_LABELS])

    defect_idx = [i for i, s in enumerate(samples) if s.label != DefectLabel.good]
    pm_accuracy = None
    if defect_idx and pipeline.cfg.ablation.use_pm:
        pm_accuracy = float(np.mean([preds.predicted[i] == labels[i] for i in defect_idx]))

    qa, mean_gate, transcript = None, {}, []
    if with_qa:
        qa, mean_gate, transcript = evaluate_qa(pipeline, samples)
    report = EvalReport(
        per_class=per_class, average=average, pm_accuracy=pm_accuracy, qa=qa, mean_gate=mean_gate,
        oracle=oracle, notes=list(REPORT_NOTES), config=pipeline.cfg.echo(), seed=pipeline.cfg.seed,
        checkpoint_id=checkpoint_id, timestamp=datetime.now(timezone.utc).isoformat(),
    )
    return report, transcript


def report_table(report: EvalReport) -> pd.DataFrame:
    """Per-class rows plus Average, detection metric columns in table order."""
    rows = [{"class": c, **s.model_dump()} for c, s in report.per_class.items()]
    rows.append({"class": "average", **report.average.model_dump()})
    return pd.DataFrame(rows, columns=["class", *DETECTION_METRICS])


def write_report(report: EvalReport, path: str, csv_path: Optional[str] = None) -> None:
    atomic_write_json(path, report.model_dump(mode="json"))
    if csv_path:
        report_table(report).to_csv(csv_path, index=False, float_format="%.6f")


def write_heatmaps(pipeline: FabPipeline, samples: Sequence[WaferSample], n: int, out_dir: str) -> List[str]:
    written = []
    for s in list(samples)[:max(0, n)]:
        result = detect_service.detect_image(pipeline, s.image, s.text_marks)
        paths = detect_service.write_detection(os.path.join(out_dir, s.sample_id), result)
        written.append(paths["heat"])
    return written
