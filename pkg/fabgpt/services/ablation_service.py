"""Train and evaluate switch variants of one config; one CSV row per variant."""
import os
from typing import Dict, List, Optional, Tuple

import pandas as pd

from fabgpt.core.errors import InputError
from fabgpt.repositories.dataset_repo import load_manifest, load_split
from fabgpt.schemas.config import InstructionFormat, PMSimilarity, RunConfig
from fabgpt.schemas.report import EvalReport
from fabgpt.schemas.run import RunStatus
from fabgpt.services import eval_service, run_service, train_service

SUITES = ("components", "pm", "instruction")


def suite_variants(suite: str) -> List[Tuple[str, Dict]]:
    """(variant name, ablation overrides) pairs; the first is the reference."""
    if suite == "components":
        return [
            ("full", {}),
            ("no_text_marks", {"use_text_marks": False}),
            ("no_pm", {"use_pm": False}),
            ("no_experts", {"use_experts": False}),
            ("no_pm_no_experts", {"use_pm": False, "use_experts": False}),
            ("no_qformer_stack", {"use_qformer_stack": False}),
            ("no_corrector", {"use_corrector": False}),
        ]
    if suite == "pm":
        return [(s.value, {"pm_similarity": s}) for s in PMSimilarity]
    if suite == "instruction":
        return [(f.value, {"instruction_format": f}) for f in InstructionFormat]
    raise InputError(f"unknown ablation suite '{suite}', expected one of {', '.join(SUITES)}")


def variant_config(cfg: RunConfig, overrides: Dict) -> RunConfig:
    return cfg.model_copy(update={"ablation": cfg.ablation.model_copy(update=overrides)})


def summary_row(name: str, report: EvalReport) -> Dict:
    row = {"variant": name, **report.average.model_dump(), "pm_accuracy": report.pm_accuracy}
    qa = report.qa
    row.update({
        "qa_overall": qa.overall if qa else None,
        "qa_defect": qa.defect_related if qa else None,
        "qa_unrelated": qa.unrelated if qa else None,
        "gate_defect": report.mean_gate.get("defect"),
        "gate_unrelated": report.mean_gate.get("unrelated"),
    })
    return row


def run_suite(cfg: RunConfig, data_root: str, out_dir: str, suite: str = "components",
              *, run_id: Optional[str] = None, max_steps: Optional[int] = None) -> pd.DataFrame:
    variants = suite_variants(suite)
    manifest = load_manifest(data_root)
    train = train_service.load_train_split(cfg, data_root)
    test = load_split(manifest, "test")
    rows = []
    for k, (name, overrides) in enumerate(variants):
        vcfg = variant_config(cfg, overrides)
        vdir = os.path.join(out_dir, name)
        if run_id:
            run_service.set_status(run_id, RunStatus.running, progress=k / len(variants), message=f"variant {name}")
        result = train_service.run_training(vcfg, data_root, os.path.join(vdir, "model.ckpt"),
                                            samples=train, max_steps=max_steps)
        pipeline, _ = train_service.load_pipeline(result.checkpoint_path)
        report, _ = eval_service.evaluate(pipeline, test, checkpoint_id=result.checkpoint_id)
        eval_service.write_report(report, os.path.join(vdir, "report.json"))
        rows.append(summary_row(name, report))
    table = pd.DataFrame(rows)
    os.makedirs(out_dir, exist_ok=True)
    table.to_csv(os.path.join(out_dir, f"ablation_{suite}.csv"), index=False, float_format="%.6f")
    return table
