"""Full desk-scale runs on the default config; opt in with FABGPT_RUN_SLOW=1."""
import pytest

from fabgpt.repositories.dataset_repo import load_manifest, load_split
from fabgpt.schemas.config import InstructionFormat, RunConfig, check_semantics
from fabgpt.services import eval_service, train_service
from fabgpt.services.ablation_service import variant_config
from fabgpt.services.synth_service import generate_dataset

pytestmark = pytest.mark.slow


@pytest.fixture(scope="module")
def default_run(tmp_path_factory):
    root = tmp_path_factory.mktemp("desk")
    cfg = check_semantics(RunConfig(seed=0))
    generate_dataset(cfg.generation, str(root / "data"), cfg.seed)
    result = train_service.run_training(cfg, str(root / "data"), str(root / "full" / "model.ckpt"))
    pipeline, state = train_service.load_pipeline(result.checkpoint_path)
    test = load_split(load_manifest(str(root / "data")), "test")
    report, _ = eval_service.evaluate(pipeline, test, checkpoint_id=state.checkpoint_id)
    return {"root": root, "cfg": cfg, "result": result, "report": report, "test": test}


def _variant(default_run, name, overrides):
    root, cfg = default_run["root"], default_run["cfg"]
    vcfg = variant_config(cfg, overrides)
    result = train_service.run_training(vcfg, str(root / "data"), str(root / name / "model.ckpt"))
    pipeline, _ = train_service.load_pipeline(result.checkpoint_path)
    report, _ = eval_service.evaluate(pipeline, default_run["test"], with_qa=name == "baseline")
    return report


def test_detection_thresholds(default_run):
    report = default_run["report"]
    assert report.average.image_auc >= 0.95
    assert report.average.pixel_auc >= 0.90
    assert report.pm_accuracy >= 0.95


def test_gated_qa(default_run):
    qa = default_run["report"].qa
    assert qa.unrelated >= 90.0
    assert qa.defect_related >= 85.0
    assert default_run["report"].mean_gate["unrelated"] < 0.5


def test_schedule_of_full_run(default_run):
    tags = default_run["result"].tags
    assert tags == ["B" if i % 3 == 2 else "A" for i in range(len(tags))]


def test_ungated_baseline_loses_unrelated_accuracy(default_run):
    report = _variant(default_run, "baseline", {"use_corrector": False,
                                                "instruction_format": InstructionFormat.eq5_baseline})
    assert report.qa.unrelated <= default_run["report"].qa.unrelated - 30.0


def test_pm_and_experts_help_pixel_auc(default_run):
    report = _variant(default_run, "no_pm_no_experts", {"use_pm": False, "use_experts": False})
    assert report.average.pixel_auc <= default_run["report"].average.pixel_auc


def test_rerun_is_identical(default_run):
    root, cfg = default_run["root"], default_run["cfg"]
    result = train_service.run_training(cfg, str(root / "data"), str(root / "again" / "model.ckpt"))
    assert result.checkpoint_id == default_run["result"].checkpoint_id
    pipeline, state = train_service.load_pipeline(result.checkpoint_path)
    report, _ = eval_service.evaluate(pipeline, default_run["test"], checkpoint_id=state.checkpoint_id)
    keep = lambda r: r.model_dump(exclude={"timestamp"})
    assert keep(report) == keep(default_run["report"])
