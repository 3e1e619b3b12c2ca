import pytest

from fabgpt.core.config import settings
from fabgpt.schemas.config import RunConfig, check_semantics


def pytest_collection_modifyitems(config, items):
    if settings.RUN_SLOW_TESTS:
        return
    skip = pytest.mark.skip(reason="slow end-to-end run; set FABGPT_RUN_SLOW=1")
    for item in items:
        if "slow" in item.keywords:
            item.add_marker(skip)


TINY = {
    "seed": 3,
    "generation": {
        "height": 32, "width": 32,
        "counts": {"good": 4, "hole": 2, "particle": 2, "scratch": 2, "pattern_deformation": 2},
        "min_defect_pixels": 4, "max_defect_pixels": 200,
    },
    "model": {
        "embed_dim": 16, "encoder_blocks": 1, "encoder_heads": 2, "n_expert_prompts": 2,
        "decoder_channels": [8, 8, 8, 8], "llm_dim": 16, "llm_layers": 1, "llm_heads": 2,
        "max_text_tokens": 8,
    },
    "train": {"batch_size": 4, "epochs": 1},
}


@pytest.fixture(autouse=True)
def _no_env_seed(monkeypatch):
    monkeypatch.delenv("FABGPT_SEED", raising=False)
    settings.reload()


@pytest.fixture
def tiny_cfg() -> RunConfig:
    return check_semantics(RunConfig.model_validate(TINY))


@pytest.fixture
def tiny_config_file(tmp_path):
    import json
    path = tmp_path / "tiny.json"
    path.write_text(json.dumps(TINY))
    return str(path)


@pytest.fixture
def tiny_dataset(tmp_path, tiny_cfg):
    from fabgpt.services.synth_service import generate_dataset
    root = tmp_path / "data"
    generate_dataset(tiny_cfg.generation, str(root), tiny_cfg.seed)
    return str(root)


@pytest.fixture
def tiny_vocab():
    from fabgpt.services.corpus_service import build_vocabulary, default_corpora
    templates, a, b = default_corpora()
    return build_vocabulary(a, b, templates)


@pytest.fixture
def tiny_pipeline(tiny_cfg, tiny_vocab):
    import torch
    from fabgpt.models.pipeline import FabPipeline
    torch.manual_seed(0)
    return FabPipeline(tiny_cfg, tiny_vocab)


@pytest.fixture(scope="session")
def tiny_workspace(tmp_path_factory):
    """A generated tiny dataset plus a checkpoint trained through the CLI."""
    import json
    from fabgpt.cli import main
    root = tmp_path_factory.mktemp("workspace")
    config = root / "tiny.json"
    config.write_text(json.dumps(TINY))
    data, ckpt = root / "data", root / "run" / "model.ckpt"
    assert main(["gen", "--config", str(config), "--out", str(data), "--seed", "3"]) == 0
    assert main(["train", "--config", str(config), "--data", str(data), "--out", str(ckpt), "--seed", "3"]) == 0
    return {"root": root, "config": str(config), "data": str(data), "ckpt": str(ckpt)}
