import enum
import json
import math
from pathlib import Path
from typing import Dict, List, Literal, Optional

from pydantic import BaseModel, ConfigDict, Field, ValidationError

from fabgpt.core.config import settings
from fabgpt.core.errors import ConfigurationError
from fabgpt.schemas.dataset import DefectLabel

CONFIG_VERSION = 1


class _Strict(BaseModel):
    model_config = ConfigDict(extra="forbid")


class GenerationConfig(_Strict):
    height: int = 64
    width: int = 64
    # desk default: the SEM-WaD class proportions divided by 5
    counts: Dict[DefectLabel, int] = Field(default_factory=lambda: {
        DefectLabel.good: 246,
        DefectLabel.hole: 50,
        DefectLabel.particle: 100,
        DefectLabel.pattern_deformation: 50,
        DefectLabel.scratch: 36,
    })
    train_ratio: float = Field(0.7, gt=0.0, lt=1.0)
    min_defect_pixels: int = Field(8, ge=1)
    max_defect_pixels: int = Field(256, ge=1)
    noise_std: float = Field(0.03, ge=0.0)
    workers: int = Field(1, ge=1)


class ModelConfig(_Strict):
    embed_dim: int = Field(64, ge=4)
    patch_size: int = 16
    max_text_tokens: int = Field(16, ge=1)
    encoder_blocks: int = Field(2, ge=1)
    encoder_heads: int = Field(4, ge=1)
    encoder_seed: int = 1234
    n_expert_prompts: int = Field(4, ge=1)
    decoder_channels: List[int] = Field(default_factory=lambda: [32, 32, 16, 16])
    llm_dim: int = Field(64, ge=4)
    llm_layers: int = Field(2, ge=1)
    llm_heads: int = Field(4, ge=1)
    max_question_tokens: int = Field(16, ge=1)
    max_answer_tokens: int = Field(24, ge=2)
    max_vocab: int = Field(1024, ge=16)


class LossConfig(_Strict):
    gamma: float = Field(2.0, ge=0.0)
    alpha: float = Field(1.0, ge=0.0)
    beta: float = Field(1.0, ge=0.0)
    delta: float = Field(1.0, ge=0.0)
    epsilon: float = Field(1.0, ge=0.0)
    # gate relevance term; 0 gives the plain four-term objective
    zeta: float = Field(1.0, ge=0.0)


class TrainConfig(_Strict):
    lr_init: float = Field(1e-4, gt=0.0)
    lr_final: float = Field(1e-6, ge=0.0)
    beta1: float = Field(0.9, ge=0.0, lt=1.0)
    beta2: float = Field(0.999, ge=0.0, lt=1.0)
    weight_decay: float = Field(0.01, ge=0.0)
    batch_size: int = Field(8, ge=1)
    epochs: int = Field(10, ge=0)


class PMSimilarity(str, enum.Enum):
    linear_relu_cosine = "linear_relu_cosine"
    cosine = "cosine"
    matmul = "matmul"
    bilinear = "bilinear"


class InstructionFormat(str, enum.Enum):
    img = "img"
    img_txt = "img_txt"
    img_txt_mas = "img_txt_mas"
    vis_mas = "vis_mas"
    eq9_gated = "eq9_gated"
    eq5_baseline = "eq5_baseline"


class AblationConfig(_Strict):
    use_text_marks: bool = True
    use_pm: bool = True
    pm_similarity: PMSimilarity = PMSimilarity.linear_relu_cosine
    use_experts: bool = True
    use_qformer_stack: bool = True
    use_corrector: bool = True
    instruction_format: InstructionFormat = InstructionFormat.eq9_gated

    @property
    def gated(self) -> bool:
        return self.use_corrector and self.instruction_format == InstructionFormat.eq9_gated


class RunConfig(_Strict):
    version: Literal[1] = CONFIG_VERSION
    seed: int = Field(0, ge=0)
    generation: GenerationConfig = Field(default_factory=GenerationConfig)
    model: ModelConfig = Field(default_factory=ModelConfig)
    loss: LossConfig = Field(default_factory=LossConfig)
    train: TrainConfig = Field(default_factory=TrainConfig)
    ablation: AblationConfig = Field(default_factory=AblationConfig)

    def echo(self) -> Dict:
        """Effective config as written into every artifact."""
        return self.model_dump(mode="json")


def check_semantics(cfg: RunConfig) -> RunConfig:
    g, m, t = cfg.generation, cfg.model, cfg.train
    if g.height % 16 or g.width % 16 or g.height <= 0 or g.width <= 0:
        raise ConfigurationError(f"generation.height/width must be positive multiples of 16, got {g.height}x{g.width}")
    if g.min_defect_pixels > g.max_defect_pixels:
        raise ConfigurationError("generation.min_defect_pixels exceeds generation.max_defect_pixels")
    ps = m.patch_size
    if ps < 2 or ps & (ps - 1):
        raise ConfigurationError(f"model.patch_size must be a power of two, got {ps}")
    if g.height % ps or g.width % ps:
        raise ConfigurationError(f"image {g.height}x{g.width} is not divisible by model.patch_size={ps}")
    if g.height != g.width:
        raise ConfigurationError("detection decodes a square latent grid; height must equal width")
    if len(m.decoder_channels) != int(math.log2(ps)):
        raise ConfigurationError(
            f"model.decoder_channels needs {int(math.log2(ps))} stages for patch_size={ps}, got {len(m.decoder_channels)}")
    if m.embed_dim % m.encoder_heads or m.llm_dim % m.llm_heads:
        raise ConfigurationError("embedding widths must be divisible by their head counts")
    if t.lr_final > t.lr_init:
        raise ConfigurationError("train.lr_final must not exceed train.lr_init")
    return cfg


def describe_validation_error(exc: ValidationError) -> str:
    parts = []
    for e in exc.errors():
        key = ".".join(str(p) for p in e.get("loc", ()))
        parts.append(f"{key}: {e.get('msg')}")
    return "invalid config: " + "; ".join(parts)


def load_run_config(path: Optional[str] = None, *, seed: Optional[int] = None) -> RunConfig:
    """
    Read a RunConfig document (defaults when path is None), then apply seed
    overrides: explicit `seed` argument first, FABGPT_SEED second.
    """
    data: Dict = {}
    if path:
        try:
            with open(path, "r") as f:
                data = json.load(f)
        except OSError as e:
            raise ConfigurationError(f"cannot read config {path}: {e}")
        except json.JSONDecodeError as e:
            raise ConfigurationError(f"config {path} is not valid JSON: {e}")
        if not isinstance(data, dict):
            raise ConfigurationError(f"config {path} must hold a JSON object")
    try:
        cfg = RunConfig.model_validate(data)
    except ValidationError as e:
        raise ConfigurationError(describe_validation_error(e))
    env_seed = settings.reload().SEED
    if seed is not None:
        cfg = cfg.model_copy(update={"seed": seed})
    elif env_seed is not None:
        cfg = cfg.model_copy(update={"seed": env_seed})
    return check_semantics(cfg)


def default_config_path() -> Path:
    return Path(settings.ASSET_DIR) / "default_config.json"
