"""
End-to-end model: frozen encoders -> enhancement -> detection -> modulation
-> prefix LM. Submodule names double as checkpoint namespaces.
"""
from dataclasses import dataclass
from typing import List, Optional, Sequence, Tuple

import torch
import torch.nn as nn

from fabgpt.core.seeding import derive_seed
from fabgpt.models.detection import DetectionStage, MaskTensor
from fabgpt.models.encoders import ClipBundle, FrozenEncoders
from fabgpt.models.enhancement import EnhancedTokens, EnhancementStage, PMOutput
from fabgpt.models.lm import ToyLM
from fabgpt.models.modulation import (
    ModulationOutput, ModulationStage, PromptInstruction, assemble_instruction,
)
from fabgpt.models.vocab import EOS_ID, PAD_ID, SEP_ID, Vocabulary
from fabgpt.schemas.config import InstructionFormat, ModelConfig, RunConfig
from fabgpt.schemas.dataset import LABEL_ORDER

LABEL_SET: List[str] = [label.text for label in LABEL_ORDER]
NAMESPACES = ("frozen", "enhancement", "detection", "modulation", "qa")


def prefix_capacity(m: ModelConfig, image_size: int) -> int:
    """Longest instruction any layout can produce."""
    g2 = (image_size // m.patch_size) ** 2
    n_e = m.n_expert_prompts
    return 2 * n_e + 2 * g2 + m.max_text_tokens + m.max_question_tokens


@dataclass
class PipelineOutput:
    bundle: ClipBundle
    pm: PMOutput
    tokens: EnhancedTokens
    mask: MaskTensor
    t_mas: torch.Tensor
    modulation: Optional[ModulationOutput]
    a: torch.Tensor                     # B, the gate actually applied
    a_raw: Optional[torch.Tensor]       # B, pre-clamp cosine when gated
    instruction: PromptInstruction


class FabPipeline(nn.Module):
    def __init__(self, cfg: RunConfig, vocab: Vocabulary):
        super().__init__()
        m, ab = cfg.model, cfg.ablation
        size = cfg.generation.height
        self.cfg = cfg
        self.vocab = vocab
        self.image_size = size
        self.grid = size // m.patch_size
        self.frozen = FrozenEncoders(vocab, size, m.patch_size, m.embed_dim, m.encoder_blocks,
                                     m.encoder_heads, m.max_text_tokens, m.encoder_seed)
        self.enhancement = EnhancementStage(m.embed_dim, m.n_expert_prompts, ab.pm_similarity,
                                            use_pm=ab.use_pm, use_experts=ab.use_experts)
        self.detection = DetectionStage(m.embed_dim, m.decoder_channels, self.grid)
        self.modulation = ModulationStage(m.embed_dim, m.llm_dim, size, m.patch_size,
                                          use_qformer_stack=ab.use_qformer_stack)
        max_len = prefix_capacity(m, size) + m.max_answer_tokens + 1
        self.qa = ToyLM(len(vocab), m.llm_dim, m.llm_layers, m.llm_heads, max_len)
        self.register_buffer("v_lab_clip", self.frozen.encode_labels(LABEL_SET), persistent=False)

    # ===== inputs =====
    @property
    def format(self) -> InstructionFormat:
        return self.cfg.ablation.instruction_format

    @property
    def gated(self) -> bool:
        return self.cfg.ablation.gated

    def trainable_parameters(self) -> List[nn.Parameter]:
        return [p for n, p in self.named_parameters() if not n.startswith("frozen.") and p.requires_grad]

    def question_ids(self, questions: Sequence[str]) -> Tuple[torch.Tensor, torch.Tensor]:
        """Questions close with SEP so the question block is never empty."""
        Q = self.cfg.model.max_question_tokens
        rows = [self.vocab.pad(self.vocab.encode(q)[: Q - 1] + [SEP_ID], Q) for q in questions]
        ids = torch.tensor(rows, dtype=torch.long)
        return ids, ids != PAD_ID

    def answer_ids(self, answers: Sequence[str]) -> torch.Tensor:
        T = self.cfg.model.max_answer_tokens
        rows = [self.vocab.pad(self.vocab.encode(a)[: T - 1] + [EOS_ID], T) for a in answers]
        return torch.tensor(rows, dtype=torch.long)

    def encode(self, images: torch.Tensor, texts: Sequence[str]) -> ClipBundle:
        if not self.cfg.ablation.use_text_marks:
            texts = [""] * len(texts)
        return self.frozen(images, texts, self.v_lab_clip)

    @torch.no_grad()
    def guide_experts(self, images: torch.Tensor, texts: Sequence[str]) -> None:
        """Initialise both experts from mean frozen features of a reference set."""
        bundle = self.encode(images, texts)
        seed = self.cfg.seed
        self.enhancement.visual_expert.guide(bundle.v_img_clip, derive_seed(seed, 0, "visual_expert"))
        self.enhancement.text_expert.guide(bundle.v_txt_clip, derive_seed(seed, 1, "text_expert"))

    # ===== forward =====
    def forward(self, images: torch.Tensor, texts: Sequence[str], q_ids: torch.Tensor,
                q_mask: torch.Tensor, force_gate: Optional[float] = None) -> PipelineOutput:
        bundle = self.encode(images, texts)
        pm_out, tokens = self.enhancement(bundle)
        mask, t_mas = self.detection(tokens.t_img, tokens.t_txt, tokens.n_expert)

        stage = self.modulation
        t_que = stage.que_adapter(self.qa.embed(q_ids))
        B = images.shape[0]
        fmt = self.format
        mod_out, a_raw = None, None
        a = torch.ones(B)
        kwargs = {}
        if fmt in (InstructionFormat.eq9_gated, InstructionFormat.vis_mas):
            mod_out = stage(tokens.t_img, t_mas, tokens.t_txt)
            kwargs["t_vis"] = mod_out.t_vis
            if self.gated:
                a, a_raw = stage.corrector(mod_out.t_vis, t_que, q_mask)
                if force_gate is not None:
                    a = torch.full_like(a, float(force_gate))
        if fmt in (InstructionFormat.eq9_gated, InstructionFormat.vis_mas, InstructionFormat.img_txt_mas):
            kwargs["t_mas"] = stage.mas_adapter(t_mas)
        if fmt == InstructionFormat.eq5_baseline:
            kwargs["x_tokens"] = stage.image_patches(images)
        if fmt != InstructionFormat.eq9_gated and fmt != InstructionFormat.vis_mas:
            kwargs["img_tokens"] = stage.img_adapter(tokens.t_img)
        if fmt in (InstructionFormat.img_txt, InstructionFormat.img_txt_mas):
            kwargs["txt_tokens"] = stage.txt_adapter(tokens.t_txt)
        kwargs.setdefault("t_vis", None)
        kwargs.setdefault("t_mas", None)
        instruction = assemble_instruction(a, t_que=t_que, format_tag=fmt, que_mask=q_mask, **kwargs)
        return PipelineOutput(bundle=bundle, pm=pm_out, tokens=tokens, mask=mask, t_mas=t_mas,
                              modulation=mod_out, a=a, a_raw=a_raw, instruction=instruction)

    @torch.no_grad()
    def refresh_label_embeddings(self) -> None:
        self.v_lab_clip.copy_(self.frozen.encode_labels(LABEL_SET))

    @torch.no_grad()
    def detect(self, images: torch.Tensor, texts: Sequence[str]) -> Tuple[PMOutput, MaskTensor]:
        """Enhancement and detection only; no question needed."""
        bundle = self.encode(images, texts)
        pm_out, tokens = self.enhancement(bundle)
        mask, _ = self.detection(tokens.t_img, tokens.t_txt, tokens.n_expert)
        return pm_out, mask
