"""
Modal enhancement: the prediction module (label-set classifier whose top
probability rescales the frozen features) and the two prompt experts.
"""
from dataclasses import dataclass
from typing import Optional, Tuple

import torch
import torch.nn as nn
import torch.nn.functional as F

from fabgpt.core.errors import InputError, ShapeError
from fabgpt.models.encoders import ClipBundle
from fabgpt.schemas.config import PMSimilarity

NORM_EPS = 1e-12


def safe_cosine(a: torch.Tensor, b: torch.Tensor, dim: int = -1) -> torch.Tensor:
    """Cosine along `dim`; 0 wherever either vector has norm below 1e-12."""
    a, b = torch.broadcast_tensors(a, b)
    na = torch.linalg.vector_norm(a, dim=dim)
    nb = torch.linalg.vector_norm(b, dim=dim)
    ok = (na >= NORM_EPS) & (nb >= NORM_EPS)
    denom = torch.where(ok, na * nb, torch.ones_like(na))
    cos = (a * b).sum(dim=dim) / denom
    return torch.where(ok, cos, torch.zeros_like(cos))


@dataclass
class PMOutput:
    scores: torch.Tensor        # B x C, the pre-softmax p
    probs: torch.Tensor         # B x C
    p_n: torch.Tensor           # B
    predicted: torch.Tensor     # B, index into the label set


class PredictionModule(nn.Module):
    def __init__(self, dim: int, pm_dim: Optional[int] = None,
                 similarity: PMSimilarity = PMSimilarity.linear_relu_cosine):
        super().__init__()
        pm_dim = pm_dim or dim
        self.similarity = PMSimilarity(similarity)
        self.proj = nn.Linear(dim, pm_dim)
        if self.similarity == PMSimilarity.bilinear:
            self.bilinear = nn.Parameter(torch.eye(pm_dim))

    def features(self, x: torch.Tensor) -> torch.Tensor:
        return F.relu(self.proj(x))

    def forward(self, v_img_clip: torch.Tensor, v_lab_clip: torch.Tensor) -> PMOutput:
        if v_img_clip.dim() == 2:
            v_img_clip = v_img_clip[None]
        if v_lab_clip.shape[0] < 2:
            raise InputError("label set needs at least two entries")
        if v_img_clip.shape[-1] != v_lab_clip.shape[-1] or v_img_clip.shape[-1] != self.proj.in_features:
            raise ShapeError(f"PM expects width {self.proj.in_features}, got "
                             f"{v_img_clip.shape[-1]} / {v_lab_clip.shape[-1]}")
        pooled = v_img_clip.mean(dim=1)                          # B x D
        if self.similarity == PMSimilarity.cosine:
            scores = safe_cosine(pooled[:, None], v_lab_clip[None])
        else:
            f_img, f_lab = self.features(pooled), self.features(v_lab_clip)
            if self.similarity == PMSimilarity.linear_relu_cosine:
                scores = safe_cosine(f_img[:, None], f_lab[None])
            elif self.similarity == PMSimilarity.matmul:
                scores = f_img @ f_lab.T
            else:
                scores = f_img @ self.bilinear @ f_lab.T
        probs = torch.softmax(scores, dim=-1)
        p_n, predicted = probs.max(dim=-1)
        return PMOutput(scores=scores, probs=probs, p_n=p_n, predicted=predicted)


def pm_predict(v_img_clip: torch.Tensor, v_lab_clip: torch.Tensor,
               pm: PredictionModule) -> Tuple[torch.Tensor, torch.Tensor, torch.Tensor]:
    out = pm(v_img_clip, v_lab_clip)
    return out.probs, out.p_n, out.predicted


def apply_confidence(p_n, v_img_clip: torch.Tensor, v_txt_clip: torch.Tensor) -> Tuple[torch.Tensor, torch.Tensor]:
    p = torch.as_tensor(p_n, dtype=v_img_clip.dtype)
    if p.dim() == 1 and v_img_clip.dim() == 3:
        p = p[:, None, None]
    return p * v_img_clip, p * v_txt_clip


class PromptExpert(nn.Module):
    def __init__(self, n_prompts: int, dim: int):
        super().__init__()
        if n_prompts < 1:
            raise InputError("an expert needs at least one prompt row")
        self.prompts = nn.Parameter(torch.zeros(n_prompts, dim))
        self.register_buffer("guide_snapshot", torch.zeros(n_prompts, dim))
        self.register_buffer("z", torch.zeros(n_prompts, dim))

    @torch.no_grad()
    def guide(self, v_clip: torch.Tensor, seed: int) -> "PromptExpert":
        """Initialise prompts as z ⊙ mean-pooled guidance features."""
        n, dim = self.prompts.shape
        pooled = v_clip.reshape(-1, v_clip.shape[-1]).mean(dim=0)
        if pooled.shape[0] != dim:
            raise ShapeError(f"guidance width {pooled.shape[0]} != expert width {dim}")
        gen = torch.Generator().manual_seed(int(seed))
        self.z.copy_(torch.randn(n, dim, generator=gen))
        self.prompts.copy_(self.z * pooled)
        self.guide_snapshot.copy_(self.prompts)
        return self


def init_expert(v_clip: torch.Tensor, n_prompts: int, seed: int) -> PromptExpert:
    return PromptExpert(n_prompts, v_clip.shape[-1]).guide(v_clip, seed)


def expert_branch_forward(expert: PromptExpert, v: torch.Tensor) -> torch.Tensor:
    if v.shape[-1] != expert.prompts.shape[-1]:
        raise ShapeError(f"expert width {expert.prompts.shape[-1]} != token width {v.shape[-1]}")
    if v.dim() == 2:
        return torch.cat([expert.prompts, v], dim=0)
    prompts = expert.prompts[None].expand(v.shape[0], -1, -1)
    return torch.cat([prompts, v], dim=1)


@dataclass
class EnhancedTokens:
    v_img: torch.Tensor
    v_txt: torch.Tensor
    t_img: torch.Tensor
    t_txt: torch.Tensor
    n_expert: int


class EnhancementStage(nn.Module):
    """PM + confidence scaling + both expert branches, each switchable off."""

    def __init__(self, dim: int, n_prompts: int, similarity: PMSimilarity,
                 use_pm: bool = True, use_experts: bool = True):
        super().__init__()
        self.use_pm = use_pm
        self.use_experts = use_experts
        self.pm = PredictionModule(dim, dim, similarity)
        self.visual_expert = PromptExpert(n_prompts, dim)
        self.text_expert = PromptExpert(n_prompts, dim)

    def forward(self, bundle: ClipBundle) -> Tuple[PMOutput, EnhancedTokens]:
        # PM still runs when disabled so its accuracy can be reported
        pm_out = self.pm(bundle.v_img_clip, bundle.v_lab_clip)
        if self.use_pm:
            v_img, v_txt = apply_confidence(pm_out.p_n, bundle.v_img_clip, bundle.v_txt_clip)
        else:
            v_img, v_txt = bundle.v_img_clip, bundle.v_txt_clip
        if self.use_experts:
            t_img = expert_branch_forward(self.visual_expert, v_img)
            t_txt = expert_branch_forward(self.text_expert, v_txt)
            n_expert = self.visual_expert.prompts.shape[0]
        else:
            t_img, t_txt, n_expert = v_img, v_txt, 0
        return pm_out, EnhancedTokens(v_img=v_img, v_txt=v_txt, t_img=t_img, t_txt=t_txt, n_expert=n_expert)
