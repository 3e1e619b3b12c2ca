"""
Alignment between visual tokens, mask tokens and the question: the
self/cross attention stack, the FFN lift to LM width, the relevance gate,
and instruction assembly for every supported prompt layout.
"""
import math
from dataclasses import dataclass
from typing import List, Optional, Tuple

import torch
import torch.nn as nn
import torch.nn.functional as F

from fabgpt.core.errors import InputError, ShapeError
from fabgpt.models.enhancement import safe_cosine
from fabgpt.schemas.config import InstructionFormat


def _batched(x: torch.Tensor) -> Tuple[torch.Tensor, bool]:
    return (x[None], True) if x.dim() == 2 else (x, False)


def match_rows(t_mas: torch.Tensor, n_rows: int) -> torch.Tensor:
    """Zero-pad t_mas at the front (expert positions) or keep its last n_rows."""
    n = t_mas.shape[-2]
    if n == n_rows:
        return t_mas
    if n > n_rows:
        return t_mas[..., n - n_rows:, :]
    return F.pad(t_mas, (0, 0, n_rows - n, 0))


class ModulationModule(nn.Module):
    def __init__(self, dim: int, llm_dim: int, d_k: Optional[int] = None):
        super().__init__()
        self.d_k = d_k or dim
        self.k1 = nn.Conv1d(dim, self.d_k, kernel_size=1, bias=False)
        self.k2 = nn.Conv1d(dim, self.d_k, kernel_size=1, bias=False)
        self.ffn = nn.Sequential(nn.Linear(dim, 4 * dim), nn.GELU(), nn.Linear(4 * dim, llm_dim))

    @staticmethod
    def _conv(x: torch.Tensor, conv: nn.Conv1d) -> torch.Tensor:
        return conv(x.transpose(1, 2)).transpose(1, 2)

    def attention(self, q: torch.Tensor, k: torch.Tensor) -> torch.Tensor:
        if q.shape[-1] != self.k1.in_channels or k.shape[-1] != self.k2.in_channels:
            raise ShapeError(f"attention expects width {self.k1.in_channels}, got {q.shape[-1]} / {k.shape[-1]}")
        s = self._conv(q, self.k1) @ self._conv(k, self.k2).transpose(1, 2)
        return torch.softmax(s / math.sqrt(self.d_k), dim=-1)


def bidirectional_self_attention(t_img: torch.Tensor, t_mas: torch.Tensor,
                                 mod: ModulationModule) -> Tuple[torch.Tensor, torch.Tensor, torch.Tensor]:
    """Returns (f_im, M_img, M_mak)."""
    t_img, single = _batched(t_img)
    t_mas, _ = _batched(t_mas)
    if t_img.shape[-1] != t_mas.shape[-1]:
        raise ShapeError(f"t_img width {t_img.shape[-1]} != t_mas width {t_mas.shape[-1]}")
    t_mas = match_rows(t_mas, t_img.shape[1])
    m_img = mod.attention(t_img, t_img)
    m_mak = mod.attention(t_mas, t_mas)
    f_im = ((m_img + m_mak) / 2) @ t_img
    if single:
        return f_im[0], m_img[0], m_mak[0]
    return f_im, m_img, m_mak


def cross_attention(f_im: torch.Tensor, t_txt: torch.Tensor,
                    mod: ModulationModule) -> Tuple[torch.Tensor, torch.Tensor]:
    """Returns (f_imt, M_cross)."""
    f_im, single = _batched(f_im)
    t_txt, _ = _batched(t_txt)
    if f_im.shape[-1] != t_txt.shape[-1]:
        raise ShapeError(f"f_im width {f_im.shape[-1]} != t_txt width {t_txt.shape[-1]}")
    m = mod.attention(f_im, t_txt)
    f_imt = m @ t_txt
    return (f_imt[0], m[0]) if single else (f_imt, m)


def ffn_project(f_imt: torch.Tensor, mod: ModulationModule) -> torch.Tensor:
    return mod.ffn(f_imt)


class Corrector(nn.Module):
    """Generates the gate vector from pooled visual tokens."""

    def __init__(self, llm_dim: int):
        super().__init__()
        self.gen = nn.Linear(llm_dim, llm_dim)

    def forward(self, t_vis: torch.Tensor, t_que: torch.Tensor,
                que_mask: Optional[torch.Tensor] = None) -> Tuple[torch.Tensor, torch.Tensor]:
        """Returns (a, a_raw)."""
        t_vis, single = _batched(t_vis)
        t_que, _ = _batched(t_que)
        if t_que.shape[1] == 0:
            raise InputError("question block is empty")
        if que_mask is None:
            q = t_que.mean(dim=1)
        else:
            w = que_mask.to(t_que.dtype)[..., None]
            q = (t_que * w).sum(dim=1) / w.sum(dim=1).clamp_min(1.0)
        f_c = self.gen(t_vis.mean(dim=1))
        a_raw = safe_cosine(f_c, q)
        a = a_raw.clamp(0.0, 1.0)
        return (a[0], a_raw[0]) if single else (a, a_raw)


def compute_gate(t_vis: torch.Tensor, t_que: torch.Tensor, corrector: Corrector) -> torch.Tensor:
    return corrector(t_vis, t_que)[0]


@dataclass
class PromptInstruction:
    tokens: torch.Tensor                        # B x L x D_llm
    mask: torch.Tensor                          # B x L, True = real token
    block_spans: List[Tuple[str, int, int]]     # (block name, start, end)
    format_tag: InstructionFormat
    gate: Optional[torch.Tensor] = None         # B, None when ungated


_LAYOUTS = {
    InstructionFormat.eq9_gated: ("vis", "mas", "que"),
    InstructionFormat.vis_mas: ("vis", "mas", "que"),
    InstructionFormat.eq5_baseline: ("x", "img", "que"),
    InstructionFormat.img: ("img", "que"),
    InstructionFormat.img_txt: ("img", "txt", "que"),
    InstructionFormat.img_txt_mas: ("img", "txt", "mas", "que"),
}


def assemble_instruction(a, t_vis: Optional[torch.Tensor], t_mas: Optional[torch.Tensor],
                         t_que: torch.Tensor, format_tag=InstructionFormat.eq9_gated, *,
                         que_mask: Optional[torch.Tensor] = None,
                         x_tokens: Optional[torch.Tensor] = None,
                         img_tokens: Optional[torch.Tensor] = None,
                         txt_tokens: Optional[torch.Tensor] = None) -> PromptInstruction:
    """
    Concatenate adapted blocks into the LM prefix.

    Only eq9_gated applies `a` (to the visual block); every other layout
    ignores it. Blocks must already be at LM width.
    """
    fmt = InstructionFormat(format_tag)
    t_que, _ = _batched(t_que)
    B, width = t_que.shape[0], t_que.shape[-1]
    gate = None
    if fmt == InstructionFormat.eq9_gated and t_vis is not None:
        gate = torch.as_tensor(a, dtype=t_que.dtype).reshape(-1).expand(B)
    available = {"vis": t_vis, "mas": t_mas, "x": x_tokens, "img": img_tokens, "txt": txt_tokens, "que": t_que}
    blocks, masks, spans, start = [], [], [], 0
    for name in _LAYOUTS[fmt]:
        block = available[name]
        if block is None:
            raise InputError(f"instruction format '{fmt.value}' needs the '{name}' block")
        block = block[None] if block.dim() == 2 else block
        if block.shape[-1] != width:
            raise ShapeError(f"block '{name}' has width {block.shape[-1]}, expected {width}")
        if name == "vis" and gate is not None:
            block = gate[:, None, None] * block
        if name == "que" and que_mask is not None:
            m = que_mask[None] if que_mask.dim() == 1 else que_mask
        else:
            m = torch.ones(block.shape[:2], dtype=torch.bool)
        blocks.append(block)
        masks.append(m.bool())
        spans.append((name, start, start + block.shape[1]))
        start += block.shape[1]
    tokens = torch.cat(blocks, dim=1)
    mask = torch.cat(masks, dim=1)
    return PromptInstruction(tokens=tokens, mask=mask, block_spans=spans, format_tag=fmt, gate=gate)


@dataclass
class ModulationOutput:
    f_im: torch.Tensor
    f_imt: torch.Tensor
    t_vis: torch.Tensor
    m_img: torch.Tensor
    m_mak: torch.Tensor
    m_cross: torch.Tensor


class ModulationStage(nn.Module):
    """Attention stack, corrector and the adapters that bring blocks to LM width."""

    def __init__(self, dim: int, llm_dim: int, image_size: int, patch_size: int,
                 use_qformer_stack: bool = True):
        super().__init__()
        self.use_qformer_stack = use_qformer_stack
        self.module = ModulationModule(dim, llm_dim)
        self.corrector = Corrector(llm_dim)
        self.mas_adapter = nn.Linear(dim, llm_dim)
        self.que_adapter = nn.Linear(llm_dim, llm_dim)
        self.img_adapter = nn.Linear(dim, llm_dim)
        self.txt_adapter = nn.Linear(dim, llm_dim)
        self.patch_embed = nn.Conv2d(1, llm_dim, kernel_size=patch_size, stride=patch_size)

    def forward(self, t_img: torch.Tensor, t_mas: torch.Tensor, t_txt: torch.Tensor) -> ModulationOutput:
        if self.use_qformer_stack:
            f_im, m_img, m_mak = bidirectional_self_attention(t_img, t_mas, self.module)
            f_imt, m_cross = cross_attention(f_im, t_txt, self.module)
        else:
            # stack removed: visual tokens go straight to the FFN
            f_im = f_imt = t_img
            m_img = m_mak = m_cross = torch.empty(0)
        return ModulationOutput(f_im=f_im, f_imt=f_imt, t_vis=ffn_project(f_imt, self.module),
                                m_img=m_img, m_mak=m_mak, m_cross=m_cross)

    def image_patches(self, images: torch.Tensor) -> torch.Tensor:
        x = self.patch_embed((images[:, None] - 0.5) * 2.0)
        return x.flatten(2).transpose(1, 2)
