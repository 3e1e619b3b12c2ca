"""Pixel-level detection head and the mask-to-token projector."""
import math
from dataclasses import dataclass
from typing import Sequence

import torch
import torch.nn as nn
import torch.nn.functional as F

from fabgpt.core.errors import ShapeError


@dataclass
class MaskTensor:
    logits: torch.Tensor        # B x 2 x H x W
    probs: torch.Tensor         # B x 2 x H x W, channel 1 = defect
    binary: torch.Tensor        # B x H x W, long
    anomaly_map: torch.Tensor   # B x H x W


def masks_from_logits(logits: torch.Tensor) -> MaskTensor:
    probs = torch.softmax(logits, dim=1)
    # strict comparison: a 0.5/0.5 pixel is normal
    binary = (probs[:, 1] > probs[:, 0]).long()
    return MaskTensor(logits=logits, probs=probs, binary=binary, anomaly_map=probs[:, 1])


class DetectionHead(nn.Module):
    def __init__(self, dim: int, channels: Sequence[int]):
        super().__init__()
        stages = []
        prev = dim
        for c in channels:
            stages.append(nn.Sequential(
                nn.Upsample(scale_factor=2, mode="nearest"),
                nn.Conv2d(prev, c, kernel_size=3, padding=1),
                nn.ReLU(),
            ))
            prev = c
        self.stages = nn.ModuleList(stages)
        self.out = nn.Conv2d(prev, 2, kernel_size=1)

    @staticmethod
    def fuse(t_img: torch.Tensor, t_txt: torch.Tensor) -> torch.Tensor:
        """Scale every image token by its mean similarity to the text tokens."""
        if t_img.shape[-1] != t_txt.shape[-1]:
            raise ShapeError(f"t_img width {t_img.shape[-1]} != t_txt width {t_txt.shape[-1]}")
        s = t_img @ t_txt.transpose(-1, -2)
        return t_img * s.mean(dim=-1, keepdim=True)

    def decode_logits(self, t_img: torch.Tensor, t_txt: torch.Tensor, n_expert: int) -> torch.Tensor:
        if t_img.dim() == 2:
            t_img, t_txt = t_img[None], t_txt[None]
        fused = self.fuse(t_img, t_txt)[:, n_expert:]            # B x g² x D
        n = fused.shape[1]
        g = math.isqrt(n)
        if g * g != n or n == 0:
            raise ShapeError(f"{n} grid tokens do not form a square latent grid")
        x = fused.transpose(1, 2).reshape(fused.shape[0], -1, g, g)
        for stage in self.stages:
            x = stage(x)
        return self.out(x)

    def forward(self, t_img: torch.Tensor, t_txt: torch.Tensor, n_expert: int) -> MaskTensor:
        return masks_from_logits(self.decode_logits(t_img, t_txt, n_expert))


def detect(t_img: torch.Tensor, t_txt: torch.Tensor, head: DetectionHead, n_expert: int = 0) -> MaskTensor:
    return head(t_img, t_txt, n_expert)


class MaskProjector(nn.Module):
    def __init__(self, dim: int, grid: int):
        super().__init__()
        self.grid = grid
        self.proj = nn.Linear(1, dim)

    def forward(self, anomaly_map: torch.Tensor) -> torch.Tensor:
        if anomaly_map.dim() == 2:
            return self.forward(anomaly_map[None])[0]
        pooled = F.adaptive_avg_pool2d(anomaly_map[:, None], self.grid)   # B x 1 x g x g
        return self.proj(pooled.flatten(1)[..., None])                     # B x g² x D


def project_mask(mask: MaskTensor, projector: MaskProjector) -> torch.Tensor:
    return projector(mask.anomaly_map)


class DetectionStage(nn.Module):
    def __init__(self, dim: int, channels: Sequence[int], grid: int):
        super().__init__()
        self.head = DetectionHead(dim, channels)
        self.projector = MaskProjector(dim, grid)

    def forward(self, t_img: torch.Tensor, t_txt: torch.Tensor, n_expert: int):
        mask = self.head(t_img, t_txt, n_expert)
        return mask, self.projector(mask.anomaly_map)
