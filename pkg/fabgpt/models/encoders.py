"""
Frozen stand-ins for the pre-trained image and text encoders.

Weights are drawn once from a fixed seed and never trained; any fixed feature
map is enough for the prediction module, prompt experts and modulation to
work on top of.
"""
import math
from dataclasses import dataclass
from typing import List, Sequence, Union

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from fabgpt.core.errors import InputError, ShapeError
from fabgpt.models.vocab import PAD_ID, Vocabulary


@dataclass
class ClipBundle:
    v_img_clip: torch.Tensor    # B x N_v x D
    v_txt_clip: torch.Tensor    # B x N_t x D
    v_lab_clip: torch.Tensor    # C x D, rows L2-normalised


def freeze(module: nn.Module) -> nn.Module:
    for p in module.parameters():
        p.requires_grad_(False)
    module.eval()
    return module


def sinusoidal_positions(n: int, dim: int) -> torch.Tensor:
    pos = torch.arange(n, dtype=torch.float32)[:, None]
    div = torch.exp(torch.arange(0, dim, 2, dtype=torch.float32) * (-math.log(10000.0) / dim))
    pe = torch.zeros(n, dim)
    pe[:, 0::2] = torch.sin(pos * div)
    pe[:, 1::2] = torch.cos(pos * div)[:, : dim // 2]
    return pe


def _block(dim: int, heads: int) -> nn.TransformerEncoderLayer:
    return nn.TransformerEncoderLayer(dim, heads, dim_feedforward=2 * dim, dropout=0.0,
                                      batch_first=True, norm_first=True)


class _Frozen(nn.Module):
    def train(self, mode: bool = True):
        # stays in eval mode whatever the parent does
        return super().train(False)


class FrozenImageEncoder(_Frozen):
    def __init__(self, image_size: int, patch_size: int, dim: int, blocks: int, heads: int, seed: int):
        super().__init__()
        self.image_size = image_size
        self.patch_size = patch_size
        self.n_tokens = (image_size // patch_size) ** 2
        with torch.random.fork_rng(devices=[]):
            torch.manual_seed(seed)
            self.patch = nn.Conv2d(1, dim, patch_size, stride=patch_size)
            self.pos = nn.Parameter(torch.randn(1, self.n_tokens, dim) * 0.02)
            self.blocks = nn.ModuleList(_block(dim, heads) for _ in range(blocks))
            self.norm = nn.LayerNorm(dim)
        freeze(self)

    def forward(self, images: torch.Tensor) -> torch.Tensor:
        if images.dim() != 3 or images.shape[1:] != (self.image_size, self.image_size):
            raise ShapeError(f"expected B x {self.image_size} x {self.image_size} images, got {tuple(images.shape)}")
        x = self.patch((images[:, None] - 0.5) * 2.0)       # B x D x g x g
        x = x.flatten(2).transpose(1, 2) + self.pos          # B x N_v x D
        for blk in self.blocks:
            x = blk(x)
        return self.norm(x)


class FrozenTextEncoder(_Frozen):
    def __init__(self, vocab_size: int, dim: int, heads: int, max_tokens: int, seed: int):
        super().__init__()
        self.max_tokens = max_tokens
        with torch.random.fork_rng(devices=[]):
            torch.manual_seed(seed + 1)
            self.embed = nn.Embedding(vocab_size, dim)
            self.block = _block(dim, heads)
        self.register_buffer("pe", sinusoidal_positions(max_tokens, dim), persistent=False)
        freeze(self)

    def forward(self, ids: torch.Tensor) -> torch.Tensor:
        pad = ids == PAD_ID                                  # B x T
        x = self.embed(ids) + self.pe[: ids.shape[1]]
        # an all-pad row would mask every key; let it attend, it is overwritten below
        key_mask = pad & ~pad.all(dim=1, keepdim=True)
        x = self.block(x, src_key_padding_mask=key_mask)
        pad_row = self.embed.weight[PAD_ID].expand_as(x)
        return torch.where(pad[..., None], pad_row, x)


class FrozenEncoders(_Frozen):
    """Image encoder, text encoder and label-set encoding over one shared vocabulary."""

    def __init__(self, vocab: Vocabulary, image_size: int, patch_size: int, dim: int,
                 blocks: int, heads: int, max_text_tokens: int, seed: int):
        super().__init__()
        self.vocab = vocab
        self.dim = dim
        self.image = FrozenImageEncoder(image_size, patch_size, dim, blocks, heads, seed)
        self.text = FrozenTextEncoder(len(vocab), dim, heads, max_text_tokens, seed)

    def text_ids(self, texts: Sequence[str]) -> torch.Tensor:
        T = self.text.max_tokens
        return torch.tensor([self.vocab.pad(self.vocab.encode(t), T) for t in texts], dtype=torch.long)

    @torch.no_grad()
    def encode_image(self, image: Union[np.ndarray, torch.Tensor]) -> torch.Tensor:
        x = torch.as_tensor(np.asarray(image, dtype=np.float32) if isinstance(image, np.ndarray) else image,
                            dtype=torch.float32)
        if x.dim() != 2:
            raise ShapeError(f"expected an H x W image, got shape {tuple(x.shape)}")
        if not torch.isfinite(x).all() or x.min() < 0.0 or x.max() > 1.0:
            raise InputError("image values must lie in [0, 1]")
        return self.image(x[None])[0]

    @torch.no_grad()
    def encode_text(self, text: str) -> torch.Tensor:
        return self.text(self.text_ids([text]))[0]

    @torch.no_grad()
    def encode_labels(self, label_set: Sequence[str]) -> torch.Tensor:
        labels: List[str] = list(label_set)
        if len(labels) < 2:
            raise InputError("label set needs at least two entries")
        if len(set(labels)) != len(labels):
            raise InputError(f"duplicate labels in label set: {labels}")
        rows = []
        for lab in labels:
            ids = self.vocab.encode(lab) or [PAD_ID]
            rows.append(self.text.embed.weight[ids].mean(dim=0))
        return F.normalize(torch.stack(rows), dim=-1)

    @torch.no_grad()
    def forward(self, images: torch.Tensor, texts: Sequence[str], v_lab_clip: torch.Tensor) -> ClipBundle:
        return ClipBundle(
            v_img_clip=self.image(images),
            v_txt_clip=self.text(self.text_ids(texts)),
            v_lab_clip=v_lab_clip,
        )
