"""Tiny prefix language model: the instruction is a bidirectional prefix, the answer is causal."""
from typing import Optional

import torch
import torch.nn as nn

from fabgpt.core.errors import InputError
from fabgpt.models.modulation import PromptInstruction
from fabgpt.objectives import cross_entropy
from fabgpt.models.vocab import BOS_ID, EOS_ID, PAD_ID, Vocabulary


def prefix_lm_mask(prefix_len: int, answer_len: int) -> torch.Tensor:
    """Bool attention mask, True = blocked."""
    L = prefix_len + answer_len
    blocked = torch.zeros(L, L, dtype=torch.bool)
    blocked[:prefix_len, prefix_len:] = True
    causal = torch.triu(torch.ones(answer_len, answer_len, dtype=torch.bool), diagonal=1)
    blocked[prefix_len:, prefix_len:] = causal
    return blocked


class ToyLM(nn.Module):
    def __init__(self, vocab_size: int, dim: int, layers: int, heads: int, max_len: int):
        super().__init__()
        self.max_len = max_len
        self.embed = nn.Embedding(vocab_size, dim)
        self.pos = nn.Embedding(max_len, dim)
        self.blocks = nn.ModuleList(
            nn.TransformerEncoderLayer(dim, heads, dim_feedforward=4 * dim, dropout=0.0,
                                       batch_first=True, norm_first=True)
            for _ in range(layers)
        )
        self.norm = nn.LayerNorm(dim)
        nn.init.normal_(self.embed.weight, std=0.02)
        nn.init.normal_(self.pos.weight, std=0.02)

    @property
    def vocab_size(self) -> int:
        return self.embed.num_embeddings

    def forward(self, prefix: torch.Tensor, prefix_mask: torch.Tensor,
                answer_in: torch.Tensor, answer_mask: Optional[torch.Tensor] = None) -> torch.Tensor:
        """Logits B x T x V for every answer position."""
        P, T = prefix.shape[1], answer_in.shape[1]
        if P + T > self.max_len:
            raise InputError(f"sequence of {P + T} tokens exceeds the LM context of {self.max_len}")
        if answer_mask is None:
            answer_mask = torch.ones_like(answer_in, dtype=torch.bool)
        x = torch.cat([prefix, self.embed(answer_in)], dim=1)
        x = x + self.pos(torch.arange(P + T))
        blocked = prefix_lm_mask(P, T)
        padding = ~torch.cat([prefix_mask.bool(), answer_mask.bool()], dim=1)
        for blk in self.blocks:
            x = blk(x, src_mask=blocked, src_key_padding_mask=padding)
        h = self.norm(x[:, P:])
        return h @ self.embed.weight.T


def _check_ids(ids: torch.Tensor, vocab_size: int) -> None:
    if ids.numel() and (int(ids.min()) < 0 or int(ids.max()) >= vocab_size):
        raise InputError(f"token id outside vocabulary of size {vocab_size}")


def teacher_forcing(answer_ids: torch.Tensor):
    """(inputs, targets, valid) for answers padded with PAD and closed by EOS."""
    valid = answer_ids != PAD_ID
    bos = torch.full_like(answer_ids[:, :1], BOS_ID)
    inputs = torch.cat([bos, answer_ids[:, :-1]], dim=1)
    inputs = torch.where(valid, inputs, torch.full_like(inputs, PAD_ID))
    return inputs, answer_ids, valid


def lm_loss(instruction: PromptInstruction, answer_ids: torch.Tensor, lm: ToyLM) -> torch.Tensor:
    if answer_ids.dim() == 1:
        answer_ids = answer_ids[None]
    _check_ids(answer_ids, lm.vocab_size)
    valid = answer_ids != PAD_ID
    lengths = valid.sum(dim=1)
    if answer_ids.shape[1] == 0 or bool((lengths == 0).any()):
        raise InputError("answer must be non-empty")
    last = answer_ids.gather(1, (lengths - 1)[:, None])[:, 0]
    if bool((last != EOS_ID).any()):
        raise InputError("answer must end with EOS")
    inputs, targets, valid = teacher_forcing(answer_ids)
    logits = lm(instruction.tokens, instruction.mask, inputs, valid)
    return cross_entropy(logits[valid], targets[valid])


@torch.no_grad()
def answer(instruction: PromptInstruction, lm: ToyLM, vocab: Vocabulary, max_len: int) -> str:
    """Greedy decode of the first instruction in the batch."""
    if max_len <= 0:
        return ""
    prefix, mask = instruction.tokens[:1], instruction.mask[:1]
    max_len = min(max_len, lm.max_len - prefix.shape[1])
    ids = [BOS_ID]
    out = []
    for _ in range(max_len):
        logits = lm(prefix, mask, torch.tensor([ids], dtype=torch.long))
        nxt = int(logits[0, -1].argmax())
        if nxt == EOS_ID:
            break
        out.append(nxt)
        ids.append(nxt)
    return vocab.decode(out)
