"""Training objectives: focal, dice and cross-entropy terms and their weighted sum."""
import math
from typing import Optional, Union

import torch

from fabgpt.core.errors import InputError, NumericError
from fabgpt.schemas.config import LossConfig

EPS = 1e-7
Number = Union[float, torch.Tensor]


def focal_loss(p_correct: torch.Tensor, gamma: float = 2.0) -> torch.Tensor:
    if p_correct.numel() == 0:
        raise InputError("focal loss of an empty array")
    p = p_correct.clamp(min=EPS, max=1.0)
    weight = torch.ones_like(p) if gamma == 0 else (1.0 - p) ** gamma
    return -(weight * torch.log(p)).mean()


def detection_focal(probs: torch.Tensor, target: torch.Tensor, gamma: float = 2.0) -> torch.Tensor:
    """Focal loss over B x 2 x H x W probabilities against a B x H x W {0,1} mask."""
    y = target.to(probs.dtype)
    p_correct = probs[:, 1] * y + probs[:, 0] * (1.0 - y)
    return focal_loss(p_correct, gamma)


def dice_loss(y: torch.Tensor, y_hat: torch.Tensor) -> torch.Tensor:
    """
    −Σ(y·ŷ) / (Σy² + Σŷ² + ε) over the last two axes, averaged over any
    leading batch axis. No factor 2: a perfect match scores −0.5.
    """
    if y.shape != y_hat.shape:
        raise InputError(f"dice shapes differ: {tuple(y.shape)} vs {tuple(y_hat.shape)}")
    y_hat = y_hat.to(y.dtype)
    num = (y * y_hat).sum(dim=(-2, -1))
    den = (y * y).sum(dim=(-2, -1)) + (y_hat * y_hat).sum(dim=(-2, -1)) + EPS
    return -(num / den).mean()


def cross_entropy(scores: torch.Tensor, target: torch.Tensor, *, from_logits: bool = True) -> torch.Tensor:
    """
    Mean negative log-likelihood of `target` under `scores` (..., C).
    With from_logits=False the scores are probabilities, clamped at 1e-7.
    """
    target = torch.as_tensor(target, dtype=torch.long)
    if scores.dim() == 1:
        scores, target = scores[None], target.reshape(1)
    C = scores.shape[-1]
    if target.numel() == 0:
        raise InputError("cross entropy needs at least one target")
    if int(target.min()) < 0 or int(target.max()) >= C:
        raise InputError(f"target index out of range for {C} classes")
    if from_logits:
        logp = torch.log_softmax(scores, dim=-1)
    else:
        logp = torch.log(scores.clamp(min=EPS))
    picked = logp.reshape(-1, C).gather(1, target.reshape(-1, 1))
    return -picked.mean()


def _finite(value: Number) -> bool:
    if isinstance(value, torch.Tensor):
        return bool(torch.isfinite(value).all())
    return math.isfinite(value)


def total_loss(l_focal: Number, l_dice: Number, l_ce1: Number, l_ce2: Number,
               cfg: Optional[LossConfig] = None, *, l_gate: Number = 0.0,
               step: Optional[int] = None) -> Number:
    cfg = cfg or LossConfig()
    terms = (("focal", l_focal), ("dice", l_dice), ("ce1", l_ce1), ("ce2", l_ce2), ("gate", l_gate))
    for name, value in terms:
        if not _finite(value):
            raise NumericError(name, step)
    return (cfg.alpha * l_focal + cfg.beta * l_dice + cfg.delta * l_ce1
            + cfg.epsilon * l_ce2 + cfg.zeta * l_gate)
