"""
Joint training of every trainable module under the combined objective,
alternating Corpus-A and Corpus-B batches in an A, A, B pattern.
"""
import math
import os
from dataclasses import dataclass, field
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np
import torch
from pydantic import ValidationError

from fabgpt.core.errors import ConfigurationError, DataError, FormatError, InputError
from fabgpt.core.seeding import derive_seed, seed_everything
from fabgpt.models.lm import lm_loss
from fabgpt.models.pipeline import FabPipeline
from fabgpt.models.vocab import Vocabulary
from fabgpt.objectives import cross_entropy, detection_focal, dice_loss, total_loss
from fabgpt.repositories.checkpoint_repo import (
    TrainState, from_namespaced, load_checkpoint, optimizer_to_state, save_checkpoint,
    state_to_optimizer, to_namespaced,
)
from fabgpt.repositories.dataset_repo import load_manifest, load_split
from fabgpt.schemas.config import RunConfig, TrainConfig, check_semantics, describe_validation_error
from fabgpt.schemas.corpus import CorpusEntry, TemplateFile
from fabgpt.schemas.dataset import LABEL_ORDER
from fabgpt.schemas.run import RunStatus
from fabgpt.services import run_service
from fabgpt.services.corpus_service import (
    alternation_schedule, build_vocabulary, default_corpora, entry_applies, render_entry,
)
from fabgpt.services.synth_service import WaferSample

LOSS_TERMS = ("focal", "dice", "ce1", "ce2", "gate")


# ===== schedule =====
def cosine_lr(step: int, total_steps: int, cfg: TrainConfig) -> float:
    if total_steps <= 0:
        raise InputError("cosine schedule needs total_steps >= 1")
    if not 0 <= step <= total_steps:
        raise InputError(f"step {step} outside [0, {total_steps}]")
    # exact endpoints, no cosine round-off
    if step == 0:
        return cfg.lr_init
    if step == total_steps:
        return cfg.lr_final
    return cfg.lr_final + 0.5 * (cfg.lr_init - cfg.lr_final) * (1.0 + math.cos(math.pi * step / total_steps))


def total_steps_for(n_train: int, cfg: TrainConfig) -> int:
    """Enough A batches for `epochs` passes over the train split, plus the interleaved B batches."""
    per_epoch = math.ceil(n_train / cfg.batch_size)
    return math.ceil(1.5 * cfg.epochs * per_epoch)


# ===== batches =====
@dataclass
class Batch:
    tag: str
    images: torch.Tensor        # B x H x W
    texts: List[str]
    masks: torch.Tensor         # B x H x W, long
    labels: torch.Tensor        # B, index into LABEL_ORDER
    questions: List[str]
    answers: List[str]


def stack_images(samples: Sequence[WaferSample]) -> torch.Tensor:
    return torch.from_numpy(np.stack([s.image for s in samples]).astype(np.float32))


class BatchSampler:
    """
    A batches walk the train split in seeded epoch order and pick one
    applicable Corpus-A entry per sample; B batches cycle shuffled Corpus-B
    entries over blank images.
    """

    def __init__(self, samples: Sequence[WaferSample], corpus_a: Sequence[CorpusEntry],
                 corpus_b: Sequence[CorpusEntry], templates: TemplateFile, batch_size: int, seed: int):
        if not samples:
            raise DataError("train split is empty")
        self.samples = list(samples)
        self.corpus_a = list(corpus_a)
        self.corpus_b = list(corpus_b)
        self.templates = templates
        self.batch_size = batch_size
        self.rng = np.random.default_rng(derive_seed(seed, 0, "batches"))
        self._order: List[int] = []
        self._b_order: List[int] = []
        self.shape = samples[0].image.shape

    def _next_sample(self) -> WaferSample:
        if not self._order:
            self._order = list(self.rng.permutation(len(self.samples)))
        return self.samples[self._order.pop()]

    def _next_fact(self) -> CorpusEntry:
        if not self._b_order:
            self._b_order = list(self.rng.permutation(len(self.corpus_b)))
        return self.corpus_b[self._b_order.pop()]

    def a_batch(self) -> Batch:
        picked = [self._next_sample() for _ in range(self.batch_size)]
        items = []
        for s in picked:
            choices = [e for e in self.corpus_a if entry_applies(e, s)]
            items.append(render_entry(choices[int(self.rng.integers(len(choices)))], s, self.templates))
        return Batch(
            tag="A",
            images=stack_images(picked),
            texts=[s.text_marks for s in picked],
            masks=torch.from_numpy(np.stack([s.mask for s in picked]).astype(np.int64)),
            labels=torch.tensor([LABEL_ORDER.index(s.label) for s in picked], dtype=torch.long),
            questions=[i.question for i in items],
            answers=[i.answer for i in items],
        )

    def b_batch(self) -> Batch:
        facts = [self._next_fact() for _ in range(self.batch_size)]
        n, (h, w) = len(facts), self.shape
        return Batch(
            tag="B",
            images=torch.zeros(n, h, w),
            texts=[""] * n,
            masks=torch.zeros(n, h, w, dtype=torch.long),
            labels=torch.zeros(n, dtype=torch.long),
            questions=[f.question_template for f in facts],
            answers=[f.answer_template for f in facts],
        )

    def next(self, tag: str) -> Batch:
        return self.a_batch() if tag == "A" else self.b_batch()


# ===== step =====
def make_optimizer(pipeline: FabPipeline, cfg: TrainConfig) -> torch.optim.AdamW:
    return torch.optim.AdamW(pipeline.trainable_parameters(), lr=cfg.lr_init,
                             betas=(cfg.beta1, cfg.beta2), weight_decay=cfg.weight_decay)


def trainable_names(pipeline: FabPipeline) -> List[str]:
    names = [n for n, p in pipeline.named_parameters() if not n.startswith("frozen.") and p.requires_grad]
    return [n.replace(".", "/", 1) for n in names]


def train_step(pipeline: FabPipeline, batch: Batch, optimizer: torch.optim.Optimizer,
               cfg: RunConfig, *, step: int, lr: float) -> Dict[str, float]:
    """One forward/backward/update; returns the per-term losses and the total."""
    for group in optimizer.param_groups:
        group["lr"] = lr
    pipeline.train()
    q_ids, q_mask = pipeline.question_ids(batch.questions)
    is_a = batch.tag == "A"
    out = pipeline(batch.images, batch.texts, q_ids, q_mask, force_gate=None if is_a else 0.0)
    zero = torch.zeros(())

    l_ce2 = lm_loss(out.instruction, pipeline.answer_ids(batch.answers), pipeline.qa)
    if is_a:
        l_focal = detection_focal(out.mask.probs, batch.masks, cfg.loss.gamma)
        l_dice = dice_loss(out.mask.anomaly_map, batch.masks)
        l_ce1 = cross_entropy(out.pm.scores, batch.labels) if cfg.ablation.use_pm else zero
    else:
        l_focal = l_dice = l_ce1 = zero
    if out.a_raw is not None:
        target = 1.0 if is_a else 0.0
        l_gate = ((out.a_raw - target) ** 2).mean()
    else:
        l_gate = zero

    loss = total_loss(l_focal, l_dice, l_ce1, l_ce2, cfg.loss, l_gate=l_gate, step=step)
    optimizer.zero_grad(set_to_none=True)
    loss.backward()
    optimizer.step()
    terms = dict(zip(LOSS_TERMS, (l_focal, l_dice, l_ce1, l_ce2, l_gate)))
    out_losses = {k: float(v.detach()) for k, v in terms.items()}
    out_losses["total"] = float(loss.detach())
    return out_losses


# ===== runs =====
@dataclass
class TrainResult:
    checkpoint_path: str
    checkpoint_id: str
    total_steps: int
    tags: List[str] = field(default_factory=list)
    losses: List[Dict[str, float]] = field(default_factory=list)


def load_train_split(cfg: RunConfig, data_root: str) -> List[WaferSample]:
    manifest = load_manifest(data_root)
    samples = load_split(manifest, "train")
    if not samples:
        raise DataError(f"dataset {data_root} has an empty train split")
    want = (cfg.generation.height, cfg.generation.width)
    if samples[0].image.shape != want:
        raise ConfigurationError(f"dataset images are {samples[0].image.shape}, config expects {want}")
    return samples


def prepare(cfg: RunConfig) -> Tuple[TemplateFile, List[CorpusEntry], List[CorpusEntry], Vocabulary]:
    templates, corpus_a, corpus_b = default_corpora()
    vocab = build_vocabulary(corpus_a, corpus_b, templates, cfg.model.max_vocab)
    return templates, corpus_a, corpus_b, vocab


def run_training(cfg: RunConfig, data_root: str, out_path: str, *, run_id: Optional[str] = None,
                 samples: Optional[List[WaferSample]] = None, max_steps: Optional[int] = None) -> TrainResult:
    if cfg.train.epochs == 0:
        raise ConfigurationError("train.epochs is 0; nothing to train")
    seed_everything(cfg.seed)
    samples = samples if samples is not None else load_train_split(cfg, data_root)
    templates, corpus_a, corpus_b, vocab = prepare(cfg)

    pipeline = FabPipeline(cfg, vocab)
    pipeline.guide_experts(stack_images(samples), [s.text_marks for s in samples])
    optimizer = make_optimizer(pipeline, cfg.train)
    sampler = BatchSampler(samples, corpus_a, corpus_b, templates, cfg.train.batch_size, cfg.seed)

    total = total_steps_for(len(samples), cfg.train)
    if max_steps is not None:
        total = min(total, max_steps)
    schedule = alternation_schedule(total)
    result = TrainResult(checkpoint_path=out_path, checkpoint_id="", total_steps=total)
    if run_id:
        run_service.append_log(run_id, f"{len(samples)} train samples, {total} steps, vocabulary {len(vocab)}")
    for step, tag in enumerate(schedule):
        lr = cosine_lr(step, total, cfg.train)
        losses = train_step(pipeline, sampler.next(tag), optimizer, cfg, step=step + 1, lr=lr)
        result.tags.append(tag)
        result.losses.append(losses)
        if run_id:
            run_service.log_step(run_id, step + 1, tag, lr, losses)
            if (step + 1) % 50 == 0:
                run_service.set_status(run_id, RunStatus.running, progress=(step + 1) / total)
    if result.tags != schedule:
        raise RuntimeError("realised corpus tags diverged from the alternation schedule")
    if run_id:
        run_service.append_log(run_id, f"schedule: {result.tags.count('A')} A / {result.tags.count('B')} B batches")

    state = TrainState(step=total, config=cfg.echo(), vocabulary=list(vocab.tokens))
    optimizer_to_state(optimizer, trainable_names(pipeline), state)
    result.checkpoint_id = save_checkpoint(to_namespaced(pipeline.state_dict()), state, out_path)
    run_service.atomic_write_json(os.path.join(os.path.dirname(os.path.abspath(out_path)), "run_config.json"),
                                  {"seed": cfg.seed, "config": cfg.echo(), "checkpoint_id": result.checkpoint_id})
    return result


def load_pipeline(path: str) -> Tuple[FabPipeline, TrainState]:
    params, state = load_checkpoint(path)
    try:
        cfg = check_semantics(RunConfig.model_validate(state.config))
    except ValidationError as e:
        raise FormatError(f"{path}: embedded config is invalid: {describe_validation_error(e)}")
    except ConfigurationError as e:
        raise FormatError(f"{path}: embedded config is invalid: {e.detail}")
    pipeline = FabPipeline(cfg, Vocabulary(state.vocabulary))
    try:
        pipeline.load_state_dict(from_namespaced(params), strict=True)
    except RuntimeError as e:
        raise FormatError(f"{path}: tensors do not match the model: {e}")
    pipeline.refresh_label_embeddings()
    pipeline.eval()
    return pipeline, state


def restore_optimizer(pipeline: FabPipeline, state: TrainState) -> torch.optim.AdamW:
    optimizer = make_optimizer(pipeline, pipeline.cfg.train)
    state_to_optimizer(optimizer, state)
    return optimizer
