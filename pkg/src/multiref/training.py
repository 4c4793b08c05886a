"""Losses, optimization schedule and the training loop."""

from __future__ import annotations

import copy
import dataclasses
import logging
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Sequence

import numpy as np
import torch
import torch.nn as nn

from .corpus import ContextResponsePair, Vocabulary
from .latent import GaussianParams, gaussian_kl, prior_kl
from .models import Batch, HierarchicalDialogueModel, ModelConfig, build_model, collate
from .teacher import MultiRefExample

logger = logging.getLogger(__name__)

MODES = ("gt", "hyp", "mixed", "token-kd")


@dataclass
class TrainSchedule:
    initial_lr: float = 0.001
    clip_value: float = 1.0
    decay_rate: float = 0.75
    decay_patience: int = 3
    stop_lr: float = 1e-7
    min_improvement: float = 1e-4
    batch_size: int = 30
    kl_anneal_steps: int = 40000
    bow_weight: float = 1.0
    gmm_kl_samples: int = 16
    max_epochs: int = 100
    max_steps: int | None = None

    def __post_init__(self):
        if not 0 < self.decay_rate < 1:
            raise ValueError("decay_rate must be in (0, 1)")
        if not self.stop_lr < self.initial_lr:
            raise ValueError("stop_lr must be below initial_lr")

    @classmethod
    def from_dict(cls, data: dict) -> "TrainSchedule":
        names = {f.name for f in dataclasses.fields(cls)}
        unknown = set(data) - names
        if unknown:
            raise ValueError(f"unknown schedule keys: {sorted(unknown)}")
        return cls(**data)


@dataclass
class LossBreakdown:
    recon: torch.Tensor
    kl: torch.Tensor
    bow: torch.Tensor
    anneal: float
    total: torch.Tensor
    tokens: int = 0

    def floats(self) -> dict[str, float]:
        return {k: float(torch.as_tensor(getattr(self, k)).detach()) for k in ("recon", "kl", "bow", "anneal", "total")}


# ---------------------------------------------------------------------------
# Losses


def _batch_for(model, vocab: Vocabulary, pairs: Sequence[ContextResponsePair]) -> Batch:
    return collate(vocab, [p.context for p in pairs], [p.response for p in pairs])


def nll_loss(model: HierarchicalDialogueModel, batch: Batch, z: torch.Tensor | None = None) -> torch.Tensor:
    """Summed negative log-likelihood of the batch responses."""
    return -model.sequence_logprob(batch, z).sum()


def multi_ref_loss(model: HierarchicalDialogueModel, example: MultiRefExample, vocab: Vocabulary,
                   z: torch.Tensor | None = None) -> torch.Tensor:
    """Reference-weighted NLL of one context against all of its references."""
    refs = example.references
    if not refs:
        raise ValueError(f"{example.pair_id} has no references")
    batch = collate(vocab, [example.context] * len(refs), [r.utterance for r in refs])
    if z is not None and z.dim() == 1:
        z = z.expand(len(refs), -1)
    nll = -model.sequence_logprob(batch, z)
    if len(refs) == 1:
        return refs[0].weight * nll[0]
    weights = torch.tensor([r.weight for r in refs], dtype=nll.dtype)
    return (weights * nll).sum()


def kl_anneal_weight(step: int, anneal_steps: int = 40000) -> float:
    if step < 0:
        raise ValueError("step must be non-negative")
    if anneal_steps <= 0:
        return 1.0
    return min(step / anneal_steps, 1.0)


def bow_loss(head: nn.Module, z: torch.Tensor, c: torch.Tensor, targets: torch.Tensor, pad_id: int = 0) -> torch.Tensor:
    """Bag-of-words loss: one distribution from ``(z, c)`` scores every response word.

    ``targets`` is ``(B, L)`` word ids padded with ``pad_id``; the result
    is summed over words and batch.
    """
    mask = targets != pad_id
    if not bool(mask.any(-1).all()):
        raise ValueError("bag-of-words loss needs at least one target word per example")
    logp = torch.log_softmax(head(torch.cat([z, c], dim=-1)), dim=-1)
    tok = logp.gather(-1, targets.masked_fill(~mask, 0))
    return -(tok * mask).sum()


def token_kd_loss(student_logprobs: torch.Tensor, teacher_probs: torch.Tensor) -> torch.Tensor:
    """Soft-target cross-entropy summed over positions.

    ``student_logprobs`` are log-probabilities ``(L, V)``; ``teacher_probs``
    are probabilities of the same shape.
    """
    if student_logprobs.shape != teacher_probs.shape:
        raise ValueError(f"shape mismatch: student {tuple(student_logprobs.shape)} "
                         f"vs teacher {tuple(teacher_probs.shape)}")
    teacher_probs = teacher_probs.to(student_logprobs.dtype)
    terms = teacher_probs * student_logprobs
    # 0 * log 0 contributes nothing
    terms = torch.where(teacher_probs > 0, terms, torch.zeros_like(terms))
    return -terms.sum()


def _word_targets(response: torch.Tensor, model: HierarchicalDialogueModel) -> torch.Tensor:
    words = response[:, 1:].clone()
    words[words == model.eos_id] = model.pad_id
    return words


def compute_loss(
    model: HierarchicalDialogueModel,
    batch: Batch,
    step: int = 0,
    schedule: TrainSchedule | None = None,
    teacher_probs: torch.Tensor | None = None,
    noise: torch.Tensor | None = None,
    generator: torch.Generator | None = None,
) -> LossBreakdown:
    """Per-example mean of the training objective on one batch.

    Plain models optimize the summed token NLL (or soft-target cross-entropy
    when ``teacher_probs`` ``(B, L, V)`` is given). Variational models add
    the annealed KL to the prior and the bag-of-words loss; the decoder sees
    a reparameterized posterior draw (``noise`` fixes the draw).
    """
    schedule = schedule or TrainSchedule()
    B = len(batch)
    enc = model.encode_context(batch)
    targets = batch.response[:, 1:]
    mask = targets != model.pad_id
    zero = enc.c.new_zeros(())
    z = kl = bow = None
    anneal = 0.0
    if model.variational:
        post = model.posterior_params(enc.c, model.encode_response(batch.response))
        if noise is None:
            noise = torch.randn(post.mean.shape, generator=generator, dtype=post.mean.dtype)
        z = post.mean + post.std * noise
        comps, weights = model.prior_params(enc.c)
        kl = prior_kl(post, comps, weights, model.prior_spec, schedule.gmm_kl_samples, generator).sum()
        words = _word_targets(batch.response, model)
        has_words = (words != model.pad_id).any(-1)
        bow = bow_loss(model.bow_head, z[has_words], enc.c[has_words], words[has_words], model.pad_id) \
            if bool(has_words.any()) else zero
        anneal = kl_anneal_weight(step, schedule.kl_anneal_steps)
    logp = model.decoder_logprobs(enc, z, batch.response)
    if teacher_probs is not None:
        tp = teacher_probs[:, : targets.shape[1]]
        recon = token_kd_loss(logp * mask.unsqueeze(-1), tp * mask.unsqueeze(-1))
    else:
        recon = -logp.gather(-1, targets.unsqueeze(-1)).squeeze(-1).masked_fill(~mask, 0.0).sum()
    kl = zero if kl is None else kl
    bow = zero if bow is None else bow
    total = recon + anneal * kl + schedule.bow_weight * bow
    return LossBreakdown(recon / B, kl / B, bow / B, anneal, total / B, int(mask.sum()))


@torch.no_grad()
def corpus_nll(model: HierarchicalDialogueModel, pairs: Sequence[ContextResponsePair], vocab: Vocabulary,
               batch_size: int = 64, variable: int | None = None) -> tuple[float, int]:
    """Total NLL and token count (EOS included) with the prior-mean plug-in latent."""
    was_training = model.training
    model.eval()
    total, tokens = 0.0, 0
    try:
        for start in range(0, len(pairs), batch_size):
            chunk = pairs[start : start + batch_size]
            batch = _batch_for(model, vocab, chunk)
            total += float(-model.sequence_logprob(batch, variable=variable).double().sum())
            tokens += int((batch.response[:, 1:] != vocab.pad_id).sum())
    finally:
        model.train(was_training)
    return total, tokens


def mean_token_nll(model, pairs, vocab, batch_size: int = 64, variable: int | None = None) -> float:
    total, tokens = corpus_nll(model, pairs, vocab, batch_size, variable)
    return total / max(tokens, 1)


# ---------------------------------------------------------------------------
# Optimization


def make_optimizer(model: nn.Module, schedule: TrainSchedule) -> torch.optim.Optimizer:
    return torch.optim.Adam(model.parameters(), lr=schedule.initial_lr)


def optimizer_step(model: nn.Module, optimizer: torch.optim.Optimizer, schedule: TrainSchedule, step: int) -> int:
    """Clip gradients elementwise, apply one Adam update, return the next step.

    Non-finite gradients skip the update (the counter still advances).
    """
    params = [p for p in model.parameters() if p.grad is not None]
    if any(not torch.isfinite(p.grad).all() for p in params):
        logger.warning("non-finite gradient at step %d; update skipped", step)
        optimizer.zero_grad(set_to_none=True)
        return step + 1
    torch.nn.utils.clip_grad_value_(params, schedule.clip_value)
    optimizer.step()
    optimizer.zero_grad(set_to_none=True)
    return step + 1


@dataclass
class LRState:
    lr: float
    best: float = math.inf
    bad_checks: int = 0
    decays: int = 0

    @classmethod
    def initial(cls, schedule: TrainSchedule) -> "LRState":
        return cls(schedule.initial_lr)


def lr_schedule_update(state: LRState, validation_loss: float, schedule: TrainSchedule | None = None) -> tuple[float, bool]:
    """Plateau decay: after ``decay_patience`` checks without improvement, scale lr.

    Mutates ``state`` and returns ``(new_lr, stop)``; ``stop`` is set once
    the learning rate falls below ``stop_lr``.
    """
    schedule = schedule or TrainSchedule()
    if validation_loss <= state.best - schedule.min_improvement:
        state.best = validation_loss
        state.bad_checks = 0
    else:
        state.bad_checks += 1
        if state.bad_checks >= schedule.decay_patience:
            state.lr *= schedule.decay_rate
            state.decays += 1
            state.bad_checks = 0
    return state.lr, state.lr < schedule.stop_lr


# ---------------------------------------------------------------------------
# Training data and loop


@dataclass
class TrainInstance:
    pair: ContextResponsePair
    teacher_probs: np.ndarray | None = None  # (len(response) + 1, V) for token-KD


def instances_from_pairs(pairs: Sequence[ContextResponsePair]) -> list[TrainInstance]:
    return [TrainInstance(p) for p in pairs]


def instances_from_multiref(examples: Sequence[MultiRefExample]) -> list[TrainInstance]:
    """One instance per reference: uniform reference weights via replication."""
    return [TrainInstance(p) for ex in examples for p in ex.as_pairs()]


def instances_for_token_kd(pairs: Sequence[ContextResponsePair], teacher, vocab: Vocabulary) -> list[TrainInstance]:
    from .corpus import EOS
    from .teacher import token_distill_targets

    return [
        TrainInstance(p, token_distill_targets(teacher, p.context, list(p.response.tokens) + [EOS], vocab))
        for p in pairs
    ]


def _make_batch(instances: Sequence[TrainInstance], vocab: Vocabulary):
    batch = _batch_for(None, vocab, [i.pair for i in instances])
    if instances[0].teacher_probs is None:
        return batch, None
    L = batch.response.shape[1] - 1
    tp = np.zeros((len(instances), L, len(vocab)))
    for b, inst in enumerate(instances):
        tp[b, : inst.teacher_probs.shape[0]] = inst.teacher_probs
    return batch, torch.from_numpy(tp)


@dataclass
class TrainResult:
    model: HierarchicalDialogueModel
    log: list[dict]
    step: int
    best_val: float
    optimizer: torch.optim.Optimizer
    lr_state: LRState


def fit(
    model: HierarchicalDialogueModel,
    train: Sequence[TrainInstance],
    valid: Sequence[ContextResponsePair],
    vocab: Vocabulary,
    schedule: TrainSchedule,
    seed: int = 0,
    checkpoint_path: str | Path | None = None,
    resume: dict | None = None,
    on_validation: Callable[[dict], None] | None = None,
) -> TrainResult:
    """Epoch loop with seeded shuffling, per-epoch validation and plateau decay.

    Validation loss is the per-token NLL on ``valid`` with the prior-mean
    latent. The best-by-validation parameters are restored at the end and,
    if ``checkpoint_path`` is given, saved there.
    """
    if not train:
        raise ValueError("training set is empty")
    torch.manual_seed(seed)
    gen = torch.Generator().manual_seed(seed)
    rng = np.random.default_rng(seed)
    dtype = next(model.parameters()).dtype
    optimizer = make_optimizer(model, schedule)
    lr_state = LRState.initial(schedule)
    step, start_epoch = 0, 0
    if resume is not None:
        optimizer.load_state_dict(resume["optimizer"])
        lr_state = LRState(**resume["lr_state"])
        step = int(resume["step"])
        start_epoch = int(resume.get("epoch", 0))
        for _ in range(start_epoch):
            rng.permutation(len(train))
    best_val, best_state = lr_state.best, None
    log: list[dict] = []
    stop = False
    for epoch in range(start_epoch, schedule.max_epochs):
        for g in optimizer.param_groups:
            g["lr"] = lr_state.lr
        model.train()
        order = rng.permutation(len(train))
        sums = {"recon": 0.0, "kl": 0.0, "bow": 0.0, "total": 0.0}
        n_batches = 0
        anneal = 0.0
        for start in range(0, len(order), schedule.batch_size):
            if schedule.max_steps is not None and step >= schedule.max_steps:
                stop = True
                break
            chunk = [train[i] for i in order[start : start + schedule.batch_size]]
            batch, tp = _make_batch(chunk, vocab)
            if tp is not None:
                tp = tp.to(dtype)
            loss = compute_loss(model, batch, step, schedule, tp, generator=gen)
            loss.total.backward()
            step = optimizer_step(model, optimizer, schedule, step)
            for k in sums:
                sums[k] += float(getattr(loss, k).detach())
            anneal = loss.anneal
            n_batches += 1
        val = mean_token_nll(model, valid, vocab) if valid else sums["total"] / max(n_batches, 1)
        record = {
            "step": step,
            "epoch": epoch + 1,
            "lr": lr_state.lr,
            **{k: v / max(n_batches, 1) for k, v in sums.items()},
            "anneal": anneal,
            "val_total": val,
        }
        log.append(record)
        if on_validation:
            on_validation(record)
        logger.info("epoch %d step %d lr %.2e train %.4f val %.4f", epoch + 1, step, lr_state.lr,
                    record["total"], val)
        if val < best_val:
            best_val = val
            best_state = copy.deepcopy(model.state_dict())
            if checkpoint_path is not None:
                save_checkpoint(checkpoint_path, model, vocab, optimizer, step, lr_state, seed, epoch + 1, log)
        _, lr_stop = lr_schedule_update(lr_state, val, schedule)
        if stop or lr_stop:
            break
    if best_state is not None:
        model.load_state_dict(best_state)
    return TrainResult(model, log, step, best_val, optimizer, lr_state)


# ---------------------------------------------------------------------------
# Checkpoints


def save_checkpoint(path, model, vocab: Vocabulary, optimizer, step: int, lr_state: LRState, seed: int,
                    epoch: int = 0, log: list | None = None) -> None:
    cfg = model.config.to_dict()
    torch.save(
        {
            "format": "multiref-checkpoint/1",
            "config": cfg,
            "vocab_hash": vocab.digest(),
            "vocab": list(vocab.id2token),
            "state_dict": model.state_dict(),
            "optimizer": optimizer.state_dict() if optimizer is not None else None,
            "step": step,
            "epoch": epoch,
            "lr_state": dataclasses.asdict(lr_state),
            "seed": seed,
            "log": log or [],
        },
        path,
    )


def load_checkpoint(path, vocab: Vocabulary | None = None) -> tuple[HierarchicalDialogueModel, dict]:
    """Rebuild a model from a checkpoint; verifies the vocabulary when given."""
    ckpt = torch.load(path, map_location="cpu", weights_only=False)
    if vocab is not None and ckpt["vocab_hash"] != vocab.digest():
        raise ValueError("checkpoint was trained with a different vocabulary")
    config = ModelConfig.from_dict(ckpt["config"])
    model = build_model(config)
    dtype = next(iter(ckpt["state_dict"].values())).dtype
    model = model.to(dtype)
    model.load_state_dict(ckpt["state_dict"])
    model.eval()
    return model, ckpt
