# coding: utf-8
"""
SAR-SFT: supervised fine-tuning where, with probability 1 - p_ar, a run of k answer tokens is replaced
by mask tokens and the model learns to predict the k+1 tokens they stand for in one pass.
"""

import math
import os
import time
from dataclasses import dataclass, field
from typing import List, Optional, Sequence, Tuple

import humanfriendly
import numpy as np

from .checkpoint import save_checkpoint
from .config_handling import ModelConfig, SarSftConfig
from .core_math import Node, Tape, add, cross_entropy, nll_rows, scale
from .exceptions import SpaceDivergenceError, SpaceInvalidConfig, SpaceInvalidCorpus, SpaceNumericError
from .loggers import log_extra_information, logger
from .model import ModelParams, causal_mask, forward, forward_node
from .optim import Adam, clip_grad_norm, cosine_lr

__all__ = ["TrainingSample", "MaskedSample", "LossCurve", "apply_sar_masking", "sar_loss", "sar_loss_node",
           "sar_loss_terms", "train", "evaluate_loss", "synth_corpus", "CORPUS_KINDS", "epoch_checkpoint_path"]

CORPUS_KINDS = ["repeat-pattern", "counting", "templated-phrases"]

# unsupervised positions carry this target
NO_TARGET = -1


@dataclass(frozen=True)
class TrainingSample:
    prompt: Tuple[int, ...]
    answer: Tuple[int, ...]

    def validate(self, mask_token_id: Optional[int] = None) -> "TrainingSample":
        if len(self.prompt) == 0 or len(self.answer) == 0:
            raise SpaceInvalidCorpus("samples need a non-empty prompt and answer")
        if mask_token_id is not None and (mask_token_id in self.prompt or mask_token_id in self.answer):
            raise SpaceInvalidCorpus(f"sample contains the mask token {mask_token_id}")
        return self


@dataclass(frozen=True)
class MaskedSample:
    """
    Model input with per-position targets: position t is trained to predict targets[t] where
    loss_mask[t] is set.  `mask_start` is the 1-based answer index m of the first masked token
    (0 for a plain AR sample).
    """
    tokens: Tuple[int, ...]
    targets: Tuple[int, ...]
    loss_mask: Tuple[bool, ...]
    prompt_len: int
    mask_start: int = 0
    k: int = 0

    @property
    def is_masked(self) -> bool:
        return self.mask_start > 0

    def supervised(self) -> Tuple[List[int], List[int]]:
        rows = [t for t, on in enumerate(self.loss_mask) if on]
        return rows, [self.targets[t] for t in rows]


def _ar_sample(sample: TrainingSample) -> MaskedSample:
    tokens = tuple(sample.prompt) + tuple(sample.answer[:-1])
    l = len(sample.prompt)
    targets = [NO_TARGET] * len(tokens)
    for i, y in enumerate(sample.answer):
        targets[l - 1 + i] = y
    return MaskedSample(tokens=tokens,
                        targets=tuple(targets),
                        loss_mask=tuple(t != NO_TARGET for t in targets),
                        prompt_len=l)


def apply_sar_masking(sample: TrainingSample, k: int, p_ar: float, rng: np.random.Generator,
                      mask_token_id: int) -> MaskedSample:
    """
    With probability p_ar keep the sample as an AR sample.  Otherwise draw m from 1..N-k and build

        X, y_1 .. y_{m-1}, [M]*k

    supervising y_1..y_m on the real positions and y_{m+1}..y_{m+k} on the k masks; the rest of the
    answer is dropped.  Answers shorter than k+1 tokens always stay AR.
    """
    n = len(sample.answer)
    u = rng.random()
    if u < p_ar or n < k + 1:
        return _ar_sample(sample)
    m = int(rng.integers(1, n - k + 1))
    l = len(sample.prompt)
    tokens = tuple(sample.prompt) + tuple(sample.answer[:m - 1]) + (mask_token_id,) * k
    targets = [NO_TARGET] * len(tokens)
    # answer token y_t (1-based) is predicted at position l + t - 2
    for t in range(1, m + k + 1):
        targets[l + t - 2] = sample.answer[t - 1]
    return MaskedSample(tokens=tokens,
                        targets=tuple(targets),
                        loss_mask=tuple(t != NO_TARGET for t in targets),
                        prompt_len=l,
                        mask_start=m,
                        k=k)


# ----- Loss ------------------------------------------------------------

def sar_loss_node(params: ModelParams, masked: MaskedSample, tape: Optional[Tape] = None,
                  reduction: str = "sum") -> Node:
    """
    Causal forward over the masked input and the NLL of the supervised targets, as a graph node.
    """
    n = len(masked.tokens)
    probs = forward_node(params, masked.tokens, causal_mask(n), list(range(n)), tape=tape)
    rows, targets = masked.supervised()
    return nll_rows(probs, rows, targets, reduction=reduction)


def sar_loss(prob_rows: np.ndarray, masked: MaskedSample, reduction: str = "mean") -> float:
    """
    Negative log-likelihood over the supervised positions only ("mean" or "sum").
    """
    rows, targets = masked.supervised()
    if not rows:
        return 0.0
    total = sum(cross_entropy(prob_rows[r], y) for r, y in zip(rows, targets))
    return total / len(rows) if reduction == "mean" else total


def sar_loss_terms(prob_rows: np.ndarray, masked: MaskedSample) -> Tuple[float, float]:
    """
    Summed loss split into the AR part (answer tokens before m) and the multi-token part (y_m .. y_{m+k}).
    For an unmasked sample everything is AR.
    """
    rows, targets = masked.supervised()
    boundary = masked.prompt_len + masked.mask_start - 2 if masked.is_masked else len(masked.tokens)
    ar = sum(cross_entropy(prob_rows[r], y) for r, y in zip(rows, targets) if r < boundary)
    sar = sum(cross_entropy(prob_rows[r], y) for r, y in zip(rows, targets) if r >= boundary)
    return ar, sar


# ----- Training ------------------------------------------------------------

@dataclass
class LossCurve:
    points: List[Tuple[int, float]] = field(default_factory=list)
    epoch_means: List[float] = field(default_factory=list)

    @property
    def initial(self) -> float:
        return self.points[0][1] if self.points else math.nan

    @property
    def final(self) -> float:
        return self.points[-1][1] if self.points else math.nan


def epoch_checkpoint_path(base: str, epoch: int) -> str:
    root, ext = os.path.splitext(base)
    return f"{root}.epoch{epoch}{ext or '.spc'}"


def train(params: ModelParams,
          corpus: Sequence[TrainingSample],
          config: SarSftConfig,
          checkpoint_base: Optional[str] = None) -> Tuple[ModelParams, LossCurve]:
    """
    Train a copy of `params` with SAR masking, Adam, the configured learning-rate schedule and gradient
    clipping.  The batch loss is the summed NLL divided by the number of supervised positions in the batch.

    Sample order and masking are keyed by (seed, epoch, sample index), so two runs with the same seed
    produce identical loss curves.

    :param checkpoint_base: when given, a checkpoint is written after every epoch
    :raises SpaceDivergenceError: if the loss becomes non-finite
    """
    config.validate()
    if not corpus:
        raise SpaceInvalidCorpus("training corpus is empty")
    model_config: ModelConfig = params.config
    longest = max(len(s.prompt) + len(s.answer) for s in corpus)
    if longest - 1 > model_config.max_position:
        raise SpaceInvalidConfig(f"corpus needs {longest - 1} positions, model has max_position "
                                 f"{model_config.max_position}")
    for sample in corpus:
        sample.validate(model_config.mask_token_id)

    params = params.clone()
    optimizer = Adam(params.parameters(), lr=config.learning_rate, betas=(config.adam_beta1, config.adam_beta2),
                     eps=config.adam_eps)
    steps_per_epoch = math.ceil(len(corpus) / config.batch_size)
    total_steps = steps_per_epoch * config.epochs
    label = "SFT" if config.is_plain_sft else f"SAR-SFT (k={config.k}, p_ar={config.p_ar})"
    logger.info(f"training {label}: {len(corpus)} samples, {config.epochs} epochs, {total_steps} steps")

    curve = LossCurve()
    step = 0
    started = time.perf_counter()
    for epoch in range(config.epochs):
        order = np.random.default_rng([config.seed, epoch]).permutation(len(corpus))
        epoch_losses = []
        for start in range(0, len(order), config.batch_size):
            batch = []
            for idx in order[start:start + config.batch_size]:
                rng = np.random.default_rng([config.seed, epoch, int(idx)])
                batch.append(apply_sar_masking(corpus[idx], config.k, config.p_ar, rng, model_config.mask_token_id))

            optimizer.zero_grad()
            tape = Tape()
            try:
                total = None
                count = 0
                for masked in batch:
                    term = sar_loss_node(params, masked, tape=tape, reduction="sum")
                    total = term if total is None else add(total, term)
                    count += int(sum(masked.loss_mask))
                loss = scale(total, 1.0 / max(count, 1))
            except SpaceNumericError as err:
                raise SpaceDivergenceError(f"non-finite values at step {step} (epoch {epoch}): {err}",
                                           step=step, epoch=epoch)
            value = float(loss.value[0, 0])
            if not math.isfinite(value):
                raise SpaceDivergenceError(f"loss is {value} at step {step} (epoch {epoch})", step=step, epoch=epoch)

            tape.backward(loss)
            norm = clip_grad_norm(params.parameters(), config.gradient_clip)
            if not math.isfinite(norm):
                raise SpaceDivergenceError(f"gradient norm is {norm} at step {step} (epoch {epoch})",
                                           step=step, epoch=epoch)
            if config.schedule == "cosine":
                lr = cosine_lr(step, total_steps, config.learning_rate, config.warmup_steps, config.min_lr_ratio)
            else:
                lr = config.learning_rate
            optimizer.step(lr)

            curve.points.append((step, value))
            epoch_losses.append(value)
            logger.debug(f"step {step}: loss {value:.6f} lr {lr:.3e} grad-norm {norm:.3e}")
            step += 1

        curve.epoch_means.append(float(np.mean(epoch_losses)))
        log_extra_information(f"epoch {epoch + 1}/{config.epochs}: mean loss {curve.epoch_means[-1]:.6f}")
        if checkpoint_base:
            save_checkpoint(epoch_checkpoint_path(checkpoint_base, epoch + 1), params)

    elapsed = humanfriendly.format_timespan(time.perf_counter() - started)
    logger.info(f"{label} finished: final loss {curve.final:.6f} after {step} steps in {elapsed}")
    return params, curve


def evaluate_loss(params: ModelParams, corpus: Sequence[TrainingSample], k: int, p_ar: float, seed: int = 0) -> float:
    """
    Mean supervised NLL of `corpus` under the masking policy, without training.
    """
    total, count = 0.0, 0
    for idx, sample in enumerate(corpus):
        rng = np.random.default_rng([seed, 0, idx])
        masked = apply_sar_masking(sample, k, p_ar, rng, params.config.mask_token_id)
        n = len(masked.tokens)
        probs = forward(params, masked.tokens, causal_mask(n), list(range(n)))
        total += sar_loss(probs, masked, reduction="sum")
        count += int(sum(masked.loss_mask))
    return total / max(count, 1)


# ----- Synthetic corpora ------------------------------------------------------------

def synth_corpus(kind: str, size: int, seed: int, model_config: Optional[ModelConfig] = None,
                 answer_len: int = 16) -> List[TrainingSample]:
    """
    Deterministic corpus of `size` samples over the non-special tokens of `model_config`.

    repeat-pattern:    a handful of period-4 patterns with pairwise disjoint tokens; the prompt is a
                       phase-shifted start of one pattern, the answer continues it
    counting:          consecutive tokens, wrapping around the ordinary vocabulary
    templated-phrases: a few fixed phrases with two free slots; the prompt names the phrase

    :raises SpaceInvalidConfig: for an unknown kind or a vocabulary too small for the kind
    """
    model_config = model_config or ModelConfig()
    if kind not in CORPUS_KINDS:
        raise SpaceInvalidConfig(f"unknown corpus kind '{kind}' (one of {CORPUS_KINDS})")
    if size < 1 or answer_len < 1:
        raise SpaceInvalidConfig("corpus size and answer_len must be positive")
    content = model_config.content_tokens
    rng = np.random.default_rng([seed, CORPUS_KINDS.index(kind)])

    if kind == "repeat-pattern":
        period = 4
        if len(content) < period:
            raise SpaceInvalidConfig("repeat-pattern needs at least 4 ordinary tokens")
        shuffled = [content[i] for i in rng.permutation(len(content))]
        patterns = [shuffled[i:i + period] for i in range(0, len(shuffled) - period + 1, period)]
        samples = []
        for _ in range(size):
            pattern = patterns[int(rng.integers(len(patterns)))]
            phase = int(rng.integers(period))
            prompt_len = int(rng.integers(2, 7))
            seq = [pattern[(phase + i) % period] for i in range(prompt_len + answer_len)]
            samples.append(TrainingSample(tuple(seq[:prompt_len]), tuple(seq[prompt_len:])))
        return samples

    if kind == "counting":
        samples = []
        for _ in range(size):
            first = int(rng.integers(len(content)))
            prompt_len = int(rng.integers(2, 5))
            seq = [content[(first + i) % len(content)] for i in range(prompt_len + answer_len)]
            samples.append(TrainingSample(tuple(seq[:prompt_len]), tuple(seq[prompt_len:])))
        return samples

    phrase_len = answer_len + 3
    n_templates = 3
    templates = [[content[int(t)] for t in rng.integers(len(content), size=phrase_len)] for _ in range(n_templates)]
    slots = [sorted(int(s) for s in rng.choice(np.arange(3, phrase_len), size=2, replace=False))
             for _ in range(n_templates)]
    samples = []
    for _ in range(size):
        which = int(rng.integers(n_templates))
        seq = list(templates[which])
        for s in slots[which]:
            seq[s] = content[int(rng.integers(len(content)))]
        samples.append(TrainingSample(tuple(seq[:3]), tuple(seq[3:])))
    return samples
