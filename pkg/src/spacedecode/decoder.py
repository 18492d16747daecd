# coding: utf-8
"""
Auto-correct multi-token decoding and the plain AR baseline.

Every step runs one forward pass over the extended layout: the candidate rows verify the k tokens
drafted in the previous step, and the mask group that matches the number of accepted candidates drafts
the k candidates for the next step.
"""

from dataclasses import dataclass, field
from typing import List, Optional, Sequence, Tuple

import numpy as np
import simplejson

from .config_handling import DecodeConfig, ModelConfig, VerificationMode
from .exceptions import SpaceInvalidConfig, SpaceLayoutError
from .layout import DecodeLayout, build_layout
from .loggers import logger
from .model import KVCache, ModelParams, SlotKind, compact_cache, forward
from .sampling import argmax_token, draw_from, normalize, warp_distribution

__all__ = ["CandidateState", "StepRecord", "DecodeTrace", "verify_candidates", "space_step", "space_generate",
           "ar_generate", "write_trace_jsonl", "placeholder_token"]


def placeholder_token(config: ModelConfig) -> int:
    """
    Token used for the candidates of the first step: the lowest id that is not the mask token.
    """
    return 0 if config.mask_token_id != 0 else 1


@dataclass
class CandidateState:
    """
    Candidates awaiting verification: tokens L_c, their draft probabilities P_c and the full draft
    distributions D_c they were drawn from.  The sentinel state of the first step rejects every candidate.
    """
    tokens: List[int]
    probs: np.ndarray
    drafts: np.ndarray
    sentinel: bool = False

    @property
    def k(self) -> int:
        return len(self.tokens)

    @staticmethod
    def initial(k: int, config: ModelConfig) -> "CandidateState":
        return CandidateState(tokens=[placeholder_token(config)] * k,
                              probs=np.full(k, np.inf),
                              drafts=np.zeros((k, config.vocab_size)),
                              sentinel=True)

    def is_coherent(self) -> bool:
        """
        True when every P_c[i] equals D_c[i][L_c[i]] (always true for the sentinel).
        """
        if self.sentinel:
            return True
        return all(self.probs[i] == self.drafts[i][t] for i, t in enumerate(self.tokens))


@dataclass
class StepRecord:
    step: int
    accepted: int
    emitted: List[int]
    drafted: List[int]
    fed_tokens: int

    def to_dict(self) -> dict:
        return {"step": self.step, "accepted": self.accepted, "emitted": self.emitted, "drafted": self.drafted,
                "fed_tokens": self.fed_tokens}


@dataclass
class DecodeTrace:
    k: int
    prompt_len: int
    steps: List[StepRecord] = field(default_factory=list)
    output: List[int] = field(default_factory=list)
    hit_eos: bool = False
    max_new_tokens: int = 0

    @property
    def invocations(self) -> int:
        return len(self.steps)

    @property
    def tokens_generated(self) -> int:
        """
        Every token emitted by every step, before EOS and max_new_tokens truncation.
        """
        return sum(len(s.emitted) for s in self.steps)

    @property
    def tokens_delivered(self) -> int:
        """
        Output tokens plus the terminating EOS when generation stopped on it within the budget.
        """
        eos = 1 if self.hit_eos and len(self.output) < self.max_new_tokens else 0
        return len(self.output) + eos

    @property
    def avg_accepted_tokens(self) -> float:
        if not self.steps:
            return 0.0
        return self.tokens_delivered / self.invocations

    def accepted_histogram(self) -> List[int]:
        """
        hist[n] = number of steps that emitted n tokens, for n in 0..k+1 (hist[0] is always 0).
        """
        hist = [0] * (self.k + 2)
        for s in self.steps:
            hist[len(s.emitted)] += 1
        return hist

    def summary(self) -> dict:
        return {"k": self.k, "invocations": self.invocations, "tokens_generated": self.tokens_generated,
                "tokens_delivered": self.tokens_delivered, "avg_accepted_tokens": self.avg_accepted_tokens,
                "hit_eos": self.hit_eos}


def write_trace_jsonl(trace: DecodeTrace, path: str) -> None:
    """
    One JSON record per step, in step order.
    """
    with open(path, "w", encoding="utf-8") as fp:
        for record in trace.steps:
            fp.write(simplejson.dumps(record.to_dict(), sort_keys=True))
            fp.write("\n")


# ----- Verification ------------------------------------------------------------

def verify_candidates(q_rows: np.ndarray,
                      state: CandidateState,
                      config: DecodeConfig,
                      rng: np.random.Generator) -> Tuple[int, np.ndarray]:
    """
    Sequentially verify the candidates against the AR rows.

    :param q_rows: (k+1) x vocab; row i conditions on the context plus c_1..c_i (already warped)
    :param state: candidates and their draft statistics
    :return: (accepted count i*, distribution for the one extra token)
    """
    k = state.k
    if q_rows.shape[0] != k + 1:
        raise SpaceLayoutError(f"expected {k + 1} verify rows, got {q_rows.shape[0]}")
    if state.sentinel:
        return 0, q_rows[0]

    if config.verification == VerificationMode.GREEDY_MATCH:
        accepted = 0
        while accepted < k and state.tokens[accepted] == argmax_token(q_rows[accepted]):
            accepted += 1
        return accepted, q_rows[accepted]

    for i, token in enumerate(state.tokens):
        q = q_rows[i][token]
        ratio = min(1.0, q / state.probs[i])
        if rng.random() < ratio:
            continue
        if config.verification == VerificationMode.PAPER_LITERAL:
            return i, q_rows[i]
        residual = np.maximum(q_rows[i] - state.drafts[i], 0.0)
        if residual.sum() <= 0.0:
            return i, q_rows[i]
        return i, normalize(residual)
    return k, q_rows[k]


# ----- One step ------------------------------------------------------------

def _slot_kinds(layout: DecodeLayout, context_kind: SlotKind) -> List[SlotKind]:
    candidates = set(layout.candidate_positions)
    kinds = []
    for i, token in enumerate(layout.tokens):
        if i < layout.prompt_len:
            kinds.append(context_kind)
        elif i in candidates:
            kinds.append(SlotKind.CANDIDATE)
        else:
            kinds.append(SlotKind.MASK)
    return kinds


def _pick(dist: np.ndarray, config: DecodeConfig, rng: np.random.Generator) -> int:
    if config.sampling.is_greedy:
        return argmax_token(dist)
    return draw_from(dist, rng)


def space_step(params: ModelParams,
               output_so_far: Sequence[int],
               state: CandidateState,
               config: DecodeConfig,
               cache: Optional[KVCache],
               rng: np.random.Generator,
               step_index: int = 0) -> Tuple[List[int], CandidateState, KVCache, StepRecord]:
    """
    One decoding step.

    :param output_so_far: the prompt followed by every token emitted so far
    :param cache: slots for a leading part of `output_so_far` (fewer slots than tokens), or None
    :return: (emitted tokens, next candidate state, compacted cache, step record)
    :raises SpaceLayoutError: for an inconsistent cache or invalid layout inputs
    """
    k = config.k
    model_config = params.config
    if state.k != k:
        raise SpaceLayoutError(f"candidate state holds {state.k} candidates, decoding uses k={k}")
    if cache is None:
        cache = KVCache.for_model(params)
    cached = len(cache)
    if cached >= len(output_so_far):
        raise SpaceLayoutError(f"cache holds {cached} slots for an output of {len(output_so_far)} tokens")

    layout = build_layout(output_so_far, state.tokens, k, model_config.mask_token_id)
    context_kind = SlotKind.PROMPT if state.sentinel else SlotKind.ACCEPTED
    kinds = _slot_kinds(layout, context_kind)
    probs = forward(params, layout.tokens[cached:], layout.attn_mask[cached:, :], layout.pos_indices[cached:],
                    cache=cache, kinds=kinds[cached:])

    def row(position: int) -> np.ndarray:
        return warp_distribution(probs[position - cached], config.sampling)

    q_rows = np.stack([row(r) for r in layout.verify_rows()])
    accepted, next_dist = verify_candidates(q_rows, state, config, rng)
    emitted = list(state.tokens[:accepted]) + [_pick(next_dist, config, rng)]

    drafts = np.stack([row(r) for r in layout.group_rows(accepted + 1)])
    new_tokens = [_pick(d, config, rng) for d in drafts]
    new_state = CandidateState(tokens=new_tokens,
                               probs=np.array([drafts[i][t] for i, t in enumerate(new_tokens)]),
                               drafts=drafts,
                               sentinel=False)

    keep = list(range(layout.prompt_len)) + list(layout.candidate_positions[:accepted])
    cache = compact_cache(cache, keep)
    for slot in range(layout.prompt_len, len(cache)):
        cache.kinds[slot] = SlotKind.ACCEPTED

    record = StepRecord(step=step_index, accepted=accepted, emitted=emitted, drafted=new_tokens,
                        fed_tokens=len(layout) - cached)
    return emitted, new_state, cache, record


# ----- Generation loops ------------------------------------------------------------

def _check_prompt(params: ModelParams, prompt: Sequence[int], needed_positions: int) -> None:
    config = params.config
    if len(prompt) == 0:
        raise SpaceLayoutError("prompt must not be empty")
    if config.mask_token_id in prompt:
        raise SpaceLayoutError(f"prompt contains the mask token {config.mask_token_id}")
    bad = [t for t in prompt if not 0 <= t < config.vocab_size]
    if bad:
        raise SpaceLayoutError(f"prompt tokens outside the vocabulary: {bad}")
    if needed_positions > config.max_position:
        raise SpaceInvalidConfig(f"generation needs {needed_positions} positions, model has "
                                 f"max_position {config.max_position}")


def space_generate(params: ModelParams,
                   prompt: Sequence[int],
                   config: DecodeConfig,
                   rng: Optional[np.random.Generator] = None) -> Tuple[List[int], DecodeTrace]:
    """
    Generate with auto-correct decoding until EOS or `max_new_tokens`.

    The output never contains EOS; a multi-token final step that overshoots `max_new_tokens` is truncated.

    :param rng: random stream (default: a new stream seeded with config.seed)
    """
    config.validate()
    k = config.k
    # deepest position index of the last step: context plus 2k - 1
    _check_prompt(params, prompt, len(prompt) + max(config.max_new_tokens, 1) - 1 + 2 * k)
    rng = rng if rng is not None else np.random.default_rng(config.seed)
    eos = params.config.eos_token_id

    trace = DecodeTrace(k=k, prompt_len=len(prompt), max_new_tokens=config.max_new_tokens)
    generated: List[int] = []
    state = CandidateState.initial(k, params.config)
    cache = KVCache.for_model(params)
    while len(generated) < config.max_new_tokens:
        emitted, state, cache, record = space_step(params, list(prompt) + generated, state, config, cache, rng,
                                                   step_index=trace.invocations)
        trace.steps.append(record)
        if eos in emitted:
            generated.extend(emitted[:emitted.index(eos)])
            trace.hit_eos = True
            break
        generated.extend(emitted)

    trace.output = generated[:config.max_new_tokens]
    logger.debug(f"space_generate: {trace.tokens_delivered} tokens in {trace.invocations} invocations (k={k})")
    return trace.output, trace


def ar_generate(params: ModelParams,
                prompt: Sequence[int],
                config: DecodeConfig,
                rng: Optional[np.random.Generator] = None) -> Tuple[List[int], int]:
    """
    Plain autoregressive generation with a KV cache: one token per invocation.

    :return: (output tokens without EOS, number of invocations)
    """
    config.validate()
    _check_prompt(params, prompt, len(prompt) + max(config.max_new_tokens, 1) - 1)
    rng = rng if rng is not None else np.random.default_rng(config.seed)
    eos = params.config.eos_token_id

    cache = KVCache.for_model(params)
    output: List[int] = []
    invocations = 0
    feed = list(prompt)
    kinds = [SlotKind.PROMPT] * len(feed)
    while len(output) < config.max_new_tokens:
        probs = forward(params, feed, None, None, cache=cache, kinds=kinds)
        invocations += 1
        dist = warp_distribution(probs[-1], config.sampling)
        token = _pick(dist, config, rng)
        if token == eos:
            break
        output.append(token)
        feed = [token]
        kinds = [SlotKind.ACCEPTED]
    return output, invocations
