# coding: utf-8
"""
Brute-force checks that auto-correct decoding reproduces the model's AR output distribution.

Sequences are tuples of output tokens without EOS; with a horizon h, a tuple shorter than h was ended by EOS.
"""

import csv
import os
import time
from collections import Counter
from dataclasses import dataclass, field
from typing import Callable, Dict, List, Optional, Sequence, Tuple

import humanfriendly
import numpy as np
import simplejson

from .config_handling import DecodeConfig, SamplingConfig, VerificationMode
from .decoder import ar_generate, space_generate
from .exceptions import SpaceGuardExceeded, SpaceInvalidConfig
from .loggers import log_extra_information, logger
from .model import ModelParams, forward
from .workers import run_jobs

__all__ = ["SequenceDistribution", "exact_ar_distribution", "empirical_distribution", "tv_distance",
           "EquivalenceReport", "equivalence_report", "greedy_cross_check", "ar_sampler", "space_sampler",
           "write_equivalence_json", "write_equivalence_csv", "ENUMERATION_GUARD"]

ENUMERATION_GUARD = 10 ** 6

# stream tags keep the control and the decoders on unrelated random streams
_TAG_CONTROL = 1
_TAG_SPACE = 2
_TAG_LITERAL = 3

TokenSeq = Tuple[int, ...]
SequenceSampler = Callable[[Sequence[int], np.random.Generator], List[int]]


@dataclass
class SequenceDistribution:
    probs: Dict[TokenSeq, float] = field(default_factory=dict)

    def __getitem__(self, seq: TokenSeq) -> float:
        return self.probs.get(tuple(seq), 0.0)

    def __len__(self) -> int:
        return len(self.probs)

    @property
    def support_size(self) -> int:
        return sum(1 for p in self.probs.values() if p > 0.0)

    def total(self) -> float:
        return float(sum(self.probs.values()))


def exact_ar_distribution(params: ModelParams, prompt: Sequence[int], horizon: int,
                          guard: int = ENUMERATION_GUARD) -> SequenceDistribution:
    """
    Enumerate every output sequence of up to `horizon` tokens with its AR probability (temperature 1,
    no truncation); EOS ends a sequence.

    :raises SpaceGuardExceeded: when vocab_size ** horizon exceeds `guard`
    """
    if horizon < 1:
        raise SpaceInvalidConfig("horizon must be >= 1")
    estimate = params.config.vocab_size ** horizon
    if estimate > guard:
        raise SpaceGuardExceeded(f"enumeration of {humanfriendly.format_number(estimate)} sequences exceeds the "
                                 f"guard of {humanfriendly.format_number(guard)}", estimate=estimate)
    eos = params.config.eos_token_id
    result: Dict[TokenSeq, float] = {}

    def visit(prefix: List[int], prob: float) -> None:
        if len(prefix) == horizon:
            result[tuple(prefix)] = result.get(tuple(prefix), 0.0) + prob
            return
        dist = forward(params, list(prompt) + prefix, None, None)[-1]
        for token in np.flatnonzero(dist > 0.0):
            p = prob * float(dist[token])
            if token == eos:
                result[tuple(prefix)] = result.get(tuple(prefix), 0.0) + p
            else:
                visit(prefix + [int(token)], p)

    visit([], 1.0)
    return SequenceDistribution(result)


def empirical_distribution(generator: SequenceSampler, prompt: Sequence[int], horizon: int, n_samples: int,
                           seed: int, tag: int = 0, workers: int = 1, chunks: int = 8) -> SequenceDistribution:
    """
    Frequencies of `n_samples` generator runs; run i draws from its own stream keyed by (seed, tag, i).
    """
    if n_samples < 1:
        raise SpaceInvalidConfig("n_samples must be >= 1")
    bounds = np.linspace(0, n_samples, num=min(chunks, n_samples) + 1, dtype=int)

    def job(lo: int, hi: int) -> Counter:
        counts = Counter()
        for i in range(lo, hi):
            rng = np.random.default_rng([seed, tag, i])
            counts[tuple(generator(prompt, rng)[:horizon])] += 1
        return counts

    parts = run_jobs([lambda lo=int(lo), hi=int(hi): job(lo, hi) for lo, hi in zip(bounds[:-1], bounds[1:])],
                     workers=workers)
    total = Counter()
    for part in parts:
        total.update(part)
    return SequenceDistribution({seq: count / n_samples for seq, count in sorted(total.items())})


def tv_distance(a: SequenceDistribution, b: SequenceDistribution) -> float:
    """
    Half the L1 distance over the union of both supports.
    """
    support = set(a.probs) | set(b.probs)
    return 0.5 * float(sum(abs(a[s] - b[s]) for s in support))


def _untruncated(horizon: int, k: int, verification: VerificationMode, seed: int) -> DecodeConfig:
    return DecodeConfig(k=k, sampling=SamplingConfig.untruncated(), verification=verification,
                        max_new_tokens=horizon, seed=seed).validate()


def ar_sampler(params: ModelParams, horizon: int) -> SequenceSampler:
    config = _untruncated(horizon, 1, VerificationMode.LOSSLESS_RESIDUAL, 0)
    return lambda prompt, rng: ar_generate(params, prompt, config, rng)[0]


def space_sampler(params: ModelParams, horizon: int, k: int,
                  verification: VerificationMode = VerificationMode.LOSSLESS_RESIDUAL) -> SequenceSampler:
    config = _untruncated(horizon, k, verification, 0)
    return lambda prompt, rng: space_generate(params, prompt, config, rng)[0]


@dataclass
class EquivalenceReport:
    prompt: List[int]
    horizon: int
    k: int
    n_samples: int
    seed: int
    tv_space: float
    tv_control: float
    tv_literal: Optional[float]
    exact: SequenceDistribution
    space: SequenceDistribution
    control: SequenceDistribution
    literal: Optional[SequenceDistribution] = None
    margin: float = 0.01
    threshold: float = 0.03
    elapsed: float = 0.0

    @property
    def passed(self) -> bool:
        return (self.tv_space <= self.tv_control + self.margin
                and self.tv_space < self.threshold and self.tv_control < self.threshold)

    def to_dict(self) -> dict:
        return {"prompt": self.prompt, "horizon": self.horizon, "k": self.k, "n_samples": self.n_samples,
                "seed": self.seed, "tv_space": self.tv_space, "tv_control": self.tv_control,
                "tv_literal": self.tv_literal, "support_exact": self.exact.support_size,
                "support_space": self.space.support_size, "support_control": self.control.support_size,
                "support_literal": self.literal.support_size if self.literal is not None else None,
                "exact_total": self.exact.total(), "margin": self.margin, "threshold": self.threshold,
                "result": "PASS" if self.passed else "FAIL"}

    def summary(self) -> str:
        lines = [f"{'PASS' if self.passed else 'FAIL'}: k={self.k} horizon={self.horizon} "
                 f"samples={humanfriendly.format_number(self.n_samples)}",
                 f"  TV(exact, space lossless-residual) = {self.tv_space:.5f}",
                 f"  TV(exact, sampled AR control)      = {self.tv_control:.5f}"]
        if self.tv_literal is not None:
            lines.append(f"  TV(exact, space paper-literal)     = {self.tv_literal:.5f} (diagnostic)")
        lines.append(f"  support: exact {self.exact.support_size}, space {self.space.support_size}, "
                     f"control {self.control.support_size}")
        return "\n".join(lines)


def equivalence_report(params: ModelParams, prompt: Sequence[int], horizon: int, k: int, n_samples: int, seed: int,
                       include_literal: bool = True, workers: int = 1) -> EquivalenceReport:
    """
    Compare the exact AR distribution with sampled SPACE (lossless-residual) and a sampled AR control.
    PASS iff TV_space <= TV_control + 0.01 and both are below 0.03; the paper-literal mode is only reported.
    """
    started = time.perf_counter()
    exact = exact_ar_distribution(params, prompt, horizon)
    control = empirical_distribution(ar_sampler(params, horizon), prompt, horizon, n_samples, seed,
                                     tag=_TAG_CONTROL, workers=workers)
    space = empirical_distribution(space_sampler(params, horizon, k), prompt, horizon, n_samples, seed,
                                   tag=_TAG_SPACE, workers=workers)
    literal = None
    if include_literal:
        literal = empirical_distribution(space_sampler(params, horizon, k, VerificationMode.PAPER_LITERAL),
                                         prompt, horizon, n_samples, seed, tag=_TAG_LITERAL, workers=workers)
    report = EquivalenceReport(prompt=list(prompt), horizon=horizon, k=k, n_samples=n_samples, seed=seed,
                               tv_space=tv_distance(exact, space), tv_control=tv_distance(exact, control),
                               tv_literal=tv_distance(exact, literal) if literal is not None else None,
                               exact=exact, space=space, control=control, literal=literal,
                               elapsed=time.perf_counter() - started)
    logger.info(f"equivalence check {'PASS' if report.passed else 'FAIL'} in "
                f"{humanfriendly.format_timespan(report.elapsed)}")
    return report


def write_equivalence_json(path: str, report: EquivalenceReport) -> None:
    os.makedirs(os.path.dirname(os.path.abspath(path)), exist_ok=True)
    with open(path, "w", encoding="utf-8") as fp:
        simplejson.dump(report.to_dict(), fp, sort_keys=True, indent=2)
        fp.write("\n")


def write_equivalence_csv(path: str, report: EquivalenceReport) -> None:
    """
    One row per sequence in the union of all supports: exact, space, control and literal probabilities.
    """
    os.makedirs(os.path.dirname(os.path.abspath(path)), exist_ok=True)
    dists = [report.exact, report.space, report.control] + ([report.literal] if report.literal is not None else [])
    support = sorted(set().union(*[set(d.probs) for d in dists]))
    with open(path, "w", newline="", encoding="utf-8") as fp:
        writer = csv.writer(fp, lineterminator="\n")
        writer.writerow(["sequence", "exact", "space", "control", "literal"])
        for seq in support:
            literal = repr(report.literal[seq]) if report.literal is not None else ""
            writer.writerow([" ".join(str(t) for t in seq), repr(report.exact[seq]), repr(report.space[seq]),
                             repr(report.control[seq]), literal])


def greedy_cross_check(params: ModelParams, prompts: Sequence[Sequence[int]], k_values: Sequence[int],
                       max_new_tokens: int = 16) -> List[Tuple[List[int], int, List[int], List[int]]]:
    """
    Greedy SPACE against greedy AR on every (prompt, k) pair.

    :return: mismatches as (prompt, k, ar output, space output); empty when all outputs agree
    """
    mismatches = []
    for prompt in prompts:
        ar_config = DecodeConfig(k=1, max_new_tokens=max_new_tokens).validate()
        ar_out, _ = ar_generate(params, prompt, ar_config)
        for k in k_values:
            space_out, _ = space_generate(params, prompt, DecodeConfig(k=k, max_new_tokens=max_new_tokens).validate())
            if space_out != ar_out:
                mismatches.append((list(prompt), k, ar_out, space_out))
    log_extra_information(f"greedy cross-check: {len(prompts) * len(k_values)} pairs, {len(mismatches)} mismatches")
    return mismatches
