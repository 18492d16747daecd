# coding: utf-8
"""
Benchmark harness: AR baseline against auto-correct decoding on the same prompts, and the k sweep.
"""

import csv
import os
import statistics
import time
from dataclasses import dataclass, field, replace
from typing import Callable, Dict, List, Sequence, Tuple

import humanfriendly
import numpy as np
import simplejson

from .config_handling import DecodeConfig
from .decoder import DecodeTrace, ar_generate, space_generate
from .exceptions import SpaceInvalidConfig
from .loggers import log_extra_information, logger
from .model import ModelParams
from .workers import run_jobs

__all__ = ["PromptResult", "BenchReport", "SweepTable", "run_benchmark", "sweep_k", "write_bench_csv",
           "write_histogram_csv", "write_sweep_csv", "write_bench_json"]

TIMING_REPEATS = 3


def _ratio(numerator: float, denominator: float) -> float:
    return numerator / denominator if denominator else 1.0


@dataclass
class PromptResult:
    index: int
    prompt_len: int
    tokens_generated: int
    invocations_space: int
    invocations_ar: int
    wall_clock_ar: float
    wall_clock_space: float
    outputs_match: bool
    histogram: List[int] = field(default_factory=list)

    @property
    def avg_accepted_tokens(self) -> float:
        return _ratio(self.tokens_generated, self.invocations_space) if self.invocations_space else 0.0

    @property
    def speedup_invocations(self) -> float:
        return _ratio(self.invocations_ar, self.invocations_space)

    @property
    def speedup_wall(self) -> float:
        return _ratio(self.wall_clock_ar, self.wall_clock_space)


@dataclass
class BenchReport:
    k: int
    rows: List[PromptResult]

    @property
    def tokens_generated(self) -> int:
        return sum(r.tokens_generated for r in self.rows)

    @property
    def invocations_space(self) -> int:
        return sum(r.invocations_space for r in self.rows)

    @property
    def invocations_ar(self) -> int:
        return sum(r.invocations_ar for r in self.rows)

    @property
    def wall_clock_ar(self) -> float:
        return sum(r.wall_clock_ar for r in self.rows)

    @property
    def wall_clock_space(self) -> float:
        return sum(r.wall_clock_space for r in self.rows)

    @property
    def avg_accepted_tokens(self) -> float:
        return _ratio(self.tokens_generated, self.invocations_space) if self.invocations_space else 0.0

    @property
    def speedup_invocations(self) -> float:
        return _ratio(self.invocations_ar, self.invocations_space)

    @property
    def speedup_wall(self) -> float:
        return _ratio(self.wall_clock_ar, self.wall_clock_space)

    @property
    def histogram(self) -> List[int]:
        """
        hist[n] = steps that emitted n tokens, n in 0..k+1, summed over prompts.
        """
        hist = [0] * (self.k + 2)
        for r in self.rows:
            for n, count in enumerate(r.histogram):
                hist[n] += count
        return hist

    def summary(self) -> dict:
        return {"k": self.k, "prompts": len(self.rows), "tokens_generated": self.tokens_generated,
                "invocations_space": self.invocations_space, "invocations_ar": self.invocations_ar,
                "avg_accepted_tokens": self.avg_accepted_tokens, "speedup_invocations": self.speedup_invocations,
                "speedup_wall": self.speedup_wall, "histogram": self.histogram,
                "outputs_match": all(r.outputs_match for r in self.rows)}

    def summary_line(self) -> str:
        return (f"k={self.k}: {humanfriendly.format_number(self.tokens_generated)} tokens in "
                f"{humanfriendly.format_number(self.invocations_space)} invocations, "
                f"avg accepted tokens {self.avg_accepted_tokens:.3f}, "
                f"invocation speedup {self.speedup_invocations:.3f}x, "
                f"wall-clock speedup {self.speedup_wall:.3f}x "
                f"(AR {humanfriendly.format_timespan(self.wall_clock_ar)}, "
                f"SPACE {humanfriendly.format_timespan(self.wall_clock_space)})")


def _median_time(run: Callable[[], Tuple]) -> Tuple[Tuple, float]:
    timings = []
    result = None
    for _ in range(TIMING_REPEATS):
        started = time.perf_counter()
        result = run()
        timings.append(time.perf_counter() - started)
    return result, statistics.median(timings)


def _bench_prompt(params: ModelParams, index: int, prompt: Sequence[int], decode_config: DecodeConfig,
                  baseline_config: DecodeConfig) -> PromptResult:
    # every repeat restarts from the same stream, so all repeats yield the same tokens
    (ar_out, ar_invocations), ar_time = _median_time(
        lambda: ar_generate(params, prompt, baseline_config, np.random.default_rng([baseline_config.seed, index])))
    (space_out, trace), space_time = _median_time(
        lambda: space_generate(params, prompt, decode_config, np.random.default_rng([decode_config.seed, index])))
    trace: DecodeTrace
    result = PromptResult(index=index, prompt_len=len(prompt), tokens_generated=trace.tokens_delivered,
                          invocations_space=trace.invocations, invocations_ar=ar_invocations,
                          wall_clock_ar=ar_time, wall_clock_space=space_time, outputs_match=ar_out == space_out,
                          histogram=trace.accepted_histogram())
    log_extra_information(f"prompt {index}: {result.tokens_generated} tokens, {result.invocations_space} SPACE / "
                          f"{result.invocations_ar} AR invocations")
    return result


def run_benchmark(params: ModelParams, prompts: Sequence[Sequence[int]], decode_config: DecodeConfig,
                  baseline_config: DecodeConfig = None, workers: int = 1) -> BenchReport:
    """
    Run the AR baseline and auto-correct decoding over the same prompts.

    Wall-clock figures are the median of three runs around generation only.  Token counts follow the
    decoder's delivered count (output plus a terminating EOS).

    :param baseline_config: AR settings; defaults to `decode_config` and must share its sampling settings
    :param workers: parallel prompt sessions (wall-clock figures are only meaningful with 1)
    """
    decode_config.validate()
    baseline_config = baseline_config or decode_config
    if baseline_config.sampling != decode_config.sampling or baseline_config.seed != decode_config.seed:
        raise SpaceInvalidConfig("baseline and decode configs must share sampling settings and seed")
    if baseline_config.max_new_tokens != decode_config.max_new_tokens:
        logger.warning("baseline and decode configs use different max_new_tokens")
    if not prompts:
        raise SpaceInvalidConfig("benchmark needs at least one prompt")

    jobs = [lambda i=i, p=p: _bench_prompt(params, i, p, decode_config, baseline_config)
            for i, p in enumerate(prompts)]
    report = BenchReport(k=decode_config.k, rows=run_jobs(jobs, workers=workers))
    logger.info(report.summary_line())
    return report


@dataclass
class SweepTable:
    reports: List[BenchReport]

    @property
    def k_values(self) -> List[int]:
        return [r.k for r in self.reports]

    def best_wall_clock_k(self) -> int:
        return max(self.reports, key=lambda r: r.speedup_wall).k


def sweep_k(params_per_k: Dict[int, ModelParams], prompts: Sequence[Sequence[int]], k_values: Sequence[int],
            config: DecodeConfig, workers: int = 1) -> SweepTable:
    """
    One benchmark per k, each with the model trained for that k.

    :raises SpaceInvalidConfig: when a k has no model
    """
    missing = [k for k in k_values if k not in params_per_k]
    if missing:
        raise SpaceInvalidConfig(f"no model for k in {missing}")
    reports = []
    for k in k_values:
        k_config = replace(config, k=k).validate()
        reports.append(run_benchmark(params_per_k[k], prompts, k_config, workers=workers))
    return SweepTable(reports)


# ----- Report files ------------------------------------------------------------

_BENCH_FIELDS = ["prompt", "prompt_len", "tokens_generated", "invocations_space", "invocations_ar",
                 "avg_accepted_tokens", "speedup_invocations", "wall_clock_ar", "wall_clock_space", "speedup_wall",
                 "outputs_match"]


def _ensure_parent(path: str) -> None:
    os.makedirs(os.path.dirname(os.path.abspath(path)), exist_ok=True)


def _fmt(value: float) -> str:
    return f"{value:.6f}"


def write_bench_csv(path: str, report: BenchReport) -> None:
    """
    One row per prompt followed by an "aggregate" row.
    """
    _ensure_parent(path)
    with open(path, "w", newline="", encoding="utf-8") as fp:
        writer = csv.writer(fp, lineterminator="\n")
        writer.writerow(_BENCH_FIELDS)
        for r in report.rows:
            writer.writerow([r.index, r.prompt_len, r.tokens_generated, r.invocations_space, r.invocations_ar,
                             _fmt(r.avg_accepted_tokens), _fmt(r.speedup_invocations), _fmt(r.wall_clock_ar),
                             _fmt(r.wall_clock_space), _fmt(r.speedup_wall), int(r.outputs_match)])
        writer.writerow(["aggregate", "", report.tokens_generated, report.invocations_space, report.invocations_ar,
                         _fmt(report.avg_accepted_tokens), _fmt(report.speedup_invocations),
                         _fmt(report.wall_clock_ar), _fmt(report.wall_clock_space), _fmt(report.speedup_wall),
                         int(all(r.outputs_match for r in report.rows))])


def write_histogram_csv(path: str, reports: Sequence[BenchReport]) -> None:
    """
    Rows (k, emitted, steps) for emitted in 1..k+1.
    """
    _ensure_parent(path)
    with open(path, "w", newline="", encoding="utf-8") as fp:
        writer = csv.writer(fp, lineterminator="\n")
        writer.writerow(["k", "emitted", "steps"])
        for report in reports:
            hist = report.histogram
            for n in range(1, report.k + 2):
                writer.writerow([report.k, n, hist[n]])


def write_sweep_csv(path: str, table: SweepTable) -> None:
    _ensure_parent(path)
    with open(path, "w", newline="", encoding="utf-8") as fp:
        writer = csv.writer(fp, lineterminator="\n")
        writer.writerow(["k", "tokens_generated", "invocations_space", "invocations_ar", "avg_accepted_tokens",
                         "speedup_invocations", "speedup_wall"])
        for r in table.reports:
            writer.writerow([r.k, r.tokens_generated, r.invocations_space, r.invocations_ar,
                             _fmt(r.avg_accepted_tokens), _fmt(r.speedup_invocations), _fmt(r.speedup_wall)])


def write_bench_json(path: str, reports: Sequence[BenchReport]) -> None:
    _ensure_parent(path)
    with open(path, "w", encoding="utf-8") as fp:
        simplejson.dump([r.summary() for r in reports], fp, sort_keys=True, indent=2)
        fp.write("\n")
