# coding: utf-8
"""
Corpus, prompt and loss-curve files.

A corpus file holds one JSON record per line: ``{"prompt": [ints], "answer": [ints]}``.  A prompts file
holds one prompt per line, either as ``{"prompt": [ints]}`` or as a bare JSON array.
"""

import csv
import os
from typing import List, Optional, Sequence

import numpy as np
import simplejson

from .exceptions import SpaceInvalidCorpus
from .sarsft import LossCurve, MaskedSample, TrainingSample, apply_sar_masking

__all__ = ["write_corpus", "read_corpus", "read_prompts", "write_prompts", "write_loss_csv", "render_masked_sample",
           "mask_preview"]


def _ensure_parent(path: str) -> None:
    parent = os.path.dirname(os.path.abspath(path))
    os.makedirs(parent, exist_ok=True)


def write_corpus(path: str, samples: Sequence[TrainingSample]) -> None:
    _ensure_parent(path)
    with open(path, "w", encoding="utf-8") as fp:
        for sample in samples:
            fp.write(simplejson.dumps({"prompt": list(sample.prompt), "answer": list(sample.answer)}))
            fp.write("\n")


def _int_list(value, where: str) -> List[int]:
    if not isinstance(value, list) or not all(isinstance(v, int) and not isinstance(v, bool) for v in value):
        raise SpaceInvalidCorpus(f"{where}: expected an array of integer token ids")
    return value


def read_corpus(path: str, mask_token_id: Optional[int] = None) -> List[TrainingSample]:
    """
    Read a corpus file; blank lines are skipped.

    :raises SpaceInvalidCorpus: for unreadable files, malformed records or mask tokens in a sample
    """
    samples = []
    try:
        with open(path, encoding="utf-8") as fp:
            for number, line in enumerate(fp, start=1):
                if not line.strip():
                    continue
                where = f"{path}:{number}"
                try:
                    record = simplejson.loads(line)
                except simplejson.JSONDecodeError as err:
                    raise SpaceInvalidCorpus(f"{where}: {err}")
                if not isinstance(record, dict):
                    raise SpaceInvalidCorpus(f"{where}: expected an object with 'prompt' and 'answer'")
                sample = TrainingSample(tuple(_int_list(record.get("prompt"), where)),
                                        tuple(_int_list(record.get("answer"), where)))
                try:
                    samples.append(sample.validate(mask_token_id))
                except SpaceInvalidCorpus as err:
                    raise SpaceInvalidCorpus(f"{where}: {err}")
    except OSError as err:
        raise SpaceInvalidCorpus(f"cannot read corpus '{path}': {err}")
    if not samples:
        raise SpaceInvalidCorpus(f"corpus '{path}' holds no samples")
    return samples


def read_prompts(path: str) -> List[List[int]]:
    """
    :raises SpaceInvalidCorpus: for unreadable files or malformed lines
    """
    prompts = []
    try:
        with open(path, encoding="utf-8") as fp:
            for number, line in enumerate(fp, start=1):
                if not line.strip():
                    continue
                where = f"{path}:{number}"
                try:
                    record = simplejson.loads(line)
                except simplejson.JSONDecodeError as err:
                    raise SpaceInvalidCorpus(f"{where}: {err}")
                if isinstance(record, dict):
                    record = record.get("prompt")
                prompt = _int_list(record, where)
                if not prompt:
                    raise SpaceInvalidCorpus(f"{where}: empty prompt")
                prompts.append(prompt)
    except OSError as err:
        raise SpaceInvalidCorpus(f"cannot read prompts '{path}': {err}")
    if not prompts:
        raise SpaceInvalidCorpus(f"prompts file '{path}' holds no prompts")
    return prompts


def write_prompts(path: str, prompts: Sequence[Sequence[int]]) -> None:
    _ensure_parent(path)
    with open(path, "w", encoding="utf-8") as fp:
        for prompt in prompts:
            fp.write(simplejson.dumps({"prompt": list(prompt)}))
            fp.write("\n")


def write_loss_csv(path: str, curve: LossCurve) -> None:
    _ensure_parent(path)
    with open(path, "w", newline="", encoding="utf-8") as fp:
        writer = csv.writer(fp, lineterminator="\n")
        writer.writerow(["step", "loss"])
        for step, loss in curve.points:
            writer.writerow([step, repr(float(loss))])


def render_masked_sample(masked: MaskedSample, mask_token_id: int) -> str:
    """
    One line of tokens ("M" for masks, prompt tokens in parentheses) and one line of supervised targets.
    """
    cells = []
    for i, t in enumerate(masked.tokens):
        text = "M" if t == mask_token_id else str(t)
        cells.append(f"({text})" if i < masked.prompt_len else text)
    targets = [f"{masked.targets[i]}" if on else "-" for i, on in enumerate(masked.loss_mask)]
    width = max(len(c) for c in cells + targets)
    head = f"m={masked.mask_start}" if masked.is_masked else "AR"
    return (f"{head:<6} in:  " + " ".join(c.rjust(width) for c in cells) + "\n"
            f"{'':<6} out: " + " ".join(c.rjust(width) for c in targets))


def mask_preview(samples: Sequence[TrainingSample], k: int, p_ar: float, seed: int, mask_token_id: int,
                 n: int = 5) -> str:
    """
    Render the first n samples after SAR masking, with the same random streams as the first epoch of training.
    """
    blocks = []
    for idx, sample in enumerate(samples[:n]):
        rng = np.random.default_rng([seed, 0, idx])
        blocks.append(render_masked_sample(apply_sar_masking(sample, k, p_ar, rng, mask_token_id), mask_token_id))
    return "\n".join(blocks)
