# coding: utf-8
"""Distribution warping and token sampling shared by AR and multi-token decoding."""

import numpy as np

from .config_handling import SamplingConfig
from .exceptions import SpaceNumericError

__all__ = ["argmax_token", "warp_distribution", "draw_from", "sample_token", "normalize"]


def normalize(weights: np.ndarray) -> np.ndarray:
    """
    Scale non-negative weights to sum to 1.

    :raises SpaceNumericError: when the total mass is zero or not finite
    """
    w = np.asarray(weights, dtype=np.float64)
    total = w.sum()
    if not np.isfinite(total) or total <= 0.0:
        raise SpaceNumericError("cannot normalize a distribution with no mass")
    return w / total


def argmax_token(dist: np.ndarray) -> int:
    # np.argmax returns the first maximum, i.e. the lowest token id on ties
    return int(np.argmax(np.asarray(dist)))


def warp_distribution(dist: np.ndarray, sampling: SamplingConfig) -> np.ndarray:
    """
    Apply temperature, then top-k, then top-p (nucleus) truncation, and renormalize.

    Greedy configs return the distribution unchanged.  A top_k of 0 and a top_p of 1 disable the
    respective truncation.  Ties in top-k are broken toward the lowest token id.
    """
    probs = np.asarray(dist, dtype=np.float64).ravel()
    if sampling.is_greedy:
        return probs.copy()

    positive = probs > 0.0
    if sampling.temperature != 1.0:
        logp = np.where(positive, np.log(np.where(positive, probs, 1.0)), -np.inf)
        top = logp[positive].max()
        probs = np.where(positive, np.exp((logp - top) / sampling.temperature), 0.0)
    probs = normalize(probs)

    if 0 < sampling.top_k < probs.size:
        order = np.argsort(-probs, kind="stable")
        probs = probs.copy()
        probs[order[sampling.top_k:]] = 0.0
        probs = normalize(probs)

    if sampling.top_p < 1.0:
        order = np.argsort(-probs, kind="stable")
        sorted_probs = probs[order]
        mass_before = np.cumsum(sorted_probs) - sorted_probs
        drop = order[mass_before > sampling.top_p]
        probs = probs.copy()
        probs[drop] = 0.0
        probs = normalize(probs)
    return probs


def draw_from(dist: np.ndarray, rng: np.random.Generator) -> int:
    """
    Draw one token by inverse CDF with a single uniform from `rng`; zero-probability tokens are never drawn.
    """
    probs = np.asarray(dist, dtype=np.float64).ravel()
    cdf = np.cumsum(probs)
    u = rng.random() * cdf[-1]
    idx = int(np.searchsorted(cdf, u, side="right"))
    # u can round up to the full mass
    return min(idx, int(np.flatnonzero(probs > 0.0)[-1]))


def sample_token(dist: np.ndarray, sampling: SamplingConfig, rng: np.random.Generator) -> int:
    """
    Greedy: the argmax (lowest id on ties).  Stochastic: draw from the warped distribution.
    """
    if sampling.is_greedy:
        return argmax_token(dist)
    return draw_from(warp_distribution(dist, sampling), rng)
