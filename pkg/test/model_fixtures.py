import os

import numpy as np

from spacedecode.config_handling import ModelConfig
from spacedecode.model import ModelParams, init_model

SLOW_TESTS = bool(os.environ.get("SPACE_SLOW_TESTS"))

# large finite logit penalty; exp() of it is exactly 0.0
NEVER = -1e9


def tiny_config(vocab_size=8, d_model=16, n_layers=2, n_heads=2, d_ff=32, max_position=256, init_std=0.5,
                seed=0, **kwargs) -> ModelConfig:
    return ModelConfig(vocab_size=vocab_size, d_model=d_model, n_layers=n_layers, n_heads=n_heads, d_ff=d_ff,
                       max_position=max_position, mask_token_id=vocab_size - 1, eos_token_id=vocab_size - 2,
                       init_std=init_std, mask_init_std=init_std, seed=seed, **kwargs).validate()


def random_model(seed=0, no_eos=False, **kwargs) -> ModelParams:
    """
    Untrained model with weights large enough for peaked, input-dependent distributions.
    """
    params = init_model(tiny_config(seed=seed, **kwargs))
    if no_eos:
        params["head.bias"].value[0, params.config.eos_token_id] = NEVER
    return params


def _silence_blocks(params: ModelParams) -> None:
    for name in params.names():
        if name.endswith(".attn.wo") or name.endswith(".mlp.w2") or name.endswith(".attn.bo") \
                or name.endswith(".mlp.b2"):
            params[name].value[:] = 0.0
    params["embed.position"].value[:] = 0.0


def constant_model(token: int = 0, **kwargs) -> ModelParams:
    """
    Every row (mask rows included) predicts `token` with probability exactly 1.
    """
    params = init_model(tiny_config(**kwargs))
    params["head.weight"].value[:] = 0.0
    bias = np.full((1, params.config.vocab_size), NEVER)
    bias[0, token] = 0.0
    params["head.bias"].value[:] = bias
    return params


def successor_model(successor: dict, mask_prediction: int, **kwargs) -> ModelParams:
    """
    Next token depends only on the current token: t -> successor[t]; a mask slot predicts `mask_prediction`.

    Transformer blocks are silenced so each row only sees its own token embedding (a scaled one-hot).
    """
    config = tiny_config(**kwargs)
    if config.d_model < config.vocab_size:
        raise ValueError("successor_model needs d_model >= vocab_size")
    params = init_model(config)
    _silence_blocks(params)
    v, d = config.vocab_size, config.d_model
    embed = np.zeros((v, d))
    for t in range(v):
        embed[t, t] = 10.0
    params["embed.token"].value[:] = embed

    weight = np.zeros((d, v))
    for t in range(v):
        if t == config.mask_token_id:
            weight[t, mask_prediction] = 60.0
        elif t in successor:
            weight[t, successor[t]] = 60.0
    params["head.weight"].value[:] = weight
    params["head.bias"].value[:] = 0.0
    return params


def cycle_successor(tokens) -> dict:
    tokens = list(tokens)
    return {t: tokens[(i + 1) % len(tokens)] for i, t in enumerate(tokens)}


def relative_error(a, b) -> float:
    a, b = np.asarray(a, dtype=np.float64), np.asarray(b, dtype=np.float64)
    return float(np.max(np.abs(a - b) / np.maximum(np.abs(b), 1e-300))) if a.size else 0.0


def close_rows(a, b, tolerance=1e-9) -> bool:
    """
    Relative error on entries with non-negligible mass, absolute error elsewhere.
    """
    a, b = np.asarray(a, dtype=np.float64), np.asarray(b, dtype=np.float64)
    scale = np.maximum(np.abs(b), 1e-12)
    return bool(np.all(np.abs(a - b) <= tolerance * scale + 1e-15))
