# coding: utf-8
"""
Toy decoder-only transformer.

Unlike a plain causal LM, `forward` takes the attention mask and the per-token position indices as
explicit inputs, which is what the multi-group decoding layout needs.  Keys and values of every
processed token can be appended to a `KVCache`; `compact_cache` drops the slots that must not
survive a decoding step.
"""

import hashlib
import math
from collections import OrderedDict
from enum import Enum
from typing import Dict, Iterator, List, Optional, Sequence, Tuple

import numpy as np

from .config_handling import ModelConfig
from .core_math import (MASKED_LOGIT, Node, ParamTensor, Tape, add, add_constant, add_row, concat_cols,
                        concat_rows, constant, gelu, layer_norm_rows, matmul, param_node, scale, slice_cols,
                        softmax_rows, take_rows, transpose)
from .exceptions import SpaceIndexError, SpaceInvalidConfig, SpaceLayoutError, SpaceShapeError

__all__ = ["ModelConfig", "ModelParams", "SlotKind", "KVCache", "expected_shapes", "init_model", "forward",
           "forward_node", "compact_cache", "causal_mask", "params_checksum"]


def expected_shapes(config: ModelConfig) -> "OrderedDict[str, Tuple[int, int]]":
    """
    Tensor names and shapes in manifest order (the order of initialization and of checkpoint data).
    """
    d, v, f = config.d_model, config.vocab_size, config.d_ff
    shapes = OrderedDict()
    shapes["embed.token"] = (v, d)
    shapes["embed.position"] = (config.max_position, d)
    for layer in range(config.n_layers):
        prefix = f"layers.{layer}"
        shapes[f"{prefix}.ln1.gain"] = (1, d)
        shapes[f"{prefix}.ln1.bias"] = (1, d)
        for name in ("q", "k", "v", "o"):
            shapes[f"{prefix}.attn.w{name}"] = (d, d)
            shapes[f"{prefix}.attn.b{name}"] = (1, d)
        shapes[f"{prefix}.ln2.gain"] = (1, d)
        shapes[f"{prefix}.ln2.bias"] = (1, d)
        shapes[f"{prefix}.mlp.w1"] = (d, f)
        shapes[f"{prefix}.mlp.b1"] = (1, f)
        shapes[f"{prefix}.mlp.w2"] = (f, d)
        shapes[f"{prefix}.mlp.b2"] = (1, d)
    shapes["final_ln.gain"] = (1, d)
    shapes["final_ln.bias"] = (1, d)
    shapes["head.weight"] = (d, v)
    shapes["head.bias"] = (1, v)
    return shapes


class ModelParams(object):
    """
    All trainable tensors of one model, keyed by name.
    """

    def __init__(self, config: ModelConfig, tensors: Dict[str, ParamTensor]):
        config.validate()
        shapes = expected_shapes(config)
        if set(tensors) != set(shapes):
            missing = sorted(set(shapes) - set(tensors))
            extra = sorted(set(tensors) - set(shapes))
            raise SpaceShapeError(f"parameter set mismatch (missing: {missing}, unexpected: {extra})")
        for name, shape in shapes.items():
            if tensors[name].shape != shape:
                raise SpaceShapeError(f"parameter '{name}' has shape {tensors[name].shape}, expected {shape}")
        self.config = config
        self._tensors = OrderedDict((name, tensors[name]) for name in shapes)

    def __getitem__(self, name: str) -> ParamTensor:
        return self._tensors[name]

    def __iter__(self) -> Iterator[ParamTensor]:
        return iter(self._tensors.values())

    def __len__(self) -> int:
        return len(self._tensors)

    def names(self) -> List[str]:
        return list(self._tensors)

    def parameters(self) -> List[ParamTensor]:
        return list(self._tensors.values())

    def zero_grad(self) -> None:
        for p in self._tensors.values():
            p.zero_grad()

    def count(self) -> int:
        return sum(p.value.size for p in self._tensors.values())

    def clone(self) -> "ModelParams":
        return ModelParams(self.config, {name: ParamTensor(name, p.value.copy()) for name, p in self._tensors.items()})


def init_model(config: ModelConfig) -> ModelParams:
    """
    Deterministically initialize a model from `config.seed`.

    Weight matrices and embeddings are drawn from N(0, init_std); the mask token's embedding row
    is redrawn from N(0, mask_init_std).  Gains start at 1, biases at 0.

    :raises SpaceInvalidConfig: for an invalid config
    """
    config.validate()
    rng = np.random.default_rng(config.seed)
    tensors = {}
    for name, shape in expected_shapes(config).items():
        if name.endswith(".gain"):
            value = np.ones(shape)
        elif name.endswith(".bias") or ".attn.b" in name or ".mlp.b" in name:
            value = np.zeros(shape)
        else:
            value = rng.normal(0.0, config.init_std, size=shape)
        tensors[name] = ParamTensor(name, value)
    tensors["embed.token"].value[config.mask_token_id] = rng.normal(0.0, config.mask_init_std, size=config.d_model)
    return ModelParams(config, tensors)


def params_checksum(params: ModelParams) -> str:
    """
    md5 over the float64 bytes of every tensor, in manifest order.
    """
    md5 = hashlib.md5()
    for p in params:
        md5.update(np.ascontiguousarray(p.value, dtype="<f8").tobytes())
    return md5.hexdigest()


# ----- KV cache ------------------------------------------------------------

class SlotKind(Enum):
    PROMPT = 1
    ACCEPTED = 2
    CANDIDATE = 3
    MASK = 4


class KVCache(object):
    """
    Per-layer keys and values of already processed tokens, one row per slot.  Every slot also remembers
    the position index and kind it was produced with.
    """

    def __init__(self, n_layers: int, d_model: int):
        self.n_layers = n_layers
        self.d_model = d_model
        self.keys: List[np.ndarray] = [np.zeros((0, d_model)) for _ in range(n_layers)]
        self.values: List[np.ndarray] = [np.zeros((0, d_model)) for _ in range(n_layers)]
        self.positions: List[int] = []
        self.kinds: List[SlotKind] = []

    @staticmethod
    def for_model(params: ModelParams) -> "KVCache":
        return KVCache(params.config.n_layers, params.config.d_model)

    def __len__(self) -> int:
        return len(self.positions)

    def append(self, layer: int, keys: np.ndarray, values: np.ndarray) -> None:
        self.keys[layer] = np.concatenate([self.keys[layer], keys], axis=0)
        self.values[layer] = np.concatenate([self.values[layer], values], axis=0)

    def copy(self) -> "KVCache":
        other = KVCache(self.n_layers, self.d_model)
        other.keys = [k.copy() for k in self.keys]
        other.values = [v.copy() for v in self.values]
        other.positions = list(self.positions)
        other.kinds = list(self.kinds)
        return other


def compact_cache(cache: KVCache, keep_slots: Sequence[int]) -> KVCache:
    """
    Return a new cache holding only `keep_slots` (in ascending slot order); retained slots keep their
    keys, values, position indices and kinds.

    :raises SpaceIndexError: for a slot outside [0, len(cache))
    """
    keep = sorted(set(int(s) for s in keep_slots))
    for slot in keep:
        if not 0 <= slot < len(cache):
            raise SpaceIndexError(f"cache slot {slot} out of range (cache holds {len(cache)} slots)")
    idx = np.asarray(keep, dtype=np.int64)
    other = KVCache(cache.n_layers, cache.d_model)
    other.keys = [k[idx].copy() for k in cache.keys]
    other.values = [v[idx].copy() for v in cache.values]
    other.positions = [cache.positions[s] for s in keep]
    other.kinds = [cache.kinds[s] for s in keep]
    return other


def causal_mask(n: int, cached: int = 0) -> np.ndarray:
    """
    Boolean n x (cached + n) mask: new token i sees every cached slot and new tokens 0..i.
    """
    return np.tril(np.ones((n, cached + n), dtype=bool), k=cached)


# ----- Forward pass ------------------------------------------------------------

def _check_inputs(config: ModelConfig, tokens: np.ndarray, attn_mask: np.ndarray, pos: np.ndarray,
                  cached: int) -> None:
    n = tokens.size
    if n == 0:
        raise SpaceLayoutError("forward needs at least one token")
    if tokens.min() < 0 or tokens.max() >= config.vocab_size:
        raise SpaceLayoutError(f"token id outside the vocabulary [0, {config.vocab_size})")
    if attn_mask.shape != (n, cached + n):
        raise SpaceLayoutError(f"attention mask must be {n}x{cached + n}, got {attn_mask.shape}")
    empty = np.flatnonzero(~attn_mask.any(axis=1))
    if empty.size:
        raise SpaceLayoutError(f"attention mask row {int(empty[0])} attends to nothing")
    if pos.shape != (n,):
        raise SpaceLayoutError(f"expected {n} position indices, got {pos.size}")
    if pos.min() < 0 or pos.max() >= config.max_position:
        raise SpaceInvalidConfig(f"position index {int(pos.max())} exceeds max_position {config.max_position}")


def forward_node(params: ModelParams,
                 tokens: Sequence[int],
                 attn_mask: np.ndarray,
                 pos_indices: Sequence[int],
                 cache: Optional[KVCache] = None,
                 kinds: Optional[Sequence[SlotKind]] = None,
                 tape: Optional[Tape] = None) -> Node:
    """
    Run the transformer and return the |tokens| x vocab probability rows as a graph node.

    :param tokens: token ids to process
    :param attn_mask: boolean |tokens| x (cached + |tokens|); row i lists the slots token i may see
    :param pos_indices: one position index per token
    :param cache: optional cache; its slots precede the new tokens and the new keys/values are appended
    :param kinds: slot kinds recorded in the cache (default: MASK for mask tokens, ACCEPTED otherwise)
    :param tape: record the computation for a backward pass
    :raises SpaceLayoutError: for malformed inputs or an all-zero mask row
    :raises SpaceInvalidConfig: for a position index >= max_position
    """
    config = params.config
    tok = np.asarray(tokens, dtype=np.int64).ravel()
    mask = np.asarray(attn_mask, dtype=bool)
    pos = np.asarray(pos_indices, dtype=np.int64).ravel()
    cached = len(cache) if cache is not None else 0
    if mask.ndim != 2:
        raise SpaceLayoutError("attention mask must be a matrix")
    _check_inputs(config, tok, mask, pos, cached)
    if kinds is not None and len(kinds) != tok.size:
        raise SpaceLayoutError("one slot kind per token is required")

    p = lambda name: param_node(params[name], tape)
    additive = np.where(mask, 0.0, MASKED_LOGIT)
    head_dim = config.head_dim
    inv_sqrt = 1.0 / math.sqrt(head_dim)

    # per-layer keys/values of the new tokens; written to the cache only once the pass succeeds
    new_kv = []
    x = add(take_rows(p("embed.token"), tok), take_rows(p("embed.position"), pos))
    for layer in range(config.n_layers):
        prefix = f"layers.{layer}"
        h = layer_norm_rows(x, p(f"{prefix}.ln1.gain"), p(f"{prefix}.ln1.bias"), config.layer_norm_eps)
        q = add_row(matmul(h, p(f"{prefix}.attn.wq")), p(f"{prefix}.attn.bq"))
        k = add_row(matmul(h, p(f"{prefix}.attn.wk")), p(f"{prefix}.attn.bk"))
        v = add_row(matmul(h, p(f"{prefix}.attn.wv")), p(f"{prefix}.attn.bv"))
        if cached:
            k_all = concat_rows([constant(cache.keys[layer]), k])
            v_all = concat_rows([constant(cache.values[layer]), v])
        else:
            k_all, v_all = k, v
        new_kv.append((k.value.copy(), v.value.copy()))

        heads = []
        for head in range(config.n_heads):
            lo, hi = head * head_dim, (head + 1) * head_dim
            scores = scale(matmul(slice_cols(q, lo, hi), transpose(slice_cols(k_all, lo, hi))), inv_sqrt)
            weights = softmax_rows(add_constant(scores, additive))
            heads.append(matmul(weights, slice_cols(v_all, lo, hi)))
        attended = concat_cols(heads) if len(heads) > 1 else heads[0]
        x = add(x, add_row(matmul(attended, p(f"{prefix}.attn.wo")), p(f"{prefix}.attn.bo")))

        h = layer_norm_rows(x, p(f"{prefix}.ln2.gain"), p(f"{prefix}.ln2.bias"), config.layer_norm_eps)
        h = gelu(add_row(matmul(h, p(f"{prefix}.mlp.w1")), p(f"{prefix}.mlp.b1")))
        x = add(x, add_row(matmul(h, p(f"{prefix}.mlp.w2")), p(f"{prefix}.mlp.b2")))

    h = layer_norm_rows(x, p("final_ln.gain"), p("final_ln.bias"), config.layer_norm_eps)
    logits = add_row(matmul(h, p("head.weight")), p("head.bias"))
    # the mask token is an input-only placeholder and is never predicted
    never = np.zeros((1, config.vocab_size))
    never[0, config.mask_token_id] = MASKED_LOGIT
    probs = softmax_rows(add_constant(logits, never))

    if cache is not None:
        if kinds is None:
            kinds = [SlotKind.MASK if t == config.mask_token_id else SlotKind.ACCEPTED for t in tok]
        for layer, (keys, values) in enumerate(new_kv):
            cache.append(layer, keys, values)
        cache.positions.extend(int(i) for i in pos)
        cache.kinds.extend(kinds)
    return probs


def forward(params: ModelParams,
            tokens: Sequence[int],
            attn_mask: Optional[np.ndarray],
            pos_indices: Optional[Sequence[int]],
            cache: Optional[KVCache] = None,
            kinds: Optional[Sequence[SlotKind]] = None) -> np.ndarray:
    """
    Inference forward pass; returns the probability rows as a plain array.

    A None `attn_mask` means causal over cache + tokens; a None `pos_indices` continues after the
    cached positions.
    """
    n = len(tokens)
    cached = len(cache) if cache is not None else 0
    if attn_mask is None:
        attn_mask = causal_mask(n, cached)
    if pos_indices is None:
        start = (cache.positions[-1] + 1) if cached else 0
        pos_indices = list(range(start, start + n))
    return forward_node(params, tokens, attn_mask, pos_indices, cache=cache, kinds=kinds).value
