# coding: utf-8
"""
The extended decoding input.

For a context of length l and k candidates the input is

    x_1 .. x_l, [M]*k, c_1, [M]*k, c_2, ..., c_k, [M]*k

i.e. k+1 groups of k mask tokens with one candidate between consecutive groups, for a total length of
l + k(k+2).  All positions here are 0-indexed: group g (1-based) starts at l + (g-1)(k+1) and candidate
c_i (1-based) sits at l + i(k+1) - 1.
"""

from dataclasses import dataclass
from typing import List, Sequence, Tuple

import numpy as np

from .exceptions import SpaceLayoutError

__all__ = ["DecodeLayout", "build_layout", "build_attention_mask", "attention_mask_for", "build_position_indices",
           "literal_mask_divergence", "render_mask_grid", "extended_length"]


def extended_length(prompt_len: int, k: int) -> int:
    return prompt_len + k * (k + 2)


@dataclass(frozen=True)
class DecodeLayout:
    tokens: Tuple[int, ...]
    attn_mask: np.ndarray
    pos_indices: Tuple[int, ...]
    prompt_len: int
    k: int
    mask_token_id: int
    candidate_positions: Tuple[int, ...]
    group_starts: Tuple[int, ...]
    group_ids: Tuple[int, ...]

    def __len__(self) -> int:
        return len(self.tokens)

    def group_rows(self, group: int) -> List[int]:
        """
        Layout positions of the k masks of `group` (1-based, 1..k+1).
        """
        if not 1 <= group <= self.k + 1:
            raise SpaceLayoutError(f"group {group} outside 1..{self.k + 1}")
        start = self.group_starts[group - 1]
        return list(range(start, start + self.k))

    def verify_rows(self) -> List[int]:
        """
        Rows whose outputs are the AR distributions: the last context position, then every candidate.
        """
        return [self.prompt_len - 1] + list(self.candidate_positions)


def build_layout(prompt: Sequence[int], candidates: Sequence[int], k: int, mask_token_id: int) -> DecodeLayout:
    """
    Build tokens, group-aware attention mask and position indices for one decoding step.

    :param prompt: the context so far (prompt plus accepted output)
    :param candidates: exactly k drafted tokens
    :raises SpaceLayoutError: for a bad candidate count, an empty prompt or a mask token in prompt/candidates
    """
    if k < 1:
        raise SpaceLayoutError(f"k must be >= 1, got {k}")
    if len(candidates) != k:
        raise SpaceLayoutError(f"expected {k} candidates, got {len(candidates)}")
    if len(prompt) == 0:
        raise SpaceLayoutError("prompt must not be empty")
    if mask_token_id in prompt:
        raise SpaceLayoutError(f"prompt contains the mask token {mask_token_id}")
    if mask_token_id in candidates:
        raise SpaceLayoutError(f"candidates contain the mask token {mask_token_id}")

    l = len(prompt)
    tokens = [int(t) for t in prompt]
    group_ids = [0] * l
    group_starts = []
    candidate_positions = []
    for group in range(1, k + 2):
        group_starts.append(len(tokens))
        tokens.extend([mask_token_id] * k)
        group_ids.extend([group] * k)
        if group <= k:
            candidate_positions.append(len(tokens))
            tokens.append(int(candidates[group - 1]))
            group_ids.append(0)

    mask = attention_mask_for(tokens, group_ids, mask_token_id)
    return DecodeLayout(tokens=tuple(tokens),
                        attn_mask=mask,
                        pos_indices=tuple(build_position_indices(mask)),
                        prompt_len=l,
                        k=k,
                        mask_token_id=mask_token_id,
                        candidate_positions=tuple(candidate_positions),
                        group_starts=tuple(group_starts),
                        group_ids=tuple(group_ids))


def attention_mask_for(tokens: Sequence[int], group_ids: Sequence[int], mask_token_id: int) -> np.ndarray:
    """
    A[i, j] is True iff i >= j and either token j is not a mask, or tokens i and j are masks of the same group.
    """
    tok = np.asarray(tokens)
    groups = np.asarray(group_ids)
    is_mask = tok == mask_token_id
    causal = np.tril(np.ones((tok.size, tok.size), dtype=bool))
    visible = ~is_mask[None, :] | (is_mask[:, None] & is_mask[None, :] & (groups[:, None] == groups[None, :]))
    return causal & visible


def build_attention_mask(layout: DecodeLayout) -> np.ndarray:
    return attention_mask_for(layout.tokens, layout.group_ids, layout.mask_token_id)


def build_position_indices(attn_mask: np.ndarray) -> List[int]:
    """
    Position index of every row: the number of slots it attends to, minus one.
    """
    return [int(s) - 1 for s in np.asarray(attn_mask, dtype=bool).sum(axis=1)]


def literal_mask_divergence(layout: DecodeLayout) -> List[Tuple[int, int]]:
    """
    Cells (i, j) where the distance rule "both masks and i - j < k" disagrees with group membership.

    Empty for k <= 2; from k = 3 the distance rule lets a group see the tail of the previous one.
    """
    tok = np.asarray(layout.tokens)
    n = tok.size
    is_mask = tok == layout.mask_token_id
    rows, cols = np.indices((n, n))
    causal = rows >= cols
    literal = causal & (~is_mask[None, :] | (is_mask[:, None] & is_mask[None, :] & (rows - cols < layout.k)))
    differ = np.argwhere(literal != layout.attn_mask)
    return [(int(i), int(j)) for i, j in differ]


def render_mask_grid(layout: DecodeLayout) -> str:
    """
    Text grid of the attention mask: one line per attending row, "#" for a visible column, "." otherwise.
    Each line is prefixed with its position, its position index and P (context), C (candidate) or M (mask).
    """
    candidates = set(layout.candidate_positions)
    lines = []
    for i, row in enumerate(layout.attn_mask):
        if layout.tokens[i] == layout.mask_token_id:
            kind = "M"
        elif i in candidates:
            kind = "C"
        else:
            kind = "P"
        cells = "".join("#" if v else "." for v in row)
        lines.append(f"{i:>3} {layout.pos_indices[i]:>3} {kind} {cells}")
    return "\n".join(lines)
