"""Edit-distance based error rates."""

from __future__ import annotations

from typing import Hashable, Sequence

import numpy as np

from .world import SEPARATOR, DomainError, World, cosine, mockSvEmbed


def edit_distance(hyp: Sequence[Hashable], ref: Sequence[Hashable]) -> int:
    """Levenshtein distance with unit insert/delete/substitute costs."""
    prev = list(range(len(ref) + 1))
    for i, h in enumerate(hyp, 1):
        cur = [i] + [0] * len(ref)
        for j, r in enumerate(ref, 1):
            cur[j] = min(prev[j] + 1, cur[j - 1] + 1, prev[j - 1] + (h != r))
        prev = cur
    return prev[-1]


def split_words(symbols: Sequence[int], separator: int = SEPARATOR) -> list[tuple]:
    words, cur = [], []
    for s in symbols:
        if s == separator:
            if cur:
                words.append(tuple(cur))
            cur = []
        else:
            cur.append(s)
    if cur:
        words.append(tuple(cur))
    return words


def cer(hyp: Sequence[int], ref: Sequence[int]) -> float:
    if len(ref) == 0:
        raise DomainError("reference text is empty")
    return edit_distance(list(hyp), list(ref)) / len(ref)


def cerWer(hyp: Sequence[int], ref: Sequence[int], separator: int = SEPARATOR) -> tuple[float, float]:
    """Symbol- and word-level error rates, both normalised by the reference length."""
    c = cer(hyp, ref)
    ref_words = split_words(ref, separator)
    hyp_words = split_words(hyp, separator)
    if not ref_words:
        return c, float(len(hyp_words) > 0)
    return c, edit_distance(hyp_words, ref_words) / len(ref_words)


def ssim_proxy(world: World, context: np.ndarray, grid: np.ndarray) -> float:
    """Cosine between mock speaker embeddings; an empty generation scores -1."""
    if len(grid) == 0:
        return -1.0
    return cosine(mockSvEmbed(world, context), mockSvEmbed(world, grid))
