"""Token saliency from observation-window attention, and top-k selection."""

from __future__ import annotations

from dataclasses import dataclass, field
from fractions import Fraction
import math

import numpy as np

from .model import AttentionScores, ModelConfig


@dataclass
class SaliencyVector:
    scores: np.ndarray
    granularity: str  # "head" | "kv_group" | "layer"
    layer_index: int = -1
    head_or_group_index: int | None = None

    def __len__(self):
        return len(self.scores)


@dataclass
class SelectionResult:
    selected_indices: np.ndarray
    window_indices: np.ndarray
    budget: int
    tie_break_applied: bool = False
    clamped: bool = False


def pool1d(x: np.ndarray, kernel: int, mode: str = "max") -> np.ndarray:
    """Same-length 1-D pooling; edge positions pool over the in-range part only."""
    if kernel < 1 or kernel % 2 == 0:
        raise ValueError(f"pooling kernel must be odd and >= 1, got {kernel}")
    if kernel == 1:
        return x.copy()
    r = kernel // 2
    if mode == "max":
        padded = np.pad(x, r, constant_values=-np.inf)
        return np.lib.stride_tricks.sliding_window_view(padded, kernel).max(axis=-1)
    if mode == "avg":
        padded = np.pad(x.astype(np.float64), r)
        sums = np.lib.stride_tricks.sliding_window_view(padded, kernel).sum(axis=-1)
        counts = np.lib.stride_tricks.sliding_window_view(
            np.pad(np.ones(len(x)), r), kernel).sum(axis=-1)
        return (sums / counts).astype(x.dtype)
    raise ValueError(f"unknown pooling mode {mode!r}")


def window_mass(att: AttentionScores, head: int) -> np.ndarray:
    """Attention mass each key position receives from the window queries of one head."""
    return att.scores[head].sum(axis=0)


def head_saliency(att: AttentionScores, head: int, kernel: int = 7, pooling: str = "max",
                  layer_index: int = -1) -> SaliencyVector:
    if not 0 <= head < att.num_heads:
        raise IndexError(f"head {head} out of range for {att.num_heads} heads")
    if kernel % 2 == 0:
        raise ValueError(f"pooling kernel must be odd, got {kernel} (ambiguous center)")
    s = pool1d(window_mass(att, head), kernel, pooling)
    return SaliencyVector(s, "head", layer_index, head)


def group_saliency(att: AttentionScores, group: int, kernel: int, config: ModelConfig,
                   pooling: str = "max", layer_index: int = -1) -> SaliencyVector:
    if not 0 <= group < config.num_kv_heads:
        raise IndexError(f"group {group} out of range for {config.num_kv_heads} kv heads")
    g = config.group_size
    per_head = [head_saliency(att, h, kernel, pooling).scores for h in range(group * g, (group + 1) * g)]
    return SaliencyVector(np.mean(per_head, axis=0), "kv_group", layer_index, group)


def all_group_saliency(att: AttentionScores, kernel: int, config: ModelConfig,
                       pooling: str = "max") -> np.ndarray:
    """[kv_heads, context] matrix of group saliencies."""
    return np.stack([group_saliency(att, g, kernel, config, pooling).scores
                     for g in range(config.num_kv_heads)])


def layer_saliency(att: AttentionScores, kernel: int = 7, pooling: str = "max",
                   layer_index: int = -1) -> SaliencyVector:
    per_head = [head_saliency(att, h, kernel, pooling).scores for h in range(att.num_heads)]
    return SaliencyVector(np.mean(per_head, axis=0), "layer", layer_index)


def round_half_up(x) -> int:
    return math.floor(x + Fraction(1, 2))


def rate_budget(context_len: int, rate: float, window_size: int) -> int:
    """Total tokens kept for a rate: round-half-up(context * rate), floored at the window, capped at context."""
    total = round_half_up(context_len * Fraction(repr(float(rate))))
    return min(context_len, max(total, min(window_size, context_len)))


def select_top(saliency, budget: int, window_size: int) -> SelectionResult:
    """Top-`budget` non-window positions (ties -> lower index) merged with the window positions."""
    scores = np.asarray(getattr(saliency, "scores", saliency))
    n = len(scores)
    w = max(0, min(window_size, n))
    window = np.arange(n - w, n)
    candidates = n - w
    clamped = budget < 0 or budget > candidates
    k = min(max(budget, 0), candidates)

    order = np.argsort(-scores[:candidates], kind="stable")
    chosen = order[:k]
    tie = 0 < k < candidates and scores[order[k - 1]] == scores[order[k]]
    selected = np.union1d(chosen, window).astype(np.int64)
    return SelectionResult(selected, window, budget, bool(tie), clamped)
