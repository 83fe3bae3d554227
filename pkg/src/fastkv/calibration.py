"""TSP-layer selection over a calibration set."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .model import ModelWeights, full_prefill
from .prefill import PolicyConfig, fastkv_prefill


@dataclass
class CalibrationSet:
    prompts: list
    description: str = ""

    def validate(self, window_size: int = 8) -> "CalibrationSet":
        if len(self.prompts) == 0:
            raise ValueError("calibration set is empty")
        for i, p in enumerate(self.prompts):
            if len(p) < window_size:
                raise ValueError(f"calibration prompt {i} has {len(p)} tokens, fewer than window {window_size}")
        return self


@dataclass
class CalibrationResult:
    distances: np.ndarray  # mean normalized squared distance per candidate layer
    raw_distances: np.ndarray  # mean unnormalized squared distance per candidate layer
    chosen_layer: int
    argmin_layer: int
    l_max: int
    threshold_rule: dict = field(default_factory=dict)


def squared_distance(reference: np.ndarray, other: np.ndarray) -> tuple[float, float]:
    """(squared L2 distance, same divided by the squared norm of the reference)."""
    a = np.asarray(reference, dtype=np.float64)
    b = np.asarray(other, dtype=np.float64)
    raw = float(np.sum((a - b) ** 2))
    denom = float(np.sum(a * a))
    return raw, (raw / denom if denom > 0 else raw)


def final_hidden_distance(weights: ModelWeights, prompt, candidate_layer: int, tsp_rate: float = 0.2,
                          window_size: int = 8, kernel: int = 7, normalized: bool = True,
                          reference: np.ndarray | None = None) -> float:
    """Distance between the last token's final-layer hidden state under full context and under TSP.

    KV retention is fixed at 1.0 so only TSP placement matters.
    """
    if not 0 <= candidate_layer < weights.config.num_layers:
        raise ValueError(f"candidate_layer {candidate_layer} out of range")
    if reference is None:
        outputs, _ = full_prefill(weights, prompt, window_size)
        reference = outputs[-1].hidden_states[-1]
    policy = PolicyConfig(tsp_layer=candidate_layer, tsp_rate=tsp_rate, kv_retention_rate=1.0,
                          window_size=window_size, pooling_kernel=kernel)
    report = fastkv_prefill(weights, prompt, policy)
    raw, norm = squared_distance(reference, report.final_hidden)
    return norm if normalized else raw


def distance_matrix(weights: ModelWeights, calib: CalibrationSet, layers, tsp_rate: float,
                    window_size: int = 8, kernel: int = 7):
    """[prompts, layers] arrays of (raw, normalized) distances."""
    raw = np.zeros((len(calib.prompts), len(layers)))
    norm = np.zeros_like(raw)
    for i, prompt in enumerate(calib.prompts):
        outputs, _ = full_prefill(weights, prompt, window_size)
        ref = outputs[-1].hidden_states[-1]
        for j, layer in enumerate(layers):
            policy = PolicyConfig(tsp_layer=layer, tsp_rate=tsp_rate, kv_retention_rate=1.0,
                                  window_size=window_size, pooling_kernel=kernel)
            raw[i, j], norm[i, j] = squared_distance(ref, fastkv_prefill(weights, prompt, policy).final_hidden)
    return raw, norm


def select_tsp_layer(weights: ModelWeights, calib: CalibrationSet, l_max: int | None = None,
                     tsp_rate: float = 0.2, tolerance: float = 0.05, window_size: int = 8,
                     kernel: int = 7) -> CalibrationResult:
    """Earliest layer <= l_max whose mean normalized distance is within (1 + tolerance) of the minimum."""
    L = weights.config.num_layers
    if l_max is None:
        l_max = int(0.75 * L)
    if not 0 <= l_max < L:
        raise ValueError(f"l_max {l_max} out of range for {L} layers")
    if tolerance < 0:
        raise ValueError("tolerance must be >= 0")
    calib.validate(window_size)

    layers = list(range(l_max + 1))
    raw, norm = distance_matrix(weights, calib, layers, tsp_rate, window_size, kernel)
    mean_raw = raw.mean(axis=0)
    mean_norm = norm.mean(axis=0)
    best = float(mean_norm.min())
    threshold = best * (1.0 + tolerance)
    chosen = int(np.flatnonzero(mean_norm <= threshold)[0])
    return CalibrationResult(
        distances=mean_norm,
        raw_distances=mean_raw,
        chosen_layer=chosen,
        argmin_layer=int(np.argmin(mean_norm)),
        l_max=l_max,
        threshold_rule={"rule": "earliest layer with distance <= (1 + tolerance) * min",
                        "tolerance": tolerance, "min_distance": best, "threshold": threshold,
                        "tsp_rate": tsp_rate, "num_prompts": len(calib.prompts)},
    )


def synthetic_calibration_set(seed: int, num_prompts: int, length: int, vocab_size: int) -> CalibrationSet:
    rng = np.random.default_rng(seed)
    prompts = [rng.integers(0, vocab_size, size=length).tolist() for _ in range(num_prompts)]
    return CalibrationSet(prompts, f"synthetic seed={seed} n={num_prompts} len={length}")


def read_token_file(path) -> list[list[int]]:
    """Newline-delimited prompts, each a whitespace- or comma-separated list of token ids."""
    prompts = []
    with open(path) as fh:
        for line in fh:
            line = line.strip()
            if not line or line.startswith("#"):
                continue
            prompts.append([int(t) for t in line.replace(",", " ").split()])
    return prompts
