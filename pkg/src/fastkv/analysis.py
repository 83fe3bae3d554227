"""Diagnostics: critical-token overlap across layers, top-K attention recall, TSP-layer sweeps.

All attention-mass rankings here use raw head-averaged window mass (no pooling).
"""

from __future__ import annotations

import csv
import io
from dataclasses import dataclass

import numpy as np

from .calibration import squared_distance
from .model import ModelWeights, full_prefill
from .prefill import PolicyConfig, run_policy
from .saliency import layer_saliency

SCHEMA_VERSION = "fastkv-analysis/1"


@dataclass
class OverlapCurve:
    base_layer: int
    distances: list[int]
    overlap_ratio: np.ndarray
    top_k: int


@dataclass
class RecallCurve:
    layer: int
    k_values: list[int]
    recall: np.ndarray


@dataclass
class SweepResult:
    layers: list[int]
    fastkv_distance: np.ndarray
    gemfilter_distance: np.ndarray
    tsp_rate: float
    metric: str


def layer_masses(weights: ModelWeights, prompt, window_size: int = 8) -> list[np.ndarray]:
    outputs, _ = full_prefill(weights, prompt, window_size)
    return [layer_saliency(o.attention_scores, kernel=1).scores for o in outputs]


def top_k_set(mass: np.ndarray, k: int) -> set[int]:
    order = np.argsort(-mass, kind="stable")
    return set(order[:k].tolist())


def overlap_from_masses(masses: list[np.ndarray], top_k: int, max_distance: int) -> list[OverlapCurve]:
    n = len(masses[0])
    if top_k > n:
        raise ValueError(f"top_k {top_k} exceeds context length {n}")
    if top_k < 1:
        raise ValueError("top_k must be >= 1")
    sets = [top_k_set(m, top_k) for m in masses]
    curves = []
    for base in range(len(masses)):
        ds = list(range(0, min(max_distance, len(masses) - 1 - base) + 1))
        ratios = np.array([len(sets[base] & sets[base + d]) / top_k for d in ds])
        curves.append(OverlapCurve(base, ds, ratios, top_k))
    return curves


def critical_token_overlap(weights: ModelWeights, prompt, top_k: int, max_distance: int,
                           window_size: int = 8) -> list[OverlapCurve]:
    """One curve per base layer: fraction of its top-k tokens shared with the layer d deeper."""
    if top_k > len(prompt):
        raise ValueError(f"top_k {top_k} exceeds prompt length {len(prompt)}")
    return overlap_from_masses(layer_masses(weights, prompt, window_size), top_k, max_distance)


def mean_overlap_by_distance(curves: list[OverlapCurve]) -> dict[int, float]:
    acc: dict[int, list[float]] = {}
    for c in curves:
        for d, r in zip(c.distances, c.overlap_ratio):
            acc.setdefault(d, []).append(float(r))
    return {d: float(np.mean(v)) for d, v in sorted(acc.items())}


def recall_from_mass(mass: np.ndarray, k_values) -> np.ndarray:
    cum = np.cumsum(np.sort(mass.astype(np.float64))[::-1])
    ks = np.asarray(k_values, dtype=np.int64)
    if np.any(ks < 0) or np.any(ks > len(mass)):
        raise ValueError(f"k values must lie in [0, {len(mass)}]")
    out = np.zeros(len(ks))
    nz = ks > 0
    out[nz] = cum[ks[nz] - 1] / cum[-1]
    return out


def topk_attention_recall(weights: ModelWeights, prompt, k_values, window_size: int = 8) -> list[RecallCurve]:
    """Per layer, the share of window attention mass captured by the K most attended tokens."""
    k_values = sorted(int(k) for k in k_values)
    return [RecallCurve(l, k_values, recall_from_mass(m, k_values))
            for l, m in enumerate(layer_masses(weights, prompt, window_size))]


def tsp_layer_sweep(weights: ModelWeights, prompts, layer_range, tsp_rate: float = 0.2,
                    window_size: int = 8, kernel: int = 7, metric: str = "logits") -> SweepResult:
    """Mean normalized distance to full context for FastKV TSP and a GemFilter-style restart,
    both selecting the same number of tokens at each candidate layer (KV retention 1.0)."""
    if metric not in ("logits", "hidden"):
        raise ValueError(f"metric must be 'logits' or 'hidden', got {metric!r}")
    layers = list(layer_range)
    L = weights.config.num_layers
    if any(not 0 <= l < L for l in layers):
        raise ValueError(f"layer_range must lie within [0, {L})")
    fast = np.zeros((len(prompts), len(layers)))
    gem = np.zeros_like(fast)

    def pick(report):
        return report.final_logits if metric == "logits" else report.final_hidden

    for i, prompt in enumerate(prompts):
        outputs, logits = full_prefill(weights, prompt, window_size)
        ref = logits if metric == "logits" else outputs[-1].hidden_states[-1]
        for j, layer in enumerate(layers):
            base = PolicyConfig(tsp_layer=layer, tsp_rate=tsp_rate, kv_retention_rate=1.0,
                                window_size=window_size, pooling_kernel=kernel)
            fast[i, j] = squared_distance(ref, pick(run_policy(weights, prompt, base)))[1]
            g = PolicyConfig(**{**base.to_dict(), "policy_kind": "gemfilter"})
            gem[i, j] = squared_distance(ref, pick(run_policy(weights, prompt, g)))[1]
    return SweepResult(layers, fast.mean(axis=0), gem.mean(axis=0), tsp_rate, metric)


# -- CSV ----------------------------------------------------------------------

def _csv(header: list[str], rows) -> str:
    buf = io.StringIO()
    buf.write(f"# {SCHEMA_VERSION}\n")
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(header)
    writer.writerows(rows)
    return buf.getvalue()


def overlap_csv(curves: list[OverlapCurve]) -> str:
    rows = [(c.base_layer, d, repr(float(r))) for c in curves for d, r in zip(c.distances, c.overlap_ratio)]
    return _csv(["layer", "distance", "overlap_ratio"], rows)


def recall_csv(curves: list[RecallCurve]) -> str:
    rows = [(c.layer, k, repr(float(r))) for c in curves for k, r in zip(c.k_values, c.recall)]
    return _csv(["layer", "k", "recall"], rows)


def sweep_csv(result: SweepResult) -> str:
    rows = [(l, repr(float(f)), repr(float(g)))
            for l, f, g in zip(result.layers, result.fastkv_distance, result.gemfilter_distance)]
    return _csv(["layer", "fastkv_distance", "gemfilter_distance"], rows)
