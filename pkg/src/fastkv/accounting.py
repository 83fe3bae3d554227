"""Analytic FLOP and KV-memory accounting for prefill policies.

FLOPs use the 2*m*k*n matmul convention. Attention scores are counted over the
full (unmasked) square since the engine materializes them.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass
from fractions import Fraction

from .model import ModelConfig


def _frac(x) -> Fraction:
    return x if isinstance(x, Fraction) else Fraction(repr(float(x)))


def prefill_compute_rate(num_layers: int, tsp_layer: int, tsp_rate: float) -> float:
    """Token-linear prefill compute rate: layers through the TSP layer see the full context."""
    if not 0 <= tsp_layer < num_layers:
        raise ValueError(f"tsp_layer {tsp_layer} out of range for {num_layers} layers")
    full = tsp_layer + 1
    rate = (full + (num_layers - full) * _frac(tsp_rate)) / num_layers
    return float(rate)


def gemfilter_compute_rate(num_layers: int, filter_layer: int, selection_rate: float,
                           prefilter: str = "inclusive") -> float:
    """Token-linear rate of filter-and-restart.

    prefilter="inclusive" counts layers 0..filter_layer as the full-context pass (what the
    engine runs); "index" counts filter_layer layers.
    """
    if prefilter == "inclusive":
        pre = filter_layer + 1
    elif prefilter == "index":
        pre = filter_layer
    else:
        raise ValueError(f"unknown prefilter convention {prefilter!r}")
    return float((pre + num_layers * _frac(selection_rate)) / num_layers)


def attention_layer_flops(config: ModelConfig, n: int) -> int:
    D, H, d = config.hidden_dim, config.num_heads, config.head_dim
    proj = 2 * n * D * (H * d) * 2 + 2 * n * D * config.kv_dim * 2  # q, o + k, v
    scores = 2 * 2 * H * n * n * d  # QK^T and PV
    return proj + scores


def mlp_layer_flops(config: ModelConfig, n: int) -> int:
    return 3 * 2 * n * config.hidden_dim * config.mlp_dim


def layer_flops(config: ModelConfig, n: int) -> int:
    return attention_layer_flops(config, n) + mlp_layer_flops(config, n)


def lm_head_flops(config: ModelConfig) -> int:
    return 2 * config.hidden_dim * config.vocab_size


def full_context_flops(config: ModelConfig, n: int) -> int:
    return config.num_layers * layer_flops(config, n) + lm_head_flops(config)


def full_kv_elements(config: ModelConfig, n: int) -> int:
    return 2 * config.num_layers * config.num_kv_heads * n * config.head_dim


@dataclass
class ComputeAccount:
    attention_flops: list[int]
    mlp_flops: list[int]
    prepass_flops: int
    total_flops: int
    full_context_flops: int
    prefill_compute_rate: float  # true FLOP ratio vs full context
    linear_compute_rate: float  # token-count ratio, comparable to the published rates
    kv_bytes: int
    full_kv_bytes: int
    kv_retention_fraction: float
    bytes_per_element: int = 2

    def to_dict(self) -> dict:
        return asdict(self)


def flop_account(report, config: ModelConfig, bytes_per_element: int = 2) -> ComputeAccount:
    from .kv_cache import cache_memory_bytes

    n = report.prompt_len
    attn = [attention_layer_flops(config, c) for c in report.per_layer_context_len]
    mlp = [mlp_layer_flops(config, c) for c in report.per_layer_context_len]
    prepass = report.prepass_layers * layer_flops(config, n)
    total = sum(attn) + sum(mlp) + prepass + lm_head_flops(config)
    full = full_context_flops(config, n)
    tokens = sum(report.per_layer_context_len) + report.prepass_layers * n
    kv = cache_memory_bytes(report.kv_cache, bytes_per_element)
    full_kv = full_kv_elements(config, n) * bytes_per_element
    return ComputeAccount(
        attention_flops=attn,
        mlp_flops=mlp,
        prepass_flops=prepass,
        total_flops=total,
        full_context_flops=full,
        prefill_compute_rate=total / full,
        linear_compute_rate=float(Fraction(tokens, config.num_layers * n)),
        kv_bytes=kv,
        full_kv_bytes=full_kv,
        kv_retention_fraction=kv / full_kv,
        bytes_per_element=bytes_per_element,
    )
