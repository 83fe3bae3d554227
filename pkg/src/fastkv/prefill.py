"""Two-stage FastKV prefill and the baseline policies (full, SnapKV, StreamingLLM, GemFilter)."""

from __future__ import annotations

import configparser
from dataclasses import asdict, dataclass

import numpy as np

from .kv_cache import KVCache, LayerCache, kv_compress, uncompressed
from .model import LayerOutput, ModelWeights, embed_tokens, full_prefill, layer_forward, lm_logits
from .saliency import layer_saliency, rate_budget, select_top

POLICY_KINDS = ("fastkv", "full", "snapkv", "streamingllm", "gemfilter")
STREAMING_SINKS = 4


@dataclass(frozen=True)
class PolicyConfig:
    tsp_layer: int = 15
    tsp_rate: float = 0.2
    kv_retention_rate: float = 0.1
    window_size: int = 8
    pooling_kernel: int = 7
    policy_kind: str = "fastkv"
    pooling: str = "max"

    def validate(self, num_layers: int | None = None) -> "PolicyConfig":
        if self.policy_kind not in POLICY_KINDS:
            raise ValueError(f"unknown policy kind {self.policy_kind!r}; expected one of {POLICY_KINDS}")
        if not 0 < self.tsp_rate <= 1:
            raise ValueError(f"tsp_rate must be in (0, 1], got {self.tsp_rate}")
        if not 0 < self.kv_retention_rate <= 1:
            raise ValueError(f"kv_retention_rate must be in (0, 1], got {self.kv_retention_rate}")
        if self.window_size < 1:
            raise ValueError("window_size must be >= 1")
        if self.pooling_kernel < 1 or self.pooling_kernel % 2 == 0:
            raise ValueError(f"pooling_kernel must be odd and >= 1, got {self.pooling_kernel}")
        if self.pooling not in ("max", "avg"):
            raise ValueError(f"pooling must be 'max' or 'avg', got {self.pooling!r}")
        if self.tsp_layer < 0 or (num_layers is not None and self.tsp_layer >= num_layers):
            raise ValueError(f"tsp_layer {self.tsp_layer} out of range for {num_layers} layers")
        return self

    def to_dict(self) -> dict:
        return asdict(self)


REFERENCE_DEFAULTS = dict(window_size=8, pooling_kernel=7, tsp_rate=0.2, kv_retention_rate=0.1)

_FIELD_TYPES = {"tsp_layer": int, "tsp_rate": float, "kv_retention_rate": float, "window_size": int,
                "pooling_kernel": int, "policy_kind": str, "pooling": str}


def parse_policy_config(text: str, **overrides) -> PolicyConfig:
    """Parse flat `key = value` lines (``#``/``;`` comments; an optional ``[policy]`` header)."""
    parser = configparser.ConfigParser(inline_comment_prefixes=("#", ";"))
    if not text.lstrip().startswith("["):
        text = "[policy]\n" + text
    parser.read_string(text)
    section = parser["policy"] if parser.has_section("policy") else parser[parser.sections()[0]]
    values = {}
    for key, raw in section.items():
        if key not in _FIELD_TYPES:
            raise ValueError(f"unknown policy key {key!r}")
        values[key] = _FIELD_TYPES[key](raw.strip())
    values.update(overrides)
    return PolicyConfig(**values).validate()


def load_policy_config(path, **overrides) -> PolicyConfig:
    with open(path) as fh:
        return parse_policy_config(fh.read(), **overrides)


@dataclass
class PrefillReport:
    kv_cache: KVCache
    final_logits: np.ndarray
    final_hidden: np.ndarray  # last token, final layer output, before the final norm
    propagated_positions: np.ndarray  # original prompt positions that reached the last layer
    per_layer_context_len: list[int]
    prompt_len: int
    next_position: int  # RoPE position for the first decoded token
    policy: PolicyConfig
    prepass_layers: int = 0  # GemFilter: full-context layers run before the restart
    flop_account: object = None


def hidden_compress(layer_out: LayerOutput, tsp_rate: float, kernel: int = 7, window_size: int = 8,
                    pooling: str = "max"):
    """Select the hidden-state rows propagated past the TSP layer.

    Returns (reduced hidden states, kept row indices, kept original positions).
    """
    n = layer_out.context_len
    if n == 0:
        raise ValueError("empty context")
    w = min(window_size, n)
    total = rate_budget(n, tsp_rate, w)
    pos = layer_out.position_ids if layer_out.position_ids is not None else np.arange(n)
    if total == n:
        idx = np.arange(n)
        return layer_out.hidden_states, idx, pos.copy()
    sal = layer_saliency(layer_out.attention_scores, kernel, pooling)
    idx = select_top(sal, total - w, w).selected_indices
    return layer_out.hidden_states[idx], idx, pos[idx]


def _finish(weights, policy, caches, hidden, propagated, ctx_lens, n, next_position, prepass=0):
    from .accounting import flop_account

    report = PrefillReport(
        kv_cache=KVCache(caches, n),
        final_logits=lm_logits(weights, hidden[-1]),
        final_hidden=hidden[-1].copy(),
        propagated_positions=np.asarray(propagated, dtype=np.int64),
        per_layer_context_len=ctx_lens,
        prompt_len=n,
        next_position=next_position,
        policy=policy,
        prepass_layers=prepass,
    )
    report.flop_account = flop_account(report, weights.config)
    return report


def fastkv_prefill(weights: ModelWeights, token_ids, policy: PolicyConfig) -> PrefillReport:
    cfg = weights.config
    policy.validate(cfg.num_layers)
    if policy.policy_kind != "fastkv":
        raise ValueError(f"fastkv_prefill called with policy_kind={policy.policy_kind!r}")
    x = embed_tokens(weights, token_ids)
    n = x.shape[0]
    pos = np.arange(n, dtype=np.int64)
    caches, ctx_lens = [], []
    for l in range(cfg.num_layers):
        out = layer_forward(weights, l, x, pos, policy.window_size)
        caches.append(kv_compress(out, policy.kv_retention_rate, policy.pooling_kernel,
                                  policy.window_size, cfg, policy.pooling))
        ctx_lens.append(out.context_len)
        x = out.hidden_states
        if l == policy.tsp_layer:
            x, _, pos = hidden_compress(out, policy.tsp_rate, policy.pooling_kernel,
                                        policy.window_size, policy.pooling)
    return _finish(weights, policy, caches, x, pos, ctx_lens, n, n)


def _full(weights, token_ids, policy, compress):
    cfg = weights.config
    outputs, _ = full_prefill(weights, token_ids, policy.window_size)
    n = outputs[0].context_len
    caches = [compress(out) for out in outputs]
    return _finish(weights, policy, caches, outputs[-1].hidden_states, np.arange(n),
                   [n] * cfg.num_layers, n, n)


def streaming_positions(n: int, rate: float, window_size: int, sinks: int = STREAMING_SINKS):
    total = rate_budget(n, rate, window_size)
    if total >= n:
        return np.arange(n)
    s = min(sinks, total - 1)
    return np.concatenate([np.arange(s), np.arange(n - (total - s), n)])


def _gemfilter(weights, token_ids, policy):
    cfg = weights.config
    ids = np.asarray(token_ids, dtype=np.int64)
    x = embed_tokens(weights, ids)
    n = x.shape[0]
    pos = np.arange(n, dtype=np.int64)
    for l in range(policy.tsp_layer + 1):
        out = layer_forward(weights, l, x, pos, policy.window_size)
        x = out.hidden_states
    w = min(policy.window_size, n)
    total = rate_budget(n, policy.tsp_rate, w)
    if total == n:
        # selecting every token makes the restart a plain full prefill
        return _full(weights, ids, policy, lambda o: uncompressed(o, cfg))
    sal = layer_saliency(out.attention_scores, policy.pooling_kernel, policy.pooling)
    selected = select_top(sal, total - w, w).selected_indices

    # restart on the fragmented prompt with contiguous positions; every layer keeps all its KV
    outputs, _ = full_prefill(weights, ids[selected], policy.window_size)
    k = len(selected)
    caches = [uncompressed(o, cfg) for o in outputs]
    return _finish(weights, policy, caches, outputs[-1].hidden_states, selected,
                   [k] * cfg.num_layers, n, k, prepass=policy.tsp_layer + 1)


def run_policy(weights: ModelWeights, token_ids, policy: PolicyConfig) -> PrefillReport:
    cfg = weights.config
    policy.validate(cfg.num_layers)
    kind = policy.policy_kind
    if kind == "fastkv":
        return fastkv_prefill(weights, token_ids, policy)
    if kind == "full":
        return _full(weights, token_ids, policy, lambda out: uncompressed(out, cfg))
    if kind == "snapkv":
        return _full(weights, token_ids, policy, lambda out: kv_compress(
            out, policy.kv_retention_rate, policy.pooling_kernel, policy.window_size, cfg,
            policy.pooling))
    if kind == "streamingllm":
        def keep(out):
            full = uncompressed(out, cfg)
            idx = streaming_positions(out.context_len, policy.kv_retention_rate, policy.window_size)
            return LayerCache(full.keys[:, idx], full.values[:, idx], full.positions[:, idx],
                              out.context_len)
        return _full(weights, token_ids, policy, keep)
    if kind == "gemfilter":
        return _gemfilter(weights, token_ids, policy)
    raise ValueError(f"unknown policy kind {kind!r}")
