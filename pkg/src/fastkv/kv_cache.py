"""Per-layer KV store with group-wise compression and incremental decoding."""

from __future__ import annotations

import json
import os
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .model import (DTYPE, LayerOutput, ModelConfig, ModelWeights, NumericError, embed_tokens,
                    lm_logits, mlp, qkv, rms_norm, softmax)
from .saliency import all_group_saliency, rate_budget, select_top


@dataclass
class LayerCache:
    keys: np.ndarray  # [kv_heads, retained, head_dim]
    values: np.ndarray
    positions: np.ndarray  # [kv_heads, retained], sorted per group
    context_len: int  # tokens this layer processed during prefill

    @property
    def num_retained(self) -> int:
        return self.keys.shape[1]

    def append(self, k: np.ndarray, v: np.ndarray, position: int) -> None:
        """k, v: [kv_heads, head_dim] for one new token."""
        self.keys = np.concatenate([self.keys, k[:, None, :]], axis=1)
        self.values = np.concatenate([self.values, v[:, None, :]], axis=1)
        col = np.full((self.positions.shape[0], 1), position, dtype=np.int64)
        self.positions = np.concatenate([self.positions, col], axis=1)


@dataclass
class KVCache:
    layers: list[LayerCache] = field(default_factory=list)
    original_context_len: int = 0

    def __len__(self):
        return len(self.layers)

    def num_elements(self) -> int:
        return sum(2 * lc.keys.size for lc in self.layers)

    def index_map(self) -> dict:
        return {str(l): {str(g): lc.positions[g].tolist() for g in range(lc.positions.shape[0])}
                for l, lc in enumerate(self.layers)}

    def dump(self, json_path, tensor_path=None) -> None:
        """JSON {layer: {group: positions}} plus a raw little-endian float32 sidecar (K then V, per layer)."""
        json_path = Path(json_path)
        tensor_path = Path(tensor_path) if tensor_path else json_path.with_suffix(".bin")
        doc = {
            "format": "fastkv-cache-dump/1",
            "original_context_len": self.original_context_len,
            "shapes": [list(lc.keys.shape) for lc in self.layers],
            "tensor_file": tensor_path.name,
            "positions": self.index_map(),
        }
        _atomic_write(json_path, json.dumps(doc, indent=1, sort_keys=True).encode())
        blob = b"".join(np.ascontiguousarray(a, dtype="<f4").tobytes()
                        for lc in self.layers for a in (lc.keys, lc.values))
        _atomic_write(tensor_path, blob)


def _atomic_write(path: Path, data: bytes) -> None:
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_bytes(data)
    os.replace(tmp, path)


def kv_compress(layer_out: LayerOutput, retention_rate: float, kernel: int, window_size: int,
                config: ModelConfig, pooling: str = "max") -> LayerCache:
    """Keep the top round(context * retention_rate) positions of each KV group (window always kept)."""
    if not 0 < retention_rate <= 1:
        raise ValueError(f"retention_rate must be in (0, 1], got {retention_rate}")
    n = layer_out.context_len
    if n == 0:
        raise ValueError("empty layer output")
    pos = layer_out.position_ids if layer_out.position_ids is not None else np.arange(n)
    w = min(window_size, n)
    total = rate_budget(n, retention_rate, w)
    if total == n:
        return LayerCache(layer_out.keys.copy(), layer_out.values.copy(),
                          np.tile(pos, (config.num_kv_heads, 1)).astype(np.int64), n)

    sal = all_group_saliency(layer_out.attention_scores, kernel, config, pooling)
    idx = np.stack([select_top(sal[g], total - w, w).selected_indices
                    for g in range(config.num_kv_heads)])
    groups = np.arange(config.num_kv_heads)[:, None]
    return LayerCache(layer_out.keys[groups, idx], layer_out.values[groups, idx],
                      pos[idx].astype(np.int64), n)


def uncompressed(layer_out: LayerOutput, config: ModelConfig) -> LayerCache:
    n = layer_out.context_len
    pos = layer_out.position_ids if layer_out.position_ids is not None else np.arange(n)
    return LayerCache(layer_out.keys.copy(), layer_out.values.copy(),
                      np.tile(pos, (config.num_kv_heads, 1)).astype(np.int64), n)


def cache_memory_bytes(cache: KVCache, bytes_per_element: int = 2) -> int:
    return cache.num_elements() * bytes_per_element


def decode_step(weights: ModelWeights, cache: KVCache, token: int, position: int):
    """One autoregressive step over the retained cache; the new K/V are appended uncompressed.

    Returns (logits, cache); the cache is updated in place.
    """
    cfg = weights.config
    if len(cache.layers) != cfg.num_layers:
        raise ValueError(f"cache has {len(cache.layers)} layers, model has {cfg.num_layers}")
    for lc in cache.layers:
        if lc.keys.shape[0] != cfg.num_kv_heads or lc.keys.shape[2] != cfg.head_dim:
            raise ValueError(f"cache tensor shape {lc.keys.shape} does not match config")
        if lc.num_retained and position <= lc.positions.max():
            raise ValueError(f"decode position {position} does not exceed retained positions")

    x = embed_tokens(weights, [token])
    pos = np.array([position], dtype=np.int64)
    scale = DTYPE(1.0 / np.sqrt(cfg.head_dim))
    for i, layer in enumerate(weights.layers):
        q, k, v = qkv(weights, layer, rms_norm(x, layer.attn_norm), pos)
        lc = cache.layers[i]
        lc.append(k[:, 0], v[:, 0], position)
        ctx = np.empty((cfg.num_heads, cfg.head_dim), DTYPE)
        for h in range(cfg.num_heads):
            g = h // cfg.group_size
            probs = softmax((lc.keys[g] @ q[h, 0]) * scale)
            ctx[h] = probs @ lc.values[g]
        x = x + ctx.reshape(1, cfg.hidden_dim) @ layer.wo
        x = (x + mlp(layer, x)).astype(DTYPE)
        if not np.all(np.isfinite(x)):
            raise NumericError(f"non-finite activations at layer {i} during decode")
    return lm_logits(weights, x[-1]), cache


def greedy_decode(weights: ModelWeights, cache: KVCache, first_logits: np.ndarray,
                  next_position: int, steps: int):
    """Greedy continuation. Returns (generated token ids, list of per-step logits)."""
    tokens, all_logits = [], []
    logits = first_logits
    for s in range(steps):
        tok = int(np.argmax(logits))
        tokens.append(tok)
        logits, cache = decode_step(weights, cache, tok, next_position + s)
        all_logits.append(logits)
    return tokens, all_logits
