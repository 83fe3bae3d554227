"""Slow reference paths and seeded generators used by the test-suite.

The oracle forward pass is written with plain Python floats and loops; it does
not call into the numpy engine.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from decimal import Decimal

import numpy as np

from .model import AttentionScores

MAX_ORACLE_LAYERS = 8
MAX_ORACLE_TOKENS = 512


@dataclass
class OracleOutputs:
    logits: list[float]
    hidden_checksums: list[float]  # sum of each layer's output hidden states
    final_hidden: list[float]  # last token, final layer, before the final norm
    window_attention: list  # [layer][head][window query][key]


def _mat(a) -> list:
    return np.asarray(a, dtype=np.float64).tolist()


def _vecmat(x, m):
    cols = len(m[0])
    out = [0.0] * cols
    for i, xi in enumerate(x):
        row = m[i]
        for j in range(cols):
            out[j] += xi * row[j]
    return out


def _rmsnorm(x, gain, eps=1e-6):
    ms = sum(v * v for v in x) / len(x)
    inv = 1.0 / math.sqrt(ms + eps)
    return [v * inv * g for v, g in zip(x, gain)]


def _rope(vec, pos, base):
    d = len(vec)
    half = d // 2
    out = [0.0] * d
    for i in range(half):
        theta = pos * base ** (-(2.0 * i) / d)
        c, s = math.cos(theta), math.sin(theta)
        a, b = vec[i], vec[i + half]
        out[i] = a * c - b * s
        out[i + half] = b * c + a * s
    return out


def _oracle_budget(n: int, rate: float, window: int) -> int:
    total = int(Decimal(n) * Decimal(repr(float(rate))) + Decimal("0.5"))
    return min(n, max(total, min(window, n)))


def oracle_forward(weights, token_ids, window_size: int = 8, tsp_layer: int | None = None,
                   tsp_rate: float = 1.0, kernel: int = 7) -> OracleOutputs:
    """Scalar forward pass; with `tsp_layer` set, only the selected rows continue past that layer."""
    cfg = weights.config
    if cfg.num_layers > MAX_ORACLE_LAYERS or len(token_ids) > MAX_ORACLE_TOKENS:
        raise ValueError(f"oracle guard: at most {MAX_ORACLE_LAYERS} layers and "
                         f"{MAX_ORACLE_TOKENS} tokens")
    H, KV, d = cfg.num_heads, cfg.num_kv_heads, cfg.head_dim
    per_group = H // KV
    embed = _mat(weights.embed)
    xs = [list(embed[t]) for t in token_ids]
    positions = list(range(len(xs)))
    checksums, window_attention = [], []

    for li, layer in enumerate(weights.layers):
        T = len(xs)
        w = min(window_size, T)
        wq, wk, wv, wo = _mat(layer.wq), _mat(layer.wk), _mat(layer.wv), _mat(layer.wo)
        g_attn, g_mlp = _mat(layer.attn_norm), _mat(layer.mlp_norm)
        wg, wu, wd = _mat(layer.w_gate), _mat(layer.w_up), _mat(layer.w_down)

        qs, ks, vs = [], [], []
        for t, x in enumerate(xs):
            h = _rmsnorm(x, g_attn)
            q, k, v = _vecmat(h, wq), _vecmat(h, wk), _vecmat(h, wv)
            p = positions[t]
            qs.append([_rope(q[i * d:(i + 1) * d], p, cfg.rope_base) for i in range(H)])
            ks.append([_rope(k[i * d:(i + 1) * d], p, cfg.rope_base) for i in range(KV)])
            vs.append([v[i * d:(i + 1) * d] for i in range(KV)])

        layer_window = [[None] * w for _ in range(H)]
        new_xs = []
        for t in range(T):
            concat = []
            for h in range(H):
                g = h // per_group
                logits = []
                for s in range(t + 1):
                    dot = 0.0
                    for e in range(d):
                        dot += qs[t][h][e] * ks[s][g][e]
                    logits.append(dot / math.sqrt(d))
                m = max(logits)
                ex = [math.exp(z - m) for z in logits]
                tot = sum(ex)
                probs = [e / tot for e in ex]
                out = [0.0] * d
                for s, p in enumerate(probs):
                    for e in range(d):
                        out[e] += p * vs[s][g][e]
                concat.extend(out)
                if t >= T - w:
                    layer_window[h][t - (T - w)] = probs + [0.0] * (T - t - 1)
            attn = _vecmat(concat, wo)
            x = [a + b for a, b in zip(xs[t], attn)]
            hm = _rmsnorm(x, g_mlp)
            gate, up = _vecmat(hm, wg), _vecmat(hm, wu)
            act = [gv / (1.0 + math.exp(-gv)) * uv for gv, uv in zip(gate, up)]
            down = _vecmat(act, wd)
            new_xs.append([a + b for a, b in zip(x, down)])
        xs = new_xs
        checksums.append(sum(sum(row) for row in xs))
        window_attention.append(layer_window)
        if li == tsp_layer:
            total = _oracle_budget(T, tsp_rate, w)
            per_head = [oracle_head_saliency(layer_window[h], kernel) for h in range(H)]
            sal = [sum(col) / H for col in zip(*per_head)]
            keep = sorted(oracle_topk(sal, total - w, w))
            xs = [xs[i] for i in keep]
            positions = [positions[i] for i in keep]

    final = xs[-1]
    logits = _vecmat(_rmsnorm(final, _mat(weights.final_norm)), _mat(weights.lm_head))
    return OracleOutputs(logits, checksums, list(final), window_attention)


def assert_logits_close(engine, oracle, tol: float = 1e-4) -> None:
    """Raise AssertionError naming the worst element when |engine - oracle| exceeds tol."""
    a = np.asarray(engine, dtype=np.float64)
    b = np.asarray(oracle, dtype=np.float64)
    if a.shape != b.shape:
        raise AssertionError(f"shape mismatch: engine {a.shape} vs oracle {b.shape}")
    diff = np.abs(a - b)
    worst = int(np.argmax(diff))
    if diff[worst] > tol:
        raise AssertionError(f"max abs diff {diff[worst]:.3e} at index {worst} "
                             f"(engine {a[worst]!r}, oracle {b[worst]!r}) exceeds {tol:g}")


def oracle_topk(scores, budget: int, window: int) -> set[int]:
    """Sort every non-window position by (score desc, index asc), take `budget`, add the window."""
    scores = [float(s) for s in scores]
    n = len(scores)
    w = max(0, min(window, n))
    window_set = set(range(n - w, n))
    ranked = sorted((i for i in range(n) if i not in window_set), key=lambda i: (-scores[i], i))
    return set(ranked[:max(budget, 0)]) | window_set


def oracle_head_saliency(window_rows, kernel: int) -> list[float]:
    """Column sums of the window rows, then max over the in-range neighbourhood."""
    n = len(window_rows[0])
    col = [sum(row[i] for row in window_rows) for i in range(n)]
    r = kernel // 2
    return [max(col[max(0, i - r):min(n, i + r + 1)]) for i in range(n)]


def random_prompt(seed: int, length: int, vocab_size: int) -> list[int]:
    return np.random.default_rng(seed).integers(0, vocab_size, size=length).tolist()


def random_attention(seed: int, heads: int, context: int, window_size: int = 8,
                     temperature: float = 1.0) -> AttentionScores:
    """Causal softmax rows for the last min(window_size, context) queries."""
    rng = np.random.default_rng(seed)
    w = min(window_size, context)
    logits = rng.standard_normal((heads, w, context)) * temperature
    for j in range(w):
        q = context - w + j
        logits[:, j, q + 1:] = -np.inf
    logits -= logits.max(axis=-1, keepdims=True)
    e = np.exp(logits)
    return AttentionScores((e / e.sum(axis=-1, keepdims=True)).astype(np.float32), window_size, context)


def random_scores(seed: int, n: int, ties: bool = False) -> np.ndarray:
    rng = np.random.default_rng(seed)
    if ties:
        return rng.integers(0, 5, size=n).astype(np.float32)
    return rng.random(n).astype(np.float32)
