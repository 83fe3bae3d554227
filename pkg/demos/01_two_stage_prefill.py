"""
Two-stage prefill versus the baselines
======================================

Run every policy on the same prompt and compare how much context each layer
processed, how much KV survives for decoding, and how far the final logits
drift from a full-context pass.
"""

import numpy as np

from fastkv import PolicyConfig, full_prefill, init_model, run_policy, tiny_config
from fastkv.calibration import squared_distance
from fastkv.testkit import random_prompt

weights = init_model(tiny_config(8), seed=0)
prompt = random_prompt(seed=1, length=512, vocab_size=256)
_, reference = full_prefill(weights, prompt)

# Selection happens at layer 3 (of 8); 20% of tokens propagate, 10% of KV is kept.
base = dict(tsp_layer=3, tsp_rate=0.2, kv_retention_rate=0.1)

print(f"{'policy':13s} {'ctx first/last':>15s} {'KV kept':>8s} {'linear rate':>12s} {'FLOP rate':>10s} {'logit dist':>11s}")
for kind in ("full", "snapkv", "streamingllm", "gemfilter", "fastkv"):
    rep = run_policy(weights, prompt, PolicyConfig(**base, policy_kind=kind))
    acc = rep.flop_account
    dist = squared_distance(reference, rep.final_logits)[1]
    ctx = f"{rep.per_layer_context_len[0]}/{rep.per_layer_context_len[-1]}"
    print(f"{kind:13s} {ctx:>15s} {acc.kv_retention_fraction:8.1%} {acc.linear_compute_rate:12.1%} "
          f"{acc.prefill_compute_rate:10.1%} {dist:11.4f}")

# SnapKV and StreamingLLM only trim the cache, so their logits match full
# context. GemFilter re-prefills the selected fragment, which moves the logits
# a lot. FastKV pays only for layers 4..7 seeing the reduced context.

# %%
# Decoupling: the TSP rate and the KV retention rate move independently.
for tsp_rate, kv_rate in [(0.2, 0.1), (0.2, 0.5), (0.5, 0.1)]:
    rep = run_policy(weights, prompt, PolicyConfig(tsp_layer=3, tsp_rate=tsp_rate, kv_retention_rate=kv_rate))
    print(f"tsp {tsp_rate:.1f} kv {kv_rate:.1f} -> context {rep.per_layer_context_len}, "
          f"retained {[lc.num_retained for lc in rep.kv_cache.layers]}")

# %%
# The compressed cache is used as-is for decoding; new tokens are appended.
from fastkv.kv_cache import greedy_decode

rep = run_policy(weights, prompt, PolicyConfig(**base))
tokens, _ = greedy_decode(weights, rep.kv_cache, rep.final_logits, rep.next_position, steps=6)
print("greedy continuation:", tokens)
print("cache sizes after decode:", [lc.num_retained for lc in rep.kv_cache.layers])
