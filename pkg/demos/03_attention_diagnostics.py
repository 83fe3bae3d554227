"""
Attention diagnostics
=====================

Critical-token overlap between layers, top-K attention recall, and the
FastKV vs. filter-and-restart logits sweep. Writes CSVs next to this script.

On a randomly initialised model the per-layer rankings are close to
independent, so the overlap curves sit near chance; a trained checkpoint
loaded with `load_weights` is where the depth trend shows up.
"""

from pathlib import Path

from fastkv import init_model, tiny_config
from fastkv.analysis import (critical_token_overlap, mean_overlap_by_distance, overlap_csv, recall_csv,
                             sweep_csv, topk_attention_recall, tsp_layer_sweep)
from fastkv.testkit import random_prompt

out_dir = Path(__file__).with_name("output")
out_dir.mkdir(exist_ok=True)

weights = init_model(tiny_config(8), seed=0)
prompt = random_prompt(seed=9, length=1024, vocab_size=256)

curves = critical_token_overlap(weights, prompt, top_k=64, max_distance=7)
print("mean overlap by layer distance:", {d: round(v, 3) for d, v in mean_overlap_by_distance(curves).items()})
(out_dir / "overlap.csv").write_text(overlap_csv(curves))

# %%
recall = topk_attention_recall(weights, prompt, [8, 64, 256, 1024])
for c in recall:
    print(f"layer {c.layer}: " + "  ".join(f"K={k}: {r:.2f}" for k, r in zip(c.k_values, c.recall)))
(out_dir / "recall.csv").write_text(recall_csv(recall))

# %%
prompts = [random_prompt(seed=100 + i, length=256, vocab_size=256) for i in range(8)]
sweep = tsp_layer_sweep(weights, prompts, range(8), tsp_rate=0.2)
for layer, f, g in zip(sweep.layers, sweep.fastkv_distance, sweep.gemfilter_distance):
    print(f"select at layer {layer}: fastkv {f:.4f}   filter-and-restart {g:.4f}")
(out_dir / "sweep.csv").write_text(sweep_csv(sweep))
