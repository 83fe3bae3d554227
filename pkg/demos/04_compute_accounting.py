"""
Prefill compute and KV memory arithmetic
========================================

The token-linear compute rate used to compare policies, next to the FLOP
ratio the engine actually incurs (attention is quadratic in context).
"""

from fastkv import PolicyConfig, init_model, run_policy, tiny_config
from fastkv.accounting import gemfilter_compute_rate, prefill_compute_rate
from fastkv.testkit import random_prompt

print("32 layers, TSP at 15, rate 0.2:", prefill_compute_rate(32, 15, 0.2))
print("36 layers, TSP at 17, rate 0.2:", prefill_compute_rate(36, 17, 0.2))

# Filter-and-restart: the published 32-layer figures count `filter_layer`
# layers before the restart, the 36-layer ones count `filter_layer + 1`.
for L, F in [(32, 13), (36, 17)]:
    for sel in (0.1, 0.2):
        print(f"L={L} filter={F} select={sel}: index {gemfilter_compute_rate(L, F, sel, 'index'):.3f}  "
              f"inclusive {gemfilter_compute_rate(L, F, sel, 'inclusive'):.3f}")

# %%
weights = init_model(tiny_config(8), seed=0)
prompt = random_prompt(seed=0, length=2048, vocab_size=256)
for layer in (1, 3, 5, 7):
    acc = run_policy(weights, prompt, PolicyConfig(tsp_layer=layer, tsp_rate=0.2)).flop_account
    print(f"tsp layer {layer}: linear {acc.linear_compute_rate:.3f}  flops {acc.prefill_compute_rate:.3f}  "
          f"KV {acc.kv_bytes / 1024:.0f} KiB of {acc.full_kv_bytes / 1024:.0f} KiB")
