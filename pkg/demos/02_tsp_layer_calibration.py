"""
Choosing the TSP layer
======================

Score each candidate layer by how far the final hidden state moves when
propagation is cut there, then take the earliest layer that is close enough
to the best one.
"""

from fastkv import init_model, tiny_config
from fastkv.calibration import select_tsp_layer, synthetic_calibration_set

weights = init_model(tiny_config(8), seed=0)
calib = synthetic_calibration_set(seed=3, num_prompts=4, length=256, vocab_size=256)

result = select_tsp_layer(weights, calib, l_max=6, tsp_rate=0.2, tolerance=0.05)
for layer, (norm, raw) in enumerate(zip(result.distances, result.raw_distances)):
    mark = " <- chosen" if layer == result.chosen_layer else ""
    print(f"layer {layer}: normalized {norm:.4f}  raw {raw:.3f}{mark}")
print("plain argmin:", result.argmin_layer)
print("rule:", result.threshold_rule["rule"])

# %%
# A looser tolerance trades accuracy for an earlier (cheaper) cut.
for tol in (0.0, 3.0, 5.0):
    r = select_tsp_layer(weights, calib, l_max=6, tsp_rate=0.2, tolerance=tol)
    print(f"tolerance {tol}: layer {r.chosen_layer}")
