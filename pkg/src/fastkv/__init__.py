"""FastKV: token-selective propagation and decoupled KV retention on a desk-scale GQA transformer."""

from .model import (AttentionScores, LayerOutput, ModelConfig, ModelWeights, full_prefill, init_model,
                    layer_forward, load_weights, read_config, save_weights, tiny_config)
from .saliency import SaliencyVector, SelectionResult, group_saliency, head_saliency, layer_saliency, select_top
from .kv_cache import KVCache, LayerCache, cache_memory_bytes, decode_step, greedy_decode, kv_compress
from .prefill import PolicyConfig, PrefillReport, fastkv_prefill, hidden_compress, run_policy
from .calibration import CalibrationResult, CalibrationSet, final_hidden_distance, select_tsp_layer
from .analysis import critical_token_overlap, topk_attention_recall, tsp_layer_sweep
from .accounting import ComputeAccount, flop_account, gemfilter_compute_rate, prefill_compute_rate

__version__ = "0.1.0"
