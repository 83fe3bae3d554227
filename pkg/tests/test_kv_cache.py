import json

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from fastkv import PolicyConfig, run_policy
from fastkv.kv_cache import KVCache, cache_memory_bytes, decode_step, greedy_decode, kv_compress
from fastkv.model import AttentionScores, LayerOutput, full_prefill, tiny_config
from fastkv.saliency import all_group_saliency
from fastkv.testkit import oracle_topk, random_attention, random_prompt

TWO_GROUPS = tiny_config(2, num_heads=2, num_kv_heads=2, head_dim=8, hidden_dim=16)

# window queries at positions 6 and 7 over 8 keys, one head per kv group
G0 = [[0.3, 0.05, 0.15, 0.0, 0.2, 0.0, 0.3, 0.0],
      [0.2, 0.05, 0.15, 0.05, 0.2, 0.02, 0.13, 0.2]]   # sums .5 .1 .3 .05 .4 .02 | .43 .2
G1 = [[0.0, 0.15, 0.15, 0.25, 0.0, 0.1, 0.35, 0.0],
      [0.05, 0.15, 0.15, 0.25, 0.0, 0.1, 0.1, 0.2]]    # sums .05 .3 .3 .5 0 .2 | .45 .2


def make_layer_output(scores, kv_heads, head_dim=8, seed=0, positions=None):
    scores = np.asarray(scores, np.float32)
    n = scores.shape[-1]
    rng = np.random.default_rng(seed)
    keys = rng.standard_normal((kv_heads, n, head_dim)).astype(np.float32)
    values = rng.standard_normal((kv_heads, n, head_dim)).astype(np.float32)
    hidden = rng.standard_normal((n, kv_heads * head_dim)).astype(np.float32)
    pos = np.arange(n) if positions is None else np.asarray(positions)
    return LayerOutput(hidden, AttentionScores(scores, scores.shape[1], n), keys, values, pos)


def test_hand_built_compression():
    out = make_layer_output([G0, G1], 2)
    lc = kv_compress(out, 0.5, kernel=1, window_size=2, config=TWO_GROUPS)
    assert lc.positions.tolist() == [[0, 4, 6, 7], [1, 3, 6, 7]]
    sal = all_group_saliency(out.attention_scores, 1, TWO_GROUPS)
    for g in range(2):
        assert set(lc.positions[g].tolist()) == oracle_topk(sal[g], 2, 2)
        np.testing.assert_array_equal(lc.keys[g], out.keys[g, lc.positions[g]])
        np.testing.assert_array_equal(lc.values[g], out.values[g, lc.positions[g]])


def test_full_retention_is_identity():
    out = make_layer_output([G0, G1], 2)
    lc = kv_compress(out, 1.0, 7, 2, TWO_GROUPS)
    assert lc.keys.tobytes() == out.keys.tobytes()
    assert lc.values.tobytes() == out.values.tobytes()
    assert lc.positions.tolist() == [list(range(8))] * 2


def test_tiny_rate_clamps_to_window():
    out = make_layer_output([G0, G1], 2)
    lc = kv_compress(out, 0.01, 7, 2, TWO_GROUPS)
    assert lc.positions.tolist() == [[6, 7], [6, 7]]


@pytest.mark.parametrize("rate", [0.0, -0.5, 1.5])
def test_bad_rate(rate):
    with pytest.raises(ValueError):
        kv_compress(make_layer_output([G0, G1], 2), rate, 7, 2, TWO_GROUPS)


def test_positions_map_through_position_ids():
    out = make_layer_output([G0, G1], 2, positions=[0, 3, 9, 10, 20, 21, 30, 31])
    lc = kv_compress(out, 0.5, 1, 2, TWO_GROUPS)
    assert lc.positions.tolist() == [[0, 20, 30, 31], [3, 10, 30, 31]]


def test_group_permutation_equivariance():
    out = make_layer_output([G0, G1], 2)
    swapped = LayerOutput(out.hidden_states, AttentionScores(out.attention_scores.scores[::-1].copy(), 2, 8),
                          out.keys[::-1].copy(), out.values[::-1].copy(), out.position_ids)
    a = kv_compress(out, 0.5, 3, 2, TWO_GROUPS)
    b = kv_compress(swapped, 0.5, 3, 2, TWO_GROUPS)
    np.testing.assert_array_equal(a.positions[::-1], b.positions)
    np.testing.assert_array_equal(a.keys[::-1], b.keys)


@settings(max_examples=60, deadline=None)
@given(seed=st.integers(0, 10_000), n=st.integers(1, 200), window=st.integers(1, 16),
       r1=st.floats(0.01, 1.0), r2=st.floats(0.01, 1.0))
def test_window_kept_and_monotone(seed, n, window, r1, r2):
    cfg = tiny_config(2)
    a = random_attention(seed, 4, n, window)
    out = make_layer_output(a.scores, 2, seed=seed)
    lo, hi = sorted((r1, r2))
    small = kv_compress(out, lo, 7, window, cfg)
    big = kv_compress(out, hi, 7, window, cfg)
    win = set(range(max(0, n - window), n))
    for g in range(2):
        assert win <= set(small.positions[g].tolist())
        assert set(small.positions[g].tolist()) <= set(big.positions[g].tolist())


def test_memory_bytes_closed_form(tiny):
    assert cache_memory_bytes(KVCache()) == 0
    rep = run_policy(tiny, random_prompt(0, 16, 256), PolicyConfig(tsp_layer=1, policy_kind="full"))
    assert cache_memory_bytes(rep.kv_cache, 2) == 2 * 4 * 2 * 16 * 8 * 2
    assert cache_memory_bytes(rep.kv_cache, 4) == 2 * 4 * 2 * 16 * 8 * 4


def test_memory_ratio_tenth(tiny):
    p = random_prompt(1, 100, 256)
    full = run_policy(tiny, p, PolicyConfig(tsp_layer=1, kv_retention_rate=1.0, policy_kind="snapkv"))
    tenth = run_policy(tiny, p, PolicyConfig(tsp_layer=1, kv_retention_rate=0.1, policy_kind="snapkv"))
    ratio = cache_memory_bytes(tenth.kv_cache) / cache_memory_bytes(full.kv_cache)
    # round(100 * 0.1) = 10 tokens per group per layer, which already covers the 8-token window
    assert ratio == pytest.approx(0.1, abs=1e-12)


def test_decode_appends_one_position_per_step(tiny):
    p = random_prompt(2, 30, 256)
    rep = run_policy(tiny, p, PolicyConfig(tsp_layer=1, tsp_rate=0.5, kv_retention_rate=0.3))
    before = [lc.num_retained for lc in rep.kv_cache.layers]
    _, cache = decode_step(tiny, rep.kv_cache, 5, rep.next_position)
    _, cache = decode_step(tiny, cache, 6, rep.next_position + 1)
    assert [lc.num_retained for lc in cache.layers] == [b + 2 for b in before]
    for lc in cache.layers:
        assert lc.positions[:, -2:].tolist() == [[30, 31]] * 2


def test_decode_rejects_stale_position(tiny):
    rep = run_policy(tiny, random_prompt(2, 20, 256), PolicyConfig(tsp_layer=1, policy_kind="full"))
    with pytest.raises(ValueError, match="exceed"):
        decode_step(tiny, rep.kv_cache, 1, 19)


def test_decode_rejects_mismatched_cache(tiny, tiny8):
    rep = run_policy(tiny, random_prompt(2, 20, 256), PolicyConfig(tsp_layer=1, policy_kind="full"))
    with pytest.raises(ValueError, match="layers"):
        decode_step(tiny8, rep.kv_cache, 1, 20)


def test_lossless_decode_matches_incremental_full(tiny):
    p = random_prompt(4, 40, 256)
    fast = run_policy(tiny, p, PolicyConfig(tsp_layer=1, tsp_rate=1.0, kv_retention_rate=1.0))
    full = run_policy(tiny, p, PolicyConfig(tsp_layer=1, policy_kind="full"))
    a, _ = decode_step(tiny, fast.kv_cache, 9, 40)
    b, _ = decode_step(tiny, full.kv_cache, 9, 40)
    np.testing.assert_allclose(a, b, atol=1e-5)


def test_greedy_matches_recompute(tiny):
    p = random_prompt(5, 33, 256)
    rep = run_policy(tiny, p, PolicyConfig(tsp_layer=2, tsp_rate=1.0, kv_retention_rate=1.0))
    tokens, logits = greedy_decode(tiny, rep.kv_cache, rep.final_logits, rep.next_position, 4)
    seq = list(p)
    for tok, lg in zip(tokens, logits):
        seq.append(tok)
        _, ref = full_prefill(tiny, seq)
        np.testing.assert_allclose(lg, ref, atol=1e-4)


def test_cache_dump(tmp_path, tiny):
    rep = run_policy(tiny, random_prompt(6, 50, 256), PolicyConfig(tsp_layer=1, kv_retention_rate=0.3))
    rep.kv_cache.dump(tmp_path / "cache.json")
    doc = json.loads((tmp_path / "cache.json").read_text())
    assert doc["positions"]["0"]["1"] == rep.kv_cache.layers[0].positions[1].tolist()
    blob = np.frombuffer((tmp_path / "cache.bin").read_bytes(), dtype="<f4")
    assert blob.size * 2 == cache_memory_bytes(rep.kv_cache, 2)
    lc = rep.kv_cache.layers[0]
    np.testing.assert_array_equal(blob[:lc.keys.size].reshape(lc.keys.shape), lc.keys)
