import numpy as np
import pytest

from fastkv import PolicyConfig, fastkv_prefill, full_prefill, hidden_compress, run_policy
from fastkv.prefill import POLICY_KINDS, parse_policy_config, streaming_positions
from fastkv.testkit import oracle_topk, random_prompt
from test_kv_cache import make_layer_output

# one head; window queries at positions 8 and 9
ROW8 = [0.1, 0.0, 0.3, 0.05, 0.0, 0.2, 0.05, 0.1, 0.2, 0.0]
ROW9 = [0.1, 0.1, 0.1, 0.05, 0.0, 0.2, 0.05, 0.1, 0.1, 0.2]


def test_policy_defaults_mirror_setup():
    p = PolicyConfig()
    assert (p.window_size, p.pooling_kernel, p.tsp_rate) == (8, 7, 0.2)


@pytest.mark.parametrize("bad", [dict(tsp_rate=0), dict(tsp_rate=1.2), dict(kv_retention_rate=0),
                                 dict(pooling_kernel=4), dict(policy_kind="h2o"), dict(tsp_layer=4)])
def test_policy_validation(bad):
    with pytest.raises(ValueError):
        PolicyConfig(**{"tsp_layer": 1, **bad}).validate(num_layers=4)


def test_parse_policy_config():
    text = """
    # reference-default setup
    tsp_layer = 2
    tsp_rate = 0.25   ; inline comment
    kv_retention_rate = 0.1
    policy_kind = fastkv
    """
    p = parse_policy_config(text)
    assert p == PolicyConfig(tsp_layer=2, tsp_rate=0.25, kv_retention_rate=0.1)
    with pytest.raises(ValueError, match="unknown policy key"):
        parse_policy_config("tsp_layers = 2")


def test_hidden_compress_hand_built():
    out = make_layer_output([[ROW8, ROW9]], kv_heads=1)
    hidden, idx, pos = hidden_compress(out, 0.5, kernel=1, window_size=2)
    # sums .2 .1 .4 .1 0 .4 .1 .2 | .3 .2 -> top 3 non-window: 2, 5, then 0 beats 7 on index
    assert idx.tolist() == [0, 2, 5, 8, 9]
    sums = np.array(ROW8) + np.array(ROW9)
    assert set(idx.tolist()) == oracle_topk(sums, 3, 2)
    np.testing.assert_array_equal(hidden, out.hidden_states[idx])
    np.testing.assert_array_equal(pos, idx)


def test_hidden_compress_full_rate_identity():
    out = make_layer_output([[ROW8, ROW9]], kv_heads=1)
    hidden, idx, _ = hidden_compress(out, 1.0, 7, 2)
    assert hidden is out.hidden_states
    assert idx.tolist() == list(range(10))


def test_hidden_compress_equal_saliency_prefix():
    flat = np.full((1, 2, 10), 0.1, np.float32)
    out = make_layer_output(flat, kv_heads=1)
    _, idx, _ = hidden_compress(out, 0.5, 7, 2)
    assert idx.tolist() == [0, 1, 2, 8, 9]


def test_lossless_bit_exact(tiny):
    p = random_prompt(0, 77, 256)
    _, ref = full_prefill(tiny, p)
    rep = fastkv_prefill(tiny, p, PolicyConfig(tsp_layer=1, tsp_rate=1.0, kv_retention_rate=1.0))
    assert rep.final_logits.tobytes() == ref.tobytes()


def test_last_layer_tsp(tiny):
    p = random_prompt(1, 90, 256)
    _, ref = full_prefill(tiny, p)
    rep = fastkv_prefill(tiny, p, PolicyConfig(tsp_layer=3, tsp_rate=0.1, kv_retention_rate=0.2))
    np.testing.assert_allclose(rep.final_logits, ref, atol=1e-5)


def test_two_stage_context_lengths(tiny):
    p = random_prompt(2, 64, 256)
    rep = fastkv_prefill(tiny, p, PolicyConfig(tsp_layer=2, tsp_rate=0.25, kv_retention_rate=0.5))
    # round(64 * .25) = 16 >= window 8, so the window merges into the 16
    assert rep.per_layer_context_len == [64, 64, 64, 16]
    assert len(rep.propagated_positions) == 16
    assert set(range(56, 64)) <= set(rep.propagated_positions.tolist())
    # retention: round(64 * .5) = 32 on full-context layers, round(16 * .5) = 8 after TSP
    assert [lc.num_retained for lc in rep.kv_cache.layers] == [32, 32, 32, 8]
    assert set(rep.kv_cache.layers[3].positions[0].tolist()) <= set(rep.propagated_positions.tolist())
    assert rep.next_position == 64


def test_fastkv_rejects_other_kind(tiny):
    with pytest.raises(ValueError):
        fastkv_prefill(tiny, [1, 2, 3], PolicyConfig(tsp_layer=1, policy_kind="full"))


@pytest.mark.parametrize("kind", POLICY_KINDS)
def test_every_policy_keeps_last_token_and_is_monotone(tiny, kind):
    p = random_prompt(3, 120, 256)
    rep = run_policy(tiny, p, PolicyConfig(tsp_layer=1, tsp_rate=0.3, kv_retention_rate=0.2, policy_kind=kind))
    assert 119 in rep.propagated_positions
    assert all(a >= b for a, b in zip(rep.per_layer_context_len, rep.per_layer_context_len[1:]))
    assert np.all(np.isfinite(rep.final_logits))


def test_snapkv_full_retention_equals_full(tiny):
    p = random_prompt(4, 50, 256)
    _, ref = full_prefill(tiny, p)
    rep = run_policy(tiny, p, PolicyConfig(tsp_layer=1, kv_retention_rate=1.0, policy_kind="snapkv"))
    assert rep.final_logits.tobytes() == ref.tobytes()
    assert rep.flop_account.prefill_compute_rate == 1.0


def test_streaming_saturation_equals_full(tiny):
    p = random_prompt(5, 40, 256)
    full = run_policy(tiny, p, PolicyConfig(tsp_layer=1, policy_kind="full"))
    st = run_policy(tiny, p, PolicyConfig(tsp_layer=1, kv_retention_rate=1.0, policy_kind="streamingllm"))
    assert st.final_logits.tobytes() == full.final_logits.tobytes()
    for a, b in zip(st.kv_cache.layers, full.kv_cache.layers):
        np.testing.assert_array_equal(a.keys, b.keys)


def test_streaming_positions():
    assert streaming_positions(100, 0.1, 8).tolist() == [0, 1, 2, 3, 94, 95, 96, 97, 98, 99]
    assert streaming_positions(10, 1.0, 8).tolist() == list(range(10))


def test_gemfilter_restart_lengths(tiny):
    p = random_prompt(6, 100, 256)
    rep = run_policy(tiny, p, PolicyConfig(tsp_layer=1, tsp_rate=0.1, kv_retention_rate=0.1,
                                           policy_kind="gemfilter"))
    assert rep.per_layer_context_len == [10] * 4
    assert [lc.num_retained for lc in rep.kv_cache.layers] == [10] * 4
    assert rep.kv_cache.layers[0].positions[0].tolist() == list(range(10))
    assert rep.next_position == 10
    assert rep.prepass_layers == 2
    short = run_policy(tiny, p[:50], PolicyConfig(tsp_layer=1, tsp_rate=0.1, policy_kind="gemfilter"))
    assert short.per_layer_context_len == [8] * 4  # round(5) clamped up to the window


def test_gemfilter_restart_is_prefill_of_selected_tokens(tiny):
    p = np.array(random_prompt(7, 60, 256))
    rep = run_policy(tiny, p, PolicyConfig(tsp_layer=2, tsp_rate=0.3, policy_kind="gemfilter"))
    _, ref = full_prefill(tiny, p[rep.propagated_positions])
    assert rep.final_logits.tobytes() == ref.tobytes()


def test_gemfilter_full_rate_equals_full(tiny):
    p = random_prompt(8, 30, 256)
    _, ref = full_prefill(tiny, p)
    rep = run_policy(tiny, p, PolicyConfig(tsp_layer=1, tsp_rate=1.0, policy_kind="gemfilter"))
    assert rep.final_logits.tobytes() == ref.tobytes()


def test_unknown_policy(tiny):
    with pytest.raises(ValueError, match="unknown policy"):
        run_policy(tiny, [1, 2], PolicyConfig(tsp_layer=1, policy_kind="pyramidinfer"))
