import numpy as np
import pytest

from fastkv import full_prefill, init_model, tiny_config
from fastkv.saliency import select_top
from fastkv.testkit import (assert_logits_close, oracle_forward, oracle_topk, random_attention,
                            random_prompt, random_scores)


def test_oracle_single_token_agrees(tiny):
    _, logits = full_prefill(tiny, [17])
    assert_logits_close(logits, oracle_forward(tiny, [17]).logits, tol=1e-5)


def test_oracle_guard():
    big = init_model(tiny_config(9), seed=0)
    with pytest.raises(ValueError, match="guard"):
        oracle_forward(big, [1, 2])
    with pytest.raises(ValueError, match="guard"):
        oracle_forward(init_model(tiny_config(2), 0), [1] * 513)


def test_mismatch_reports_location():
    with pytest.raises(AssertionError, match="at index 2"):
        assert_logits_close([0.0, 0.0, 1.0], [0.0, 0.0, 0.0], tol=1e-4)
    with pytest.raises(AssertionError, match="shape"):
        assert_logits_close([0.0], [0.0, 1.0])


def test_oracle_topk_examples():
    assert oracle_topk([0.1, 0.9, 0.9, 0.2], 1, 1) == {1, 3}
    assert oracle_topk([5, 4, 3, 2], 0, 2) == {2, 3}
    assert oracle_topk([5, 4, 3, 2], 4, 2) == {0, 1, 2, 3}


def test_generators_are_seeded():
    assert random_prompt(3, 10, 50) == random_prompt(3, 10, 50)
    a = random_attention(1, 2, 12)
    np.testing.assert_allclose(a.scores.sum(-1), 1.0, atol=1e-6)
    assert np.all(a.scores[:, 0, -7:] == 0)
    assert random_scores(0, 10, ties=True).tolist() == random_scores(0, 10, ties=True).tolist()
    s = random_scores(2, 30)
    assert set(select_top(s, 5, 3).selected_indices.tolist()) == oracle_topk(s, 5, 3)
