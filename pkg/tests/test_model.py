import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from latforge import autodiff as ad
from latforge.attack import PerturbationSet
from latforge.model import (ModelConfig, TokenSequence, collate, forward, greedy_decode, hook_sites_for,
                            init_params, residual_stream, sequence_log_prob)
from latforge.objectives import benign_sft_loss

import oracle
from conftest import TINY, forced_params, uniform_params


def _batch(ids, prompt_len):
    return collate([TokenSequence(tuple(r), prompt_len) for r in ids])


def test_forward_matches_reference_float64(tiny_params):
    ids = np.random.default_rng(0).integers(0, 16, size=(3, 7))
    batch = _batch(ids, 4)
    p64 = {k: v.astype(np.float64) for k, v in tiny_params.items()}
    got = forward(TINY, p64, batch).data
    np.testing.assert_allclose(got, oracle.forward(TINY, p64, ids), rtol=1e-10, atol=1e-12)


def test_hand_sized_model_matches_reference():
    cfg = ModelConfig(n_layers=1, d_model=4, n_heads=2, vocab_size=5, max_context=4)
    params = {k: v.astype(np.float64) for k, v in init_params(cfg, seed=11).items()}
    ids = np.array([[1, 4, 2]])
    np.testing.assert_allclose(forward(cfg, params, _batch(ids, 2)).data, oracle.forward(cfg, params, ids),
                               rtol=1e-10, atol=1e-12)


def test_perturbed_forward_matches_reference():
    cfg = ModelConfig(n_layers=2, d_model=8, n_heads=2, vocab_size=16, max_context=16)
    params = {k: v.astype(np.float64) for k, v in init_params(cfg, seed=5).items()}
    rng = np.random.default_rng(1)
    ids = rng.integers(0, 16, size=(2, 6))
    batch = _batch(ids, 3)
    mask = batch.prompt_mask()
    deltas = {0: rng.normal(size=(2, 6, 8)), 1: rng.normal(size=(2, 6, 8))}
    got = forward(cfg, params, batch, PerturbationSet(deltas, mask)).data
    np.testing.assert_allclose(got, oracle.forward(cfg, params, ids, deltas, mask), rtol=1e-10, atol=1e-12)


def test_zero_perturbation_is_bitwise_identity(tiny_params):
    batch = _batch(np.random.default_rng(2).integers(0, 16, size=(2, 6)), 3)
    plain = forward(TINY, tiny_params, batch).data
    zero = forward(TINY, tiny_params, batch, PerturbationSet.zeros([0], batch.prompt_mask(), 8)).data
    assert plain.tobytes() == zero.tobytes()


@settings(max_examples=20, deadline=None)
@given(seed=st.integers(0, 10_000), pos=st.integers(0, 5))
def test_perturbation_only_affects_later_positions(seed, pos):
    cfg = ModelConfig(n_layers=2, d_model=8, n_heads=2, vocab_size=16, max_context=16)
    params = init_params(cfg, seed=0)
    rng = np.random.default_rng(seed)
    batch = _batch(rng.integers(0, 16, size=(1, 8)), 6)
    delta = np.zeros((1, 8, 8), np.float32)
    delta[0, pos] = rng.normal(size=8)
    base = forward(cfg, params, batch).data
    pert = forward(cfg, params, batch, PerturbationSet({1: delta}, batch.prompt_mask())).data
    np.testing.assert_array_equal(base[0, :pos], pert[0, :pos])


@settings(max_examples=20, deadline=None)
@given(seed=st.integers(0, 10_000))
def test_next_token_distribution_normalised(seed):
    params = init_params(TINY, seed=seed)
    batch = _batch(np.random.default_rng(seed).integers(0, 16, size=(2, 5)), 2)
    probs = ad.softmax(forward(TINY, params, batch)).data.astype(np.float64)
    np.testing.assert_allclose(probs.sum(-1), 1.0, atol=1e-5)


def test_uniform_model_sequence_log_prob():
    cfg = ModelConfig(n_layers=1, d_model=8, n_heads=2, vocab_size=4, max_context=8)
    params = uniform_params(cfg)
    batch = _batch([[1, 2, 3]], 2)
    assert sequence_log_prob(cfg, params, batch).item() == pytest.approx(np.log(0.25), abs=1e-6)
    cfg2 = ModelConfig(n_layers=1, d_model=8, n_heads=2, vocab_size=2, max_context=8)
    batch2 = _batch([[0, 1, 1, 0]], 1)
    assert sequence_log_prob(cfg2, uniform_params(cfg2), batch2).item() == pytest.approx(3 * np.log(0.5), abs=1e-6)


def test_forced_model_decodes_constant_token():
    assert greedy_decode(TINY, forced_params(TINY, 7), [[1, 2], [3, 4, 5]], 4) == [(7,) * 4, (7,) * 4]


def test_decode_tie_breaks_to_lowest_id():
    p = forced_params(TINY, 9)
    p["unembed"][:, 3] = 1.0
    assert greedy_decode(TINY, p, [[1]], 3) == [(3, 3, 3)]


def test_decode_stops_at_stop_token():
    assert greedy_decode(TINY, forced_params(TINY, 7), [[1]], 5, stop_token=7) == [(7,)]


def test_memorised_sequence_is_reproduced():
    cfg = ModelConfig(n_layers=1, d_model=16, n_heads=2, vocab_size=16, max_context=16)
    params = init_params(cfg, seed=0)
    seq = TokenSequence((1, 2, 9, 4, 13, 6, 11), 2)
    batch = collate([seq])
    for _ in range(300):
        _, g = ad.value_and_grad(lambda **p: benign_sft_loss(cfg, p, batch), params)
        params = {k: v - 0.1 * g[k] for k, v in params.items()}
    assert greedy_decode(cfg, params, [seq.prompt], len(seq.completion)) == [seq.completion]


def test_named_hook_profiles():
    assert hook_sites_for("jailbreak32", 32) == [8, 16, 24, 30]
    assert hook_sites_for("backdoor32", 32) == [4, 12, 20, 28]


def test_even_hook_profile():
    assert hook_sites_for("even", 8, 4) == [1, 3, 5, 7]
    assert hook_sites_for("even", 4, 4) == [0, 1, 2, 3]


def test_profile_needing_more_layers_rejected():
    with pytest.raises(ValueError):
        hook_sites_for("jailbreak32", 4)


def test_site_past_last_layer_rejected(tiny_params):
    batch = _batch([[1, 2, 3]], 2)
    with pytest.raises(ValueError, match="hook site"):
        forward(TINY, tiny_params, batch, PerturbationSet.zeros([1], batch.prompt_mask(), 8))


def test_perturbing_completion_positions_rejected(tiny_params):
    batch = _batch([[1, 2, 3]], 2)
    with pytest.raises(ValueError, match="completion"):
        forward(TINY, tiny_params, batch, PerturbationSet.zeros([0], np.ones((1, 3)), 8))


def test_context_overflow_rejected(tiny_params):
    batch = _batch([list(range(16)) + [0]], 2)
    with pytest.raises(ValueError, match="max_context"):
        residual_stream(TINY, tiny_params, batch)
