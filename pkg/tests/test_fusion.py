import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from imsm import numerics as nx
from imsm.adapters import make_lora
from imsm.fusion import (FusionMode, GateParams, QueryMemory, batch_query_means, fuse, fused_logits, gate,
                         interweave, make_gate, next_token_probs, query_means)
from imsm.model import ModelConfig, forward_hidden, forward_tokens, init_weights, lm_head
from imsm.numerics import DimensionError, Tensor, UsageError
from imsm.tokendata import collate, make_example
from imsm.trainer import loss_batch


def T(x):
    return Tensor(np.asarray(x, dtype=float))


def random_gate(rng, d, r, with_query=True):
    width = 4 * d if with_query else 2 * d
    return GateParams(T(rng.normal(size=(width, r))), T(rng.normal(size=(r, d))), r)


def test_query_means():
    qm = query_means(T([[1, 3], [3, 5]]), T([[0, 0], [2, 2]]))
    assert qm.hbar_M.data.tolist() == [[2, 4]] and qm.hbar_Mp.data.tolist() == [[1, 1]] and qm.t_in == 2
    one = query_means(T([[4, 5]]), T([[6, 7]]))
    assert one.hbar_M.data.tolist() == [[4, 5]] and one.hbar_Mp.data.tolist() == [[6, 7]]
    with pytest.raises(UsageError):
        query_means(T(np.zeros((0, 2))), T(np.zeros((0, 2))))


def test_query_means_equal_under_zero_init_adapters(tiny_weights, tiny_config):
    toks = [1, 6, 7, 8, 9]
    ad = make_lora(tiny_config, rank=2, seed=5)
    with nx.no_grad():
        qm = query_means(forward_hidden(toks, tiny_weights), forward_hidden(toks, tiny_weights, ad))
    np.testing.assert_array_equal(qm.hbar_M.data, qm.hbar_Mp.data)


def test_gate_zero_wb_is_half(rng):
    d, r = 4, 2
    gp = GateParams(T(rng.normal(size=(4 * d, r))), T(np.zeros((r, d))), r)
    qm = QueryMemory(T(rng.normal(size=(1, d))), T(rng.normal(size=(1, d))), 3)
    g = gate(qm, T(rng.normal(size=(1, d))), T(rng.normal(size=(1, d))), gp)
    assert (g.data == 0.5).all()


def test_gate_hand_case_zero_projection():
    gp = GateParams(T(np.ones((8, 1)) / 8), T(np.zeros((1, 2))), 1)   # d=2, r=1
    ones = T([[1.0, 1.0]])
    g = gate(QueryMemory(ones, ones, 1), ones, ones, gp)
    assert g.data.tolist() == [[0.5, 0.5]]


def test_gate_matches_dense_product(rng):
    d, r = 4, 2
    gp = random_gate(rng, d, r)
    hbM, hM, hMp, hbMp = (rng.normal(size=(1, d)) for _ in range(4))
    g = gate(QueryMemory(T(hbM), T(hbMp), 2), T(hM), T(hMp), gp).data
    v = np.concatenate([hbM, hM, hMp, hbMp], axis=1)     # concatenation order is part of the contract
    dense = 1.0 / (1.0 + np.exp(-(v @ (gp.W_A.data @ gp.W_B.data))))
    assert np.max(np.abs(g - dense)) < 1e-12


def test_no_query_gate_ignores_means(rng):
    d, r = 4, 2
    gp = random_gate(rng, d, r, with_query=False)
    hM, hMp = T(rng.normal(size=(1, d))), T(rng.normal(size=(1, d)))
    a = gate(QueryMemory(T(rng.normal(size=(1, d))), T(rng.normal(size=(1, d))), 1), hM, hMp, gp, "noquery")
    b = gate(QueryMemory(T(rng.normal(size=(1, d))), T(rng.normal(size=(1, d))), 1), hM, hMp, gp, "noquery")
    np.testing.assert_array_equal(a.data, b.data)
    v = np.concatenate([hM.data, hMp.data], axis=1)
    np.testing.assert_allclose(a.data, 1 / (1 + np.exp(-(v @ gp.W_A.data @ gp.W_B.data))), atol=1e-12)


def test_gate_mode_and_shape_errors(rng):
    gp = random_gate(rng, 4, 2)
    qm = QueryMemory(T(np.zeros((1, 4))), T(np.zeros((1, 4))), 1)
    x = T(np.zeros((1, 4)))
    with pytest.raises(DimensionError):
        gate(qm, x, x, gp, "noquery")
    with pytest.raises(UsageError):
        gate(qm, x, x, gp, "half")
    with pytest.raises(DimensionError):
        gate(qm, T(np.zeros((1, 3))), T(np.zeros((1, 3))), gp)
    with pytest.raises(ValueError):
        GateParams(T(np.zeros((16, 4))), T(np.zeros((4, 4))), 4)   # rank must be < d


def test_fuse_cases():
    assert fuse(T([[1.0, 1.0]]), T([[2, 3]]), T([[5, 7]])).data.tolist() == [[2, 3]]
    assert fuse(T([[0.5, 0.5]]), T([[2, 3]]), T([[4, 5]])).data.tolist() == [[3, 4]]
    h = T([[1.25, -3.5]])
    assert fuse(T([[0.3, 0.9]]), h, h).data.tolist() == h.data.tolist()
    with pytest.raises(DimensionError):
        fuse(T([[0.5]]), h, h)


def test_fused_logits_cases(rng):
    w = T(rng.normal(size=(4, 6)))
    assert not fused_logits(T(np.zeros((1, 4))), w).data.any()
    g, hM, hMp = T(rng.uniform(size=(1, 4))), T(rng.normal(size=(1, 4))), T(rng.normal(size=(1, 4)))
    composed = lm_head(fuse(g, hM, hMp), w).data
    direct = (g.data * hM.data + (1 - g.data) * hMp.data) @ w.data
    assert np.max(np.abs(fused_logits(fuse(g, hM, hMp), w).data - composed)) == 0
    assert np.max(np.abs(composed - direct)) < 1e-12


def test_half_gate_zero_init_adapters_equals_frozen_logits(tiny_weights, tiny_config):
    toks = [1, 9, 4, 13]
    ad = make_lora(tiny_config, rank=2, seed=1)
    with nx.no_grad():
        hM, hMp = forward_hidden(toks, tiny_weights), forward_hidden(toks, tiny_weights, ad)
        qm = query_means(hM, hMp)
        h_N, _ = interweave(qm, hM, hMp, make_gate(tiny_config.d_model, 4, seed=2))
        np.testing.assert_array_equal(fused_logits(h_N, tiny_weights["head"]).data,
                                      lm_head(hM, tiny_weights["head"]).data)


def test_next_token_probs(rng):
    p = next_token_probs(T(np.zeros((1, 5)))).data
    assert np.all(p == 0.2)
    for _ in range(100):
        logits = T(rng.normal(scale=5, size=(1, 9)))
        p = next_token_probs(logits).data
        assert abs(p.sum() - 1.0) < 1e-12
        assert np.argmax(p) == np.argmax(logits.data)


@settings(max_examples=200)
@given(st.integers(0, 2**32 - 1))
def test_gate_range_and_convex_envelope(seed):
    rng = np.random.default_rng(seed)
    d, r = 6, 3
    gp = random_gate(rng, d, r)
    gp.W_A.data *= rng.uniform(0.1, 10)
    hbM, hM, hMp, hbMp = (T(rng.normal(scale=3, size=(1, d))) for _ in range(4))
    g = gate(QueryMemory(hbM, hbMp, 2), hM, hMp, gp)
    assert np.all((g.data > 0) & (g.data < 1))
    h = fuse(g, hM, hMp).data
    lo, hi = np.minimum(hM.data, hMp.data), np.maximum(hM.data, hMp.data)
    slack = 1e-12 * (1 + np.abs(hi))   # g*a + (1-g)*a can miss a by an ulp
    assert np.all(h >= lo - slack) and np.all(h <= hi + slack)


def test_fixed_half_equals_query_gate_with_zero_wb(rng):
    d = 5
    gp = make_gate(d, 2, seed=9)
    qm = QueryMemory(T(rng.normal(size=(1, d))), T(rng.normal(size=(1, d))), 3)
    hM, hMp = T(rng.normal(size=(3, d))), T(rng.normal(size=(3, d)))
    a, _ = interweave(qm, hM, hMp, gp, FusionMode.QUERY_GATE)
    b, _ = interweave(qm, hM, hMp, None, FusionMode.FIXED_HALF)
    np.testing.assert_array_equal(a.data, b.data)


def test_batch_query_means_matches_per_row(tiny_weights):
    tokens = np.array([[1, 5, 6, 7, 8], [1, 9, 10, 0, 0]])
    with nx.no_grad():
        h = forward_tokens(tokens, tiny_weights)
        means = batch_query_means(h, np.array([3, 2]), 5).data
    rows = h.data.reshape(2, 5, -1)
    np.testing.assert_allclose(means[0], rows[0, :3].mean(axis=0), atol=1e-15)
    np.testing.assert_allclose(means[1], rows[1, :2].mean(axis=0), atol=1e-15)


def test_gradient_routing_only_adapters_and_gate(tiny_weights, tiny_config, vocab):
    ad = make_lora(tiny_config, rank=2, seed=0)
    for a in ad.adapters.values():
        a.B.data[:] = np.random.default_rng(0).normal(scale=0.1, size=a.B.shape)
    gp = make_gate(tiny_config.d_model, 4, seed=1)
    gp.W_B.data[:] = 0.1
    batch = collate([make_example("copy:ab→", "ab", vocab), make_example("3+4=", "07", vocab)])
    with nx.Tape() as tape:
        loss = loss_batch(batch, tiny_weights, ad, gp, "imsm")
    nx.backward(loss, tape)
    assert all(t.grad is None for t in tiny_weights.parameters())
    assert all(p.grad is not None and np.any(p.grad != 0) for p in ad.parameters() + gp.parameters())


def test_full_imsm_path_gradcheck(vocab):
    cfg = ModelConfig(vocab_size=len(vocab), d_model=8, n_layers=2, n_heads=2, d_ff=16, max_seq_len=16)
    w = init_weights(cfg, seed=1, std=0.4).freeze()
    rng = np.random.default_rng(7)
    ad = make_lora(cfg, ("q", "v", "down"), rank=2, seed=2, init_std=0.3)
    for a in ad.adapters.values():
        a.B.data[:] = rng.normal(scale=0.3, size=a.B.shape)
    gp = make_gate(8, 3, seed=3, init_std=0.3)
    gp.W_B.data[:] = rng.normal(scale=0.3, size=gp.W_B.shape)
    batch = collate([make_example("copy:ab→", "ab", vocab), make_example("7+5=", "12", vocab)])
    fn = lambda *params: loss_batch(batch, w, ad, gp, "imsm")
    assert nx.gradcheck(fn, ad.parameters() + gp.parameters()) < 1e-4


def test_gate_params_round_trip(tmp_path):
    gp = make_gate(16, 4, seed=0)
    gp.W_B.data += 0.5
    gp.save(tmp_path / "g.imsm")
    back = GateParams.load(tmp_path / "g.imsm")
    assert back.checksum() == gp.checksum() and back.rank == 4
