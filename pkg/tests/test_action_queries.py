import numpy as np
import pytest

from hoikit import action_queries as aq
from hoikit import tensor as T
from hoikit.blocks import FfnParams, LayerNormParams
from hoikit.config import GRAD_REL_TOL, ROW_SUM_TOL
from hoikit.errors import ValidationError
from hoikit.tensor import Tensor
from util_grad import max_rel_error, numeric_gradient

rng = np.random.default_rng(4)


def make_params(d, channels, n_layers, seed=0, zero=False):
    local = np.random.default_rng(seed)

    def w(*shape):
        return Tensor(np.zeros(shape) if zero else local.normal(0, 0.3, shape))

    layers = tuple(
        aq.TextLayerParams(
            wq=w(d, d), wk=w(d, d), wv=w(d, d),
            ln=LayerNormParams(Tensor(np.ones(d)), Tensor(np.zeros(d))),
            ffn=FfnParams(w(d, 4 * d), w(4 * d), w(4 * d, d), w(d)),
        )
        for _ in range(n_layers))
    return aq.ActionQueryParams(layers, w(d, channels), w(channels))


# ---------------------------------------------------------------------------
# seed_queries
# ---------------------------------------------------------------------------


def test_seed_broadcast_definition():
    out = aq.seed_queries(Tensor([[1.0, 2.0, 3.0]]), 2)
    assert np.array_equal(out.data, [[1, 2, 3], [1, 2, 3]])


def test_seed_single_query_is_identity():
    emb = rng.normal(size=(1, 5))
    assert np.array_equal(aq.seed_queries(Tensor(emb), 1).data, emb)


def test_seed_rows_all_identical():
    out = aq.seed_queries(Tensor(rng.normal(size=(1, 8))), 7)
    assert np.all(out.data == out.data[0])


def test_seed_rejects_nonpositive_count():
    with pytest.raises(ValidationError):
        aq.seed_queries(Tensor([[1.0, 2.0]]), 0)


# ---------------------------------------------------------------------------
# one refinement layer
# ---------------------------------------------------------------------------


def test_single_prototype_gives_all_ones_attention():
    params = make_params(4, 6, 1, seed=1)
    q = Tensor(rng.normal(size=(3, 4)))
    bank = Tensor(rng.normal(size=(1, 4)))
    q_next, attn = aq.text_attention_layer(q, bank, params.layers[0])
    assert np.allclose(attn.data, 1.0, atol=1e-15)
    mixed = bank.data @ params.layers[0].wv.data
    # every query row mixes exactly the single prototype
    assert q_next.shape == (3, 4)
    assert np.allclose((attn.data @ mixed), np.repeat(mixed, 3, axis=0), atol=1e-12)


def test_zero_query_weights_give_uniform_attention():
    params = make_params(4, 6, 1, seed=2)
    layer = aq.TextLayerParams(Tensor(np.zeros((4, 4))), params.layers[0].wk,
                               params.layers[0].wv, params.layers[0].ln,
                               params.layers[0].ffn)
    _, attn = aq.text_attention_layer(Tensor(rng.normal(size=(2, 4))),
                                      Tensor(rng.normal(size=(5, 4))), layer)
    assert np.allclose(attn.data, 0.2, atol=1e-12)


def _ln_np(x, gain, shift, eps=1e-5):
    mu = x.mean(axis=1, keepdims=True)
    var = x.var(axis=1, keepdims=True)
    return (x - mu) / np.sqrt(var + eps) * gain + shift


def _softmax_np(x):
    e = np.exp(x - x.max(axis=1, keepdims=True))
    return e / e.sum(axis=1, keepdims=True)


def _replay_layer(q, bank, layer):
    s = _softmax_np(q @ layer.wq.data @ (bank @ layer.wk.data).T
                    / np.sqrt(q.shape[1]))
    normed = _ln_np(q + s @ (bank @ layer.wv.data),
                    layer.ln.gain.data, layer.ln.shift.data)
    hidden = np.maximum(normed @ layer.ffn.w1.data + layer.ffn.b1.data, 0.0)
    return hidden @ layer.ffn.w2.data + layer.ffn.b2.data, s


def test_layer_matches_composition_oracle():
    params = make_params(4, 6, 1, seed=3)
    q = rng.normal(size=(2, 4))
    bank = rng.normal(size=(3, 4))
    got_q, got_s = aq.text_attention_layer(Tensor(q), Tensor(bank), params.layers[0])
    want_q, want_s = _replay_layer(q, bank, params.layers[0])
    assert np.allclose(got_s.data, want_s, atol=1e-12)
    assert np.allclose(got_q.data, want_q, atol=1e-12)


# ---------------------------------------------------------------------------
# full branch
# ---------------------------------------------------------------------------


def test_three_layers_give_three_attention_maps():
    params = make_params(4, 6, 3, seed=5)
    trace = aq.build_action_queries(Tensor(rng.normal(size=(1, 4))),
                                    Tensor(rng.normal(size=(5, 4))), params, 4)
    assert len(trace.attn_maps) == 3
    assert trace.queries.shape == (4, 6)


def test_zero_weights_collapse_to_output_bias():
    # With every learned weight at zero the literal layer form
    # FFN(LN(Q + mixed)) zeroes the queries, so the bridge bias is all that
    # remains; rows stay identical throughout.
    params = make_params(4, 6, 3, seed=6, zero=True)
    params = aq.ActionQueryParams(params.layers, params.out_w,
                                  Tensor(rng.normal(size=6)))
    trace = aq.build_action_queries(Tensor(rng.normal(size=(1, 4))),
                                    Tensor(rng.normal(size=(5, 4))), params, 4)
    assert np.all(trace.queries.data == trace.queries.data[0])
    assert np.allclose(trace.queries.data, params.out_b.data, atol=1e-15)


def test_forward_matches_replay_oracle():
    params = make_params(4, 6, 3, seed=0)
    emb = rng.normal(size=(1, 4))
    bank = rng.normal(size=(5, 4))
    trace = aq.build_action_queries(Tensor(emb), Tensor(bank), params, 3)
    q = np.repeat(emb, 3, axis=0)
    for layer in params.layers:
        q, s = _replay_layer(q, bank, layer)
    want = q @ params.out_w.data + params.out_b.data
    assert np.allclose(trace.queries.data, want, atol=1e-10)


def test_attention_rows_sum_to_one_and_positive():
    params = make_params(4, 6, 3, seed=8)
    trace = aq.build_action_queries(Tensor(rng.normal(size=(1, 4))),
                                    Tensor(rng.normal(size=(5, 4))), params, 4)
    for attn in trace.attn_maps:
        assert np.all(np.abs(attn.data.sum(axis=1) - 1.0) <= ROW_SUM_TOL)
        assert np.all(attn.data > 0.0)


def test_prototype_permutation_equivariance():
    params = make_params(4, 6, 1, seed=9)
    q = Tensor(rng.normal(size=(3, 4)))
    bank = rng.normal(size=(5, 4))
    perm = np.array([3, 0, 4, 1, 2])
    q1, s1 = aq.text_attention_layer(q, Tensor(bank), params.layers[0])
    q2, s2 = aq.text_attention_layer(q, Tensor(bank[perm]), params.layers[0])
    assert np.allclose(s2.data, s1.data[:, perm], atol=1e-12)
    assert np.allclose(q1.data, q2.data, atol=1e-12)


def test_output_rows_identical_before_downstream_perturbation():
    params = make_params(6, 8, 3, seed=10)
    trace = aq.build_action_queries(Tensor(rng.normal(size=(1, 6))),
                                    Tensor(rng.normal(size=(7, 6))), params, 5)
    for row in trace.queries.data[1:]:
        assert np.array_equal(row, trace.queries.data[0])


def test_gradients_flow_to_embedding_bank_and_weights():
    params = make_params(4, 3, 2, seed=11)
    emb = rng.normal(size=(1, 4))
    bank = rng.normal(size=(2, 4))
    probe = rng.normal(size=(2, 3))

    def forward(e_arr, b_arr, wq_arr):
        layers = list(params.layers)
        layers[0] = aq.TextLayerParams(Tensor(wq_arr), layers[0].wk,
                                       layers[0].wv, layers[0].ln, layers[0].ffn)
        p = aq.ActionQueryParams(tuple(layers), params.out_w, params.out_b)
        trace = aq.build_action_queries(Tensor(e_arr), Tensor(b_arr), p, 2)
        return T.sum_all(trace.queries * Tensor(probe))

    e_t = Tensor(emb.copy(), requires_grad=True)
    b_t = Tensor(bank.copy(), requires_grad=True)
    wq_t = Tensor(params.layers[0].wq.data.copy(), requires_grad=True)
    layers = list(params.layers)
    layers[0] = aq.TextLayerParams(wq_t, layers[0].wk, layers[0].wv,
                                   layers[0].ln, layers[0].ffn)
    trace = aq.build_action_queries(e_t, b_t,
                                    aq.ActionQueryParams(tuple(layers),
                                                         params.out_w, params.out_b), 2)
    T.backward(T.sum_all(trace.queries * Tensor(probe)))

    arrays = [emb.copy(), bank.copy(), params.layers[0].wq.data.copy()]
    for which, analytic in ((0, e_t.grad), (1, b_t.grad), (2, wq_t.grad)):
        numeric = numeric_gradient(
            lambda e, b, w: forward(e, b, w).item(), arrays, which)
        assert max_rel_error(analytic, numeric) < GRAD_REL_TOL


# ---------------------------------------------------------------------------
# enhancement
# ---------------------------------------------------------------------------


def test_enhance_action_disabled_is_identity():
    q = Tensor(rng.normal(size=(3, 4)))
    v = Tensor(rng.normal(size=(3, 4)))
    a = Tensor(rng.normal(size=(3, 4)))
    q2, v2 = aq.enhance_action(q, v, a, 0.0, 0.0)
    assert np.array_equal(q2.data, q.data)
    assert np.array_equal(v2.data, v.data)


def test_enhance_action_defaults():
    q = rng.normal(size=(3, 4))
    v = rng.normal(size=(3, 4))
    a = rng.normal(size=(3, 4))
    q2, v2 = aq.enhance_action(Tensor(q), Tensor(v), Tensor(a), 1.0, 1.0)
    assert np.allclose(q2.data, q + a, atol=1e-15)
    assert np.allclose(v2.data, v + a, atol=1e-15)


def test_enhance_action_zero_queries_give_action_rows():
    a = rng.normal(size=(3, 4))
    q2, _ = aq.enhance_action(Tensor(np.zeros((3, 4))), Tensor(np.zeros((3, 4))),
                              Tensor(a), 1.0, 1.0)
    assert np.array_equal(q2.data, a)
