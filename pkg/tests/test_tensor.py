import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from hoikit import tensor as T
from hoikit.config import FD_STEP, GRAD_REL_TOL, ROW_SUM_TOL
from hoikit.errors import ContractError, NonFiniteError, ShapeError
from util_grad import check_op_gradients, max_rel_error, numeric_gradient

rng = np.random.default_rng(0)


def r(*shape):
    return rng.normal(size=shape)


# ---------------------------------------------------------------------------
# linear_apply
# ---------------------------------------------------------------------------


def test_linear_identity_rows_return_weight_rows():
    w = T.Tensor(r(2, 3))
    x = T.Tensor(np.eye(2))
    out = T.linear_apply(x, w)
    assert np.array_equal(out.data, w.data)


def test_linear_identity_weight_plus_bias():
    out = T.linear_apply(T.Tensor([[1.0, 2.0]]), T.Tensor(np.eye(2)),
                         T.Tensor([3.0, 4.0]))
    assert np.array_equal(out.data, [[4.0, 6.0]])


def test_linear_matches_triple_loop_oracle():
    x, w, b = r(3, 4), r(4, 2), r(2)
    expected = np.zeros((3, 2))
    for i in range(3):
        for j in range(2):
            acc = b[j]
            for k in range(4):
                acc += x[i, k] * w[k, j]
            expected[i, j] = acc
    out = T.linear_apply(T.Tensor(x), T.Tensor(w), T.Tensor(b))
    assert np.allclose(out.data, expected, atol=1e-12)


def test_linear_shape_mismatch_raises():
    with pytest.raises(ShapeError):
        T.linear_apply(T.Tensor(r(2, 3)), T.Tensor(r(4, 2)))
    with pytest.raises(ShapeError):
        T.linear_apply(T.Tensor(r(2, 3)), T.Tensor(r(3, 2)), T.Tensor(r(3)))


# ---------------------------------------------------------------------------
# softmax_rows
# ---------------------------------------------------------------------------


def test_softmax_uniform_logits():
    out = T.softmax_rows(T.Tensor([[0.0, 0.0, 0.0]]))
    assert np.allclose(out.data, 1.0 / 3.0, atol=1e-12)


def test_softmax_limit_behavior():
    out = T.softmax_rows(T.Tensor([[5.0, 5.0 + 60.0]]))
    assert out.data[0, 0] < 1e-20
    assert out.data[0, 1] >= 1.0 - 1e-15


def test_softmax_against_exp_normalize_oracle():
    row = np.array([1.0, 2.0, 3.0])
    expected = np.exp(row) / np.exp(row).sum()
    out = T.softmax_rows(T.Tensor(row[None, :]))
    assert np.allclose(out.data[0], expected, atol=1e-12)


@settings(max_examples=100, deadline=None)
@given(st.lists(st.lists(st.floats(min_value=-1e3, max_value=1e3),
                          min_size=2, max_size=6),
                min_size=1, max_size=4).filter(
                    lambda m: len({len(row) for row in m}) == 1))
def test_softmax_rows_sum_to_one(matrix):
    out = T.softmax_rows(T.Tensor(matrix))
    sums = out.data.sum(axis=1)
    assert np.all(np.abs(sums - 1.0) <= ROW_SUM_TOL)
    # Strict positivity holds until exp underflows (|logit spread| ~ 745).
    assert np.all(out.data >= 0.0)
    assert np.all(out.data <= 1.0)
    if np.ptp(matrix) < 100.0:
        assert np.all(out.data > 0.0)


# ---------------------------------------------------------------------------
# layer_norm
# ---------------------------------------------------------------------------


def _unit_ln(x, eps):
    m = x.shape[1]
    return T.layer_norm(T.Tensor(x), T.Tensor(np.ones(m)), T.Tensor(np.zeros(m)),
                        eps=eps)


def test_layer_norm_constant_row_maps_to_shift():
    out = _unit_ln(np.full((1, 4), 5.0), eps=1e-5)
    assert np.allclose(out.data, 0.0, atol=1e-9)


def test_layer_norm_already_normalized_row():
    out = _unit_ln(np.array([[1.0, -1.0]]), eps=1e-15)
    assert np.allclose(out.data, [[1.0, -1.0]], atol=1e-7)


def test_layer_norm_against_two_pass_oracle():
    row = np.array([[1.0, 2.0, 3.0, 4.0]])
    mu = row.mean()
    var = ((row - mu) ** 2).mean()
    expected = (row - mu) / np.sqrt(var + 1e-5)
    out = _unit_ln(row, eps=1e-5)
    assert np.allclose(out.data, expected, atol=1e-12)


def test_layer_norm_row_statistics():
    x = r(5, 8)
    out = _unit_ln(x, eps=1e-12)
    assert np.all(np.abs(out.data.mean(axis=1)) <= 1e-9)
    assert np.all(np.abs(out.data.var(axis=1) - 1.0) <= 1e-6)


def test_layer_norm_degenerate_width():
    with pytest.raises(ShapeError):
        _unit_ln(np.ones((2, 1)), eps=1e-5)


# ---------------------------------------------------------------------------
# residual_enhance
# ---------------------------------------------------------------------------


def test_residual_enhance_zero_base():
    aux = r(3, 2)
    out = T.residual_enhance(T.Tensor(np.zeros((3, 2))), T.Tensor(aux), 1.0)
    assert np.array_equal(out.data, aux)


def test_residual_enhance_disabled():
    base = r(3, 2)
    out = T.residual_enhance(T.Tensor(base), T.Tensor(r(3, 2)), 0.0)
    assert np.array_equal(out.data, base)


def test_residual_enhance_elementwise_oracle():
    out = T.residual_enhance(T.Tensor([[1.0, 1.0]]), T.Tensor([[2.0, 4.0]]), 0.1)
    assert np.allclose(out.data, [[1.2, 1.4]], atol=1e-15)


def test_residual_enhance_shape_mismatch():
    with pytest.raises(ShapeError):
        T.residual_enhance(T.Tensor(r(2, 2)), T.Tensor(r(3, 2)), 1.0)


@settings(max_examples=100, deadline=None)
@given(st.floats(min_value=-10, max_value=10),
       st.floats(min_value=-10, max_value=10),
       st.floats(min_value=-4, max_value=4))
def test_residual_enhance_involution(x, a, w):
    base = T.Tensor([[x]] * 2)
    aux = T.Tensor([[a]] * 2)
    out = T.residual_enhance(T.residual_enhance(base, aux, w), aux, -w)
    assert np.all(np.abs(out.data - base.data) <= 1e-9)


# ---------------------------------------------------------------------------
# backward
# ---------------------------------------------------------------------------


def test_backward_sum_gives_ones():
    p = T.Parameter(r(3, 4), "p")
    T.backward(T.sum_all(p))
    assert np.array_equal(p.grad, np.ones((3, 4)))


def test_backward_zero_scale_gives_zeros():
    p = T.Parameter(r(3, 4), "p")
    T.backward(T.sum_all(p * 0.0))
    assert np.array_equal(p.grad, np.zeros((3, 4)))


def test_backward_rejects_non_scalar():
    p = T.Parameter(r(2, 2), "p")
    with pytest.raises(ContractError):
        T.backward(p * 2.0)


def test_backward_accumulates_across_calls():
    p = T.Parameter(np.ones((2,)), "p")
    T.backward(T.sum_all(p))
    T.backward(T.sum_all(p))
    assert np.array_equal(p.grad, np.full((2,), 2.0))
    p.zero_grad()
    assert np.array_equal(p.grad, np.zeros(2))


def test_backward_diamond_graph():
    p = T.Parameter(np.array([[2.0]]), "p")
    a = p * 3.0
    loss = T.sum_all(a + a * p)  # 3p + 3p^2 -> d/dp = 3 + 6p = 15
    T.backward(loss)
    assert np.allclose(p.grad, [[15.0]], atol=1e-12)


def test_bce_gradient_matches_finite_differences():
    logits = r(1, 2)
    y = np.array([[1.0, 0.0]])
    t = T.Tensor(logits.copy(), requires_grad=True)
    T.backward(T.bce_with_logits_mean(t, y))

    def f(x):
        return T.bce_with_logits_mean(T.Tensor(x), y).item()

    numeric = numeric_gradient(lambda x: f(x), [logits.copy()], 0, step=FD_STEP)
    assert max_rel_error(t.grad, numeric) < 1e-5


def test_bce_at_zero_logits_is_ln2():
    loss = T.bce_with_logits_mean(T.Tensor(np.zeros((1, 4))), np.array([[1., 0., 1., 0.]]))
    assert abs(loss.item() - np.log(2.0)) <= 1e-12


# ---------------------------------------------------------------------------
# gradient checks for every primitive
# ---------------------------------------------------------------------------

PROBE = np.random.default_rng(7).normal(size=(3, 4))


def _probed(fn, out_shape):
    probe = T.Tensor(np.random.default_rng(7).normal(size=out_shape))

    def build(*ts):
        out = fn(*ts)
        return T.sum_all(out * probe) if out.shape else out

    return build


PRIMITIVE_CASES = [
    ("add", lambda a, b: a + b, [r(3, 4), r(3, 4)]),
    ("add_broadcast", lambda a, b: a + b, [r(3, 4), r(4)]),
    ("sub", lambda a, b: a - b, [r(3, 4), r(3, 4)]),
    ("mul", lambda a, b: a * b, [r(3, 4), r(3, 4)]),
    ("div", lambda a, b: a / b, [r(3, 4), r(3, 4) + 3.0]),
    ("neg", T.neg, [r(3, 4)]),
    ("absolute", T.absolute, [r(3, 4) + np.sign(r(3, 4)) * 0.5 + 1.0]),
    ("maximum", T.maximum, [r(3, 4), r(3, 4) + 0.05]),
    ("minimum", T.minimum, [r(3, 4), r(3, 4) + 0.05]),
    ("clip", lambda a: T.clip(a, -0.5, 0.5), [r(3, 4) * 2.0 + 0.01]),
    ("relu", T.relu, [r(3, 4) + 0.01]),
    ("sigmoid", T.sigmoid, [r(3, 4)]),
    ("matmul", T.matmul, [r(3, 4), r(4, 5)]),
    ("transpose", T.transpose, [r(3, 4)]),
    ("linear_apply", T.linear_apply, [r(3, 4), r(4, 5)]),
    ("linear_apply_bias", T.linear_apply, [r(3, 4), r(4, 5), r(5)]),
    ("softmax_rows", T.softmax_rows, [r(3, 5)]),
    ("log_softmax_rows", T.log_softmax_rows, [r(3, 5)]),
    ("layer_norm", lambda x, g, s: T.layer_norm(x, g, s), [r(3, 5), r(5), r(5)]),
    ("l2_normalize_rows", T.l2_normalize_rows, [r(3, 5) + 0.5]),
    ("residual_enhance", lambda b, a: T.residual_enhance(b, a, 0.37), [r(3, 4), r(3, 4)]),
    ("sum_all", T.sum_all, [r(3, 4)]),
    ("mean_all", T.mean_all, [r(3, 4)]),
    ("mean_rows", T.mean_rows, [r(4, 5)]),
    ("getitem", lambda a: a[1:3, ::2], [r(4, 5)]),
    ("repeat_rows", lambda a: T.repeat_rows(a, 4), [r(1, 5)]),
    ("concat", lambda a, b: T.concat([a, b], axis=1), [r(3, 2), r(3, 3)]),
    ("rows", lambda a: T.rows(a, [2, 0, 2]), [r(4, 5)]),
    ("reshape", lambda a: T.reshape(a, (2, 10)), [r(4, 5)]),
    ("bce", lambda a: T.bce_with_logits_mean(a, (PROBE[:3, :4] > 0).astype(float)),
     [r(3, 4)]),
    ("single_head_attention", T.single_head_attention,
     [r(3, 4), r(5, 4), r(4, 4), r(4), r(4, 4), r(4), r(4, 4), r(4),
      r(4, 4), r(4)]),
    ("single_head_attention_pos",
     lambda *ts: T.single_head_attention(*ts[:10], q_pos=ts[10], k_pos=ts[11]),
     [r(3, 4), r(5, 4), r(4, 4), r(4), r(4, 4), r(4), r(4, 4), r(4),
      r(4, 4), r(4), r(3, 4), r(5, 4)]),
    ("add_layer_norm", T.add_layer_norm, [r(3, 5), r(3, 5), r(5), r(5)]),
    ("mlp_relu", T.mlp_relu, [r(3, 4), r(4, 6), r(6) + 0.05, r(6, 2), r(2)]),
    ("corner_boxes", lambda s: T.corner_boxes(s, 1e-4),
     [np.column_stack([np.full(3, 0.5) + r(3) * 0.05,
                       np.full(3, 0.5) + r(3) * 0.05,
                       np.full(3, 0.25) + r(3) * 0.02,
                       np.full(3, 0.25) + r(3) * 0.02])]),
]


@pytest.mark.parametrize("name,fn,arrays", PRIMITIVE_CASES,
                         ids=[c[0] for c in PRIMITIVE_CASES])
def test_primitive_gradients(name, fn, arrays):
    shape = fn(*[T.Tensor(a) for a in arrays]).shape
    worst = check_op_gradients(_probed(fn, shape), arrays)
    assert worst < GRAD_REL_TOL, f"{name}: worst rel err {worst:.2e}"


# ---------------------------------------------------------------------------
# invariants
# ---------------------------------------------------------------------------


def test_non_finite_inputs_rejected():
    with pytest.raises(NonFiniteError):
        T.Tensor([np.inf, 1.0])
    with pytest.raises(NonFiniteError):
        T.Tensor([1.0]) / T.Tensor([0.0])


def test_finite_checks_toggle():
    prev = T.set_finite_checks(False)
    try:
        out = T.Tensor([1.0]) / T.Tensor([0.0])
        assert np.isinf(out.data[0])
    finally:
        T.set_finite_checks(prev)


def test_parameter_gradient_shape_matches():
    p = T.Parameter(r(3, 2), "w")
    assert p.grad.shape == p.data.shape
    assert p.name == "w"


def test_ops_are_deterministic():
    x = r(4, 4)
    a = T.softmax_rows(T.Tensor(x)).data
    b = T.softmax_rows(T.Tensor(x)).data
    assert np.array_equal(a, b)
