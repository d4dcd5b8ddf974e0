import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from imsm import numerics as nx
from imsm.numerics import DimensionError, NumericError, Tape, Tensor, UsageError


def T(x, grad=False):
    return Tensor(np.array(x, dtype=float), requires_grad=grad)


def projected(op, shape_out, rng):
    """Scalar loss sum(op(...) * R) with a fixed random projection R."""
    R = Tensor(rng.normal(size=shape_out))
    return lambda *xs: nx.sum_all(nx.elem_mul(op(*xs), R))


# ------------------------------------------------------------------ matmul

def test_matmul_identity():
    out = nx.matmul(T([[1, 0], [0, 1]]), T([[3, 4], [5, 6]]))
    np.testing.assert_array_equal(out.data, [[3, 4], [5, 6]])


def test_matmul_row_col():
    assert nx.matmul(T([[1, 2]]), T([[3], [4]])).data.tolist() == [[11.0]]


def test_matmul_shape_mismatch():
    with pytest.raises(DimensionError):
        nx.matmul(T(np.ones((2, 3))), T(np.ones((2, 3))))


def test_matmul_gradcheck():
    rng = np.random.default_rng(0)
    a, b = T(rng.normal(size=(3, 4))), T(rng.normal(size=(4, 2)))
    assert nx.gradcheck(projected(nx.matmul, (3, 2), rng), [a, b]) < 1e-6


def test_batched_matmul_gradcheck():
    rng = np.random.default_rng(1)
    a, b = T(rng.normal(size=(2, 3, 4))), T(rng.normal(size=(2, 4, 5)))
    assert nx.gradcheck(projected(nx.matmul, (2, 3, 5), rng), [a, b]) < 1e-6


def test_shared_weight_matmul_gradcheck():
    rng = np.random.default_rng(2)
    a, w = T(rng.normal(size=(2, 3, 4))), T(rng.normal(size=(4, 5)))
    assert nx.gradcheck(projected(nx.matmul, (2, 3, 5), rng), [a, w]) < 1e-6


# ------------------------------------------------------------------ elementwise

def test_elem_mul_and_add():
    np.testing.assert_array_equal(nx.elem_mul(T([1, 0]), T([5, 7])).data, [5, 0])
    np.testing.assert_array_equal(nx.add(T([2, 3]), T([0, 0])).data, [2, 3])


def test_no_implicit_broadcast():
    with pytest.raises(DimensionError):
        nx.add(T(np.ones((2, 3))), T(np.ones((1, 3))))
    # scalars are the one exception
    np.testing.assert_array_equal((1.0 - T([0.25, 1.0])).data, [0.75, 0.0])


@pytest.mark.parametrize("op", [nx.add, nx.sub, nx.elem_mul])
def test_binary_gradcheck(op):
    rng = np.random.default_rng(3)
    a, b = T(rng.normal(size=(2, 3))), T(rng.normal(size=(2, 3)))
    assert nx.gradcheck(projected(op, (2, 3), rng), [a, b]) < 1e-6


def test_scale_lastdim_gradcheck():
    rng = np.random.default_rng(4)
    x, v = T(rng.normal(size=(3, 4))), T(rng.normal(size=(1, 4)))
    assert nx.gradcheck(projected(nx.scale_lastdim, (3, 4), rng), [x, v]) < 1e-6


# ------------------------------------------------------------------ concat / mean

def test_concat_lastdim_values():
    out = nx.concat_lastdim([T([[1, 2]]), T([[3]]), T([[4, 5]])])
    assert out.data.tolist() == [[1, 2, 3, 4, 5]]


def test_concat_single_part_is_identity():
    x = T([[1.5, -2.0]])
    np.testing.assert_array_equal(nx.concat_lastdim([x]).data, x.data)


def test_concat_empty_rejected():
    with pytest.raises(UsageError):
        nx.concat_lastdim([])


def test_concat_gradcheck():
    rng = np.random.default_rng(5)
    parts = [T(rng.normal(size=(1, 2))) for _ in range(4)]
    fn = projected(lambda *p: nx.concat_lastdim(list(p)), (1, 8), rng)
    assert nx.gradcheck(fn, parts) < 1e-6


def test_mean_rows():
    assert nx.mean_rows(T([[1, 3], [3, 5]])).data.tolist() == [[2, 4]]
    assert nx.mean_rows(T([[7, 7]])).data.tolist() == [[7, 7]]
    with pytest.raises(UsageError):
        nx.mean_rows(T(np.zeros((0, 2))))


def test_mean_rows_grad_is_upstream_over_T():
    h = T(np.arange(8.0).reshape(4, 2), grad=True)
    up = np.array([[3.0, -1.0]])
    with Tape() as tape:
        loss = nx.sum_all(nx.elem_mul(nx.mean_rows(h), T(up)))
    nx.backward(loss, tape)
    np.testing.assert_array_equal(h.grad, np.repeat(up / 4, 4, axis=0))


# ------------------------------------------------------------------ sigmoid / softmax

def test_sigmoid_values():
    assert nx.sigmoid(T([0.0])).data[0] == 0.5
    sat = nx.sigmoid(T([50.0, -50.0])).data
    assert abs(sat[0] - 1.0) < 1e-15 and abs(sat[1]) < 1e-15


def test_sigmoid_gradcheck():
    rng = np.random.default_rng(6)
    assert nx.gradcheck(projected(nx.sigmoid, (1, 4), rng), [T(rng.normal(size=(1, 4)))]) < 1e-6


@given(arrays(np.float64, 16, elements=st.floats(-1e300, 1e300, allow_nan=False)))
def test_sigmoid_strictly_inside_unit_interval(x):
    s = nx.sigmoid(Tensor(x)).data
    assert np.all(s > 0.0) and np.all(s < 1.0)


def test_softmax_uniform_and_stable():
    np.testing.assert_allclose(nx.softmax_lastdim(T([[3, 3, 3, 3]])).data, [[0.25] * 4], rtol=0, atol=0)
    p = nx.softmax_lastdim(T([[1000.0, 0.0]])).data
    assert abs(p[0, 0] - 1.0) < 1e-15 and p[0, 1] < 1e-300


@settings(max_examples=60)
@given(arrays(np.float64, (3, 7), elements=st.floats(-1e3, 1e3)))
def test_softmax_sums_to_one(x):
    p = nx.softmax_lastdim(Tensor(x)).data
    assert np.all(p >= 0)
    assert np.all(np.abs(p.sum(axis=-1) - 1.0) < 1e-12)


def test_softmax_gradcheck():
    rng = np.random.default_rng(7)
    x = T(rng.normal(size=(1, 5)))
    assert nx.gradcheck(projected(nx.softmax_lastdim, (1, 5), rng), [x]) < 1e-6


def test_masked_softmax_zeroes_excluded():
    where = np.array([[True, False, True]])
    p = nx.softmax_lastdim(T([[1.0, 50.0, 1.0]]), where).data
    assert p[0, 1] == 0.0 and np.allclose(p[0, [0, 2]], 0.5)


# ------------------------------------------------------------------ cross entropy

def test_cross_entropy_uniform():
    loss = nx.cross_entropy_masked(T(np.zeros((1, 4))), [2], [True])
    assert abs(loss.item() - 1.386294) < 1e-6


def test_cross_entropy_confident():
    logits = np.full((1, 4), -50.0)
    logits[0, 1] = 50.0
    assert nx.cross_entropy_masked(T(logits), [1], [True]).item() < 1e-12


def test_cross_entropy_matches_hand_logsumexp():
    rng = np.random.default_rng(8)
    logits = rng.normal(size=(3, 5))
    targets, mask = [4, 0, 2], [True, False, True]
    expected = []
    for row, t, m in zip(logits, targets, mask):
        if m:
            lse = max(row) + np.log(sum(np.exp(v - max(row)) for v in row))
            expected.append(lse - row[t])
    got = nx.cross_entropy_masked(T(logits), targets, mask).item()
    assert abs(got - sum(expected) / len(expected)) < 1e-10


def test_cross_entropy_all_masked_rejected():
    with pytest.raises(UsageError):
        nx.cross_entropy_masked(T(np.zeros((2, 3))), [0, 1], [False, False])


def test_cross_entropy_gradcheck():
    rng = np.random.default_rng(9)
    x = T(rng.normal(size=(4, 6)))
    fn = lambda l: nx.cross_entropy_masked(l, [1, 5, 0, 3], [True, True, False, True])
    assert nx.gradcheck(fn, [x]) < 1e-6


# ------------------------------------------------------------------ rmsnorm / rope

def test_rmsnorm_constant_row_gives_ones():
    out = nx.rmsnorm(T([[2.5, 2.5, 2.5]]), T([[1, 1, 1]]), eps=0.0)
    np.testing.assert_allclose(out.data, [[1, 1, 1]], rtol=0, atol=1e-15)


def test_rmsnorm_zero_vector():
    out = nx.rmsnorm(T(np.zeros((1, 4))), T(np.ones((1, 4))), eps=1e-6)
    assert not out.data.any()


def test_rmsnorm_gradcheck():
    rng = np.random.default_rng(10)
    x, w = T(rng.normal(size=(2, 4))), T(rng.normal(size=(1, 4)))
    fn = projected(lambda a, b: nx.rmsnorm(a, b, 1e-6), (2, 4), rng)
    assert nx.gradcheck(fn, [x, w]) < 1e-5


def test_rope_gradcheck_and_norm_preserving():
    rng = np.random.default_rng(11)
    ang = rng.uniform(0, 6, size=(3, 2))
    x = T(rng.normal(size=(2, 3, 4)))
    out = nx.rope(x, np.cos(ang), np.sin(ang)).data
    np.testing.assert_allclose(np.linalg.norm(out, axis=-1), np.linalg.norm(x.data, axis=-1), rtol=1e-12)
    fn = projected(lambda t: nx.rope(t, np.cos(ang), np.sin(ang)), (2, 3, 4), rng)
    assert nx.gradcheck(fn, [x]) < 1e-6


@pytest.mark.parametrize("op,shape", [
    (nx.silu, (2, 5)),
    (lambda x: nx.take_rows(x, [2, 0, 2]), (3, 4)),
    (lambda x: nx.transpose(nx.reshape(x, (2, 2, 3)), (1, 0, 2)), (4, 3)),
])
def test_misc_gradcheck(op, shape):
    rng = np.random.default_rng(12)
    x = T(rng.normal(size=shape))
    out_shape = op(x).shape
    assert nx.gradcheck(projected(op, out_shape, rng), [x]) < 1e-6


# ------------------------------------------------------------------ tape behaviour

def test_backward_identity_loss():
    x = T(3.0, grad=True)
    with Tape() as tape:
        pass
    nx.backward(x, tape)
    assert x.grad == 1.0


def test_backward_square_sum():
    x = T([1.0, 2.0], grad=True)
    with Tape() as tape:
        loss = nx.sum_all(nx.elem_mul(x, x))
    nx.backward(loss, tape)
    np.testing.assert_array_equal(x.grad, [2.0, 4.0])


def test_backward_non_scalar_rejected():
    x = T([1.0, 2.0], grad=True)
    with Tape() as tape:
        y = nx.mul_scalar(x, 2.0)
    with pytest.raises(UsageError):
        nx.backward(y, tape)


def test_fan_out_sums_per_use_gradients():
    rng = np.random.default_rng(13)
    x = T(rng.normal(size=(2, 3)), grad=True)
    w1, w2 = T(rng.normal(size=(3, 2))), T(rng.normal(size=(3, 4)))
    with Tape() as tape:
        loss = nx.sum_all(nx.matmul(x, w1)) + nx.sum_all(nx.sigmoid(nx.matmul(x, w2)))
    nx.backward(loss, tape)
    both = x.grad.copy()
    parts = []
    for f in (lambda: nx.sum_all(nx.matmul(x, w1)), lambda: nx.sum_all(nx.sigmoid(nx.matmul(x, w2)))):
        x.grad = None
        with Tape() as tape:
            loss = f()
        nx.backward(loss, tape)
        parts.append(x.grad.copy())
    np.testing.assert_allclose(both, parts[0] + parts[1], rtol=1e-14, atol=1e-14)


def test_grads_accumulate_until_zeroed():
    x = T([1.0], grad=True)
    for _ in range(2):
        with Tape() as tape:
            loss = nx.sum_all(nx.mul_scalar(x, 3.0))
        nx.backward(loss, tape)
    assert x.grad[0] == 6.0


def test_tape_is_topologically_ordered():
    x = T(np.ones((2, 2)), grad=True)
    with Tape() as tape:
        y = nx.sigmoid(nx.matmul(x, x))
        nx.sum_all(nx.elem_mul(y, y))
    seen = {id(x)}
    for node in tape.nodes:
        assert all(id(i) in seen or not i.requires_grad for i in node.inputs)
        seen.add(id(node.output))


def test_no_grad_records_nothing():
    x = T([1.0], grad=True)
    with Tape() as tape:
        with nx.no_grad():
            nx.mul_scalar(x, 2.0)
    assert tape.nodes == []


@pytest.mark.filterwarnings("ignore:overflow encountered:RuntimeWarning")
def test_non_finite_forward_is_an_error():
    with pytest.raises(NumericError):
        nx.mul_scalar(T([1e308]), 10.0)


def test_random_gradchecks_over_seeds():
    worst = 0.0
    for seed in range(20):
        rng = np.random.default_rng(100 + seed)
        a, b = T(rng.normal(size=(2, 3))), T(rng.normal(size=(3, 3)))
        w = T(rng.normal(size=(1, 3)))
        def fn(a, b, w):
            h = nx.rmsnorm(nx.matmul(a, b), w)
            return nx.cross_entropy_masked(nx.silu(h), [0, 2], [True, True])
        worst = max(worst, nx.gradcheck(fn, [a, b, w]))
    assert worst < 1e-4
