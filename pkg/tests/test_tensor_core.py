import math
import zlib

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from synprompt import tensor_core as tc
from synprompt.tensor_core import ContractError, DiffValue, DimensionError, Tape


def leaf(x):
    return DiffValue(np.asarray(x, dtype=float), requires_grad=True)


def grad_of(f, *params):
    with Tape() as tape:
        out = f()
    tc.backward(tape, out)
    return [p.grad.copy() for p in params]


def erf_series(x, terms=60):
    # Maclaurin series, fine for |x| <= 3
    total = 0.0
    for n in range(terms):
        total += (-1) ** n * x ** (2 * n + 1) / (math.factorial(n) * (2 * n + 1))
    return 2.0 / math.sqrt(math.pi) * total


# -- matmul -------------------------------------------------------------------


def test_matmul_identity():
    out = tc.matmul(DiffValue([[1, 0], [0, 1]]), DiffValue([[3], [4]]))
    np.testing.assert_array_equal(out.data, [[3], [4]])


def test_matmul_row_col():
    assert tc.matmul(DiffValue([[1, 2]]), DiffValue([[3], [4]])).data.tolist() == [[11.0]]


def test_matmul_grad_matches_bT():
    a, b = leaf([[1, 2]]), DiffValue([[3], [4]])
    (ga,) = grad_of(lambda: tc.sum(tc.matmul(a, b)), a)
    np.testing.assert_allclose(ga, [[3, 4]], rtol=0, atol=1e-12)
    err = tc.finite_diff_check(lambda: tc.sum(tc.matmul(a, b)), [a])
    assert err < 1e-9


def test_matmul_shape_error_names_shapes():
    with pytest.raises(DimensionError, match=r"\(2, 3\).*\(2, 3\)"):
        tc.matmul(DiffValue(np.ones((2, 3))), DiffValue(np.ones((2, 3))))


def test_batched_matmul_forms():
    rng = np.random.default_rng(0)
    a = leaf(rng.normal(size=(3, 2, 4)))
    w = leaf(rng.normal(size=(4, 5)))
    b = leaf(rng.normal(size=(3, 4, 2)))
    assert tc.matmul(a, w).shape == (3, 2, 5)
    assert tc.matmul(a, b).shape == (3, 2, 2)
    assert tc.finite_diff_check(lambda: tc.sum(tc.mul(tc.matmul(a, w), tc.matmul(a, w))), [a, w]) < 1e-7
    assert tc.finite_diff_check(lambda: tc.sum(tc.mul(tc.matmul(a, b), tc.matmul(a, b))), [a, b]) < 1e-7


# -- gelu ---------------------------------------------------------------------


def test_gelu_values():
    assert tc.gelu(DiffValue([0.0])).data[0] == 0.0
    oracle = 1.0 * 0.5 * (1.0 + erf_series(1.0 / math.sqrt(2.0)))
    assert abs(oracle - 0.841345) < 1e-6
    assert abs(tc.gelu(DiffValue([1.0])).data[0] - oracle) < 1e-12


def test_gelu_matches_series_oracle_grid():
    xs = np.linspace(-3, 3, 41)
    got = tc.gelu(DiffValue(xs)).data
    want = [x * 0.5 * (1 + erf_series(x / math.sqrt(2))) for x in xs]
    np.testing.assert_allclose(got, want, rtol=0, atol=1e-12)


def test_gelu_grad_at_zero():
    x = leaf([0.0])
    (g,) = grad_of(lambda: tc.sum(tc.gelu(x)), x)
    assert g[0] == pytest.approx(0.5, abs=1e-12)
    assert tc.finite_diff_check(lambda: tc.sum(tc.gelu(x)), [x]) < 1e-8


# -- layer norm ---------------------------------------------------------------


def test_layer_norm_constant_row():
    out = tc.layer_norm(DiffValue([[5.0, 5.0, 5.0]]), DiffValue(np.ones(3)), DiffValue(np.zeros(3)))
    np.testing.assert_array_equal(out.data, [[0, 0, 0]])


def test_layer_norm_unit_row():
    out = tc.layer_norm(DiffValue([[1.0, -1.0]]), DiffValue(np.ones(2)), DiffValue(np.zeros(2)), eps=1e-14)
    np.testing.assert_allclose(out.data, [[1, -1]], atol=1e-12)


def test_layer_norm_population_variance():
    x = np.array([[1.0, 2.0, 4.0, 7.0]])
    out = tc.layer_norm(DiffValue(x), DiffValue(np.ones(4)), DiffValue(np.zeros(4)), eps=1e-5).data
    want = (x - x.mean()) / np.sqrt(x.var() + 1e-5)
    np.testing.assert_allclose(out, want, rtol=1e-14)


def test_layer_norm_grad_random_2x4():
    rng = np.random.default_rng(3)
    x, g, b = leaf(rng.normal(size=(2, 4))), leaf(rng.normal(size=4)), leaf(rng.normal(size=4))
    w = DiffValue(rng.normal(size=(2, 4)))
    err = tc.finite_diff_check(lambda: tc.sum(tc.mul(tc.layer_norm(x, g, b), w)), [x, g, b])
    assert err < 1e-5


def test_layer_norm_rejects_bad_eps():
    with pytest.raises(ContractError):
        tc.layer_norm(DiffValue(np.ones((1, 2))), DiffValue(np.ones(2)), DiffValue(np.zeros(2)), eps=0)


# -- sigmoid ------------------------------------------------------------------


def test_sigmoid_values():
    assert tc.sigmoid(DiffValue([0.0])).data[0] == 0.5
    with np.errstate(all="raise"):
        v = tc.sigmoid(DiffValue([-100.0])).data[0]
    assert 0 < v < 1e-40


def test_sigmoid_grad_at_zero():
    x = leaf([0.0])
    (g,) = grad_of(lambda: tc.sum(tc.sigmoid(x)), x)
    assert g[0] == 0.25
    assert tc.finite_diff_check(lambda: tc.sum(tc.sigmoid(x)), [x]) < 1e-7


@given(st.floats(allow_nan=False, allow_infinity=False))
def test_sigmoid_strictly_inside_unit_interval(v):
    s = tc.sigmoid(DiffValue([v])).data[0]
    assert 0.0 < s < 1.0


# -- backward semantics -------------------------------------------------------


def test_backward_identity_seed():
    x = leaf(3.0)
    (g,) = grad_of(lambda: tc.scale(x, 1.0), x)
    assert g == 1.0


def test_backward_square():
    x = leaf([1.0, 2.0])
    (g,) = grad_of(lambda: tc.sum(tc.mul(x, x)), x)
    np.testing.assert_array_equal(g, [2, 4])


def test_backward_rejects_non_scalar():
    x = leaf([1.0, 2.0])
    with Tape() as tape:
        y = tc.mul(x, x)
    with pytest.raises(ContractError):
        tc.backward(tape, y)


def test_backward_twice_doubles():
    rng = np.random.default_rng(1)
    x, w = leaf(rng.normal(size=(2, 3))), leaf(rng.normal(size=(3, 2)))
    with Tape() as tape:
        loss = tc.sum(tc.gelu(tc.matmul(x, w)))
    tc.backward(tape, loss)
    once = (x.grad.copy(), w.grad.copy())
    tc.backward(tape, loss)
    np.testing.assert_array_equal(x.grad, 2 * once[0])
    np.testing.assert_array_equal(w.grad, 2 * once[1])


def test_zero_grads_and_initial_state():
    x = leaf([1.0, 2.0])
    assert not x.grad.any() and x.grad.shape == x.shape
    grad_of(lambda: tc.sum(x), x)
    assert x.grad.any()
    tc.zero_grads([x])
    assert not x.grad.any()


def test_value_outside_tape_not_recorded():
    x = leaf([1.0])
    y = tc.mul(x, x)  # no tape active
    assert not y.requires_grad
    with Tape() as tape:
        z = tc.mul(x, 2.0)
    assert len(tape) == 1 and z.node_id == 0


def test_constants_are_not_recorded():
    c = DiffValue([1.0, 2.0])
    with Tape() as tape:
        tc.sum(tc.mul(c, c))
    assert len(tape) == 0


def test_tape_topological_order():
    x = leaf([1.0, 2.0])
    with Tape() as tape:
        a = tc.mul(x, x)
        b = tc.gelu(a)
        tc.sum(tc.add(a, b))
    seen = set()
    for node in tape.nodes:
        for inp in node.inputs:
            if inp.node_id is not None:
                assert inp.node_id in seen
        seen.add(node.output.node_id)


def test_more_than_three_axes_rejected():
    with pytest.raises(DimensionError):
        DiffValue(np.zeros((1, 1, 1, 1)))


# -- broadcasting ------------------------------------------------------------


def test_row_vector_and_scalar_broadcast():
    rng = np.random.default_rng(2)
    x, r, s = leaf(rng.normal(size=(3, 4))), leaf(rng.normal(size=4)), leaf(1.5)
    assert tc.finite_diff_check(lambda: tc.sum(tc.mul(tc.add(x, r), s)), [x, r, s]) < 1e-8


def test_batched_row_broadcast():
    rng = np.random.default_rng(4)
    x, r = leaf(rng.normal(size=(2, 3, 4))), leaf(rng.normal(size=(2, 1, 4)))
    assert tc.finite_diff_check(lambda: tc.sum(tc.gelu(tc.mul(x, r))), [x, r]) < 1e-7


def test_other_broadcasts_rejected():
    with pytest.raises(DimensionError):
        tc.add(DiffValue(np.ones((3, 4))), DiffValue(np.ones((3, 1))))
    with pytest.raises(DimensionError):
        tc.mul(DiffValue(np.ones((3, 4))), DiffValue(np.ones(3)))


# -- finite-difference checker -------------------------------------------------


def test_fd_check_sum_of_params():
    rng = np.random.default_rng(5)
    ps = [leaf(rng.normal(size=(2, 3))), leaf(rng.normal(size=4))]
    assert tc.finite_diff_check(lambda: tc.add(tc.sum(ps[0]), tc.sum(ps[1])), ps) < 1e-9


def test_fd_check_reports_nonfinite_objective():
    x = leaf([0.0, 1.0])

    def f():
        if x.data[1] > 1.0:
            return tc.scale(tc.sum(x), float("nan"))
        return tc.sum(x)

    with pytest.raises(tc.FiniteDifferenceError) as info:
        tc.finite_diff_check(f, [x])
    assert info.value.param_index == 0 and info.value.entry == 1


def test_fd_check_detects_wrong_gradient():
    x = leaf([0.3, -0.2])

    def broken(a):
        def bwd(g, needs):
            return (g * 3.0,)  # true derivative is 2

        return tc._record(a.data * 2.0, (a,), bwd)

    assert tc.finite_diff_check(lambda: tc.sum(broken(x)), [x]) > 0.1


# -- every primitive on 100 random inputs -------------------------------------

PRIMITIVES = {
    "add": lambda a, b: tc.add(a, b),
    "sub": lambda a, b: tc.sub(a, b),
    "mul": lambda a, b: tc.mul(a, b),
    "matmul": lambda a, b: tc.matmul(a, tc.transpose(b)),
    "linear": lambda a, b: tc.linear(a, tc.transpose(b), tc.reshape(tc.take(b, 0, 1, axis=1), (2,))),
    "relu": lambda a, b: tc.relu(a),
    "sigmoid": lambda a, b: tc.sigmoid(a),
    "gelu": lambda a, b: tc.gelu(a),
    "softmax": lambda a, b: tc.softmax(a),
    "layer_norm": lambda a, b: tc.layer_norm(a, tc.reshape(tc.take(b, 0, 1, axis=0), (3,)),
                                             tc.reshape(tc.take(b, 1, 2, axis=0), (3,))),
    "concat": lambda a, b: tc.concat([a, b], axis=0),
    "reshape": lambda a, b: tc.reshape(a, (3, 2)),
    "gather": lambda a, b: tc.gather(a, np.array([1, 0, 1])),
    "mean": lambda a, b: tc.mean(tc.mul(a, b), axis=1),
}


@pytest.mark.parametrize("name", sorted(PRIMITIVES))
def test_primitive_gradients_on_random_inputs(name):
    op = PRIMITIVES[name]
    rng = np.random.default_rng(zlib.crc32(name.encode()))
    worst = 0.0
    for _ in range(100):
        a, b = leaf(rng.normal(size=(2, 3))), leaf(rng.normal(size=(2, 3)))
        if name == "relu":  # keep away from the kink
            a.data = np.where(np.abs(a.data) < 1e-3, 0.5, a.data)
        w = DiffValue(rng.normal(size=op(a, b).shape))

        def f():
            return tc.sum(tc.mul(op(a, b), w))

        worst = max(worst, tc.finite_diff_check(f, [a, b]))
    assert worst < 1e-5


def test_fused_losses_gradients():
    rng = np.random.default_rng(8)
    z = leaf(rng.normal(size=(5, 4)))
    labels = rng.integers(0, 4, size=5)
    targets = rng.integers(0, 2, size=(5, 4))
    assert tc.finite_diff_check(lambda: tc.softmax_cross_entropy(z, labels), [z]) < 1e-6
    assert tc.finite_diff_check(lambda: tc.bce_with_logits(z, targets), [z]) < 1e-6


def test_attention_shape_ops_roundtrip():
    rng = np.random.default_rng(9)
    x = leaf(rng.normal(size=(2, 5, 8)))
    back = tc.merge_heads(tc.split_heads(x, 4), 4)
    np.testing.assert_array_equal(back.data, x.data)
    w = DiffValue(rng.normal(size=(8, 5, 2)).reshape(8, 5, 2))
    assert tc.finite_diff_check(lambda: tc.sum(tc.mul(tc.split_heads(x, 4), w)), [x]) < 1e-6


def test_gather_out_of_range():
    with pytest.raises(ContractError, match="out of range"):
        tc.gather(DiffValue(np.ones((3, 2))), [0, 3])


def test_gather_repeated_rows_accumulate():
    t = leaf(np.arange(6.0).reshape(3, 2))
    (g,) = grad_of(lambda: tc.sum(tc.gather(t, [1, 1, 2])), t)
    np.testing.assert_array_equal(g, [[0, 0], [2, 2], [1, 1]])


@settings(max_examples=50, deadline=None)
@given(st.integers(min_value=0, max_value=2**31 - 1))
def test_primitives_are_deterministic(seed):
    rng = np.random.default_rng(seed)
    a = rng.normal(size=(2, 3, 4))
    g, b = rng.normal(size=4), rng.normal(size=4)

    def run():
        x = DiffValue(a, requires_grad=True)
        with Tape() as tape:
            y = tc.sum(tc.gelu(tc.layer_norm(tc.softmax(x), DiffValue(g), DiffValue(b))))
        tc.backward(tape, y)
        return y.data.copy(), x.grad.copy()

    y1, g1 = run()
    y2, g2 = run()
    assert y1.tobytes() == y2.tobytes() and g1.tobytes() == g2.tobytes()
