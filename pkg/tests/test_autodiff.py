import math

import numpy as np
import numpy.testing as npt
import pytest
from hypothesis import given, settings, strategies as st

from avrnn import autodiff as ad
from avrnn.autodiff import Tensor


def leaf(values):
    return Tensor(np.asarray(values, dtype=np.float64), requires_grad=True)


def numeric_grad(f, x, eps=1e-6):
    """Independent central-difference oracle on a plain numpy function."""
    x = np.array(x, dtype=np.float64)
    g = np.zeros_like(x)
    for i in np.ndindex(x.shape):
        xp, xm = x.copy(), x.copy()
        xp[i] += eps
        xm[i] -= eps
        g[i] = (f(xp) - f(xm)) / (2 * eps)
    return g


# --- forward values -------------------------------------------------------


def test_unary_examples():
    npt.assert_array_equal(ad.unary_op("tanh", [0.0]).data, [0.0])
    npt.assert_array_equal(ad.unary_op("sigmoid", [0.0]).data, [0.5])
    npt.assert_allclose(ad.unary_op("exp", [0.0, 1.0]).data, [1.0, math.e], rtol=1e-15)


def test_unary_values_against_numpy():
    x = np.linspace(-3, 3, 13)
    npt.assert_allclose(ad.unary_op("sigmoid", x).data, 1 / (1 + np.exp(-x)), rtol=1e-14)
    npt.assert_allclose(ad.unary_op("softplus", x).data, np.log1p(np.exp(x)), rtol=1e-14)
    npt.assert_allclose(ad.unary_op("square", x).data, x * x)
    npt.assert_allclose(ad.unary_op("neg", x).data, -x)
    npt.assert_allclose(ad.unary_op("log", np.exp(x)).data, x, atol=1e-14)


def test_sigmoid_and_softplus_stable_at_extremes():
    x = np.array([-800.0, -40.0, 40.0, 800.0])
    s = ad.unary_op("sigmoid", x).data
    sp = ad.unary_op("softplus", x).data
    assert np.all(np.isfinite(s)) and np.all(np.isfinite(sp))
    npt.assert_allclose(s, [0.0, 0.0, 1.0, 1.0], atol=1e-17)
    npt.assert_allclose(sp[2:], x[2:])


def test_log_of_nonpositive_raises():
    with pytest.raises(ad.DomainError):
        ad.unary_op("log", [1.0, 0.0])
    with pytest.raises(ad.DomainError):
        ad.unary_op("log", [-2.0])


def test_unknown_unary_kind():
    with pytest.raises(ValueError):
        ad.unary_op("cosh", [1.0])


def test_binary_examples():
    npt.assert_array_equal(ad.binary_op("add", [1.0, 2.0], [3.0, 4.0]).data, [4.0, 6.0])
    npt.assert_array_equal(ad.binary_op("mul", [2.0], [0.0]).data, [0.0])
    npt.assert_array_equal(ad.binary_op("div", [1.0], [4.0]).data, [0.25])
    npt.assert_array_equal(ad.binary_op("sub", [1.0], [4.0]).data, [-3.0])


def test_division_by_zero_raises():
    with pytest.raises(ad.DomainError):
        ad.binary_op("div", [1.0, 2.0], [1.0, 0.0])


def test_broadcast_trailing_suffix_only():
    a = np.ones((3, 2))
    npt.assert_array_equal(ad.binary_op("add", a, [1.0, 2.0]).data, [[2, 3]] * 3)
    npt.assert_array_equal(ad.binary_op("mul", a, 2.0).data, 2 * a)
    with pytest.raises(ad.ShapeError):
        ad.binary_op("add", a, np.ones(3))
    with pytest.raises(ad.ShapeError):
        ad.binary_op("add", np.ones((3, 1)), np.ones((1, 3)))


def test_matmul_examples():
    npt.assert_array_equal(ad.matmul(np.eye(2), [[1.0], [2.0]]).data, [[1.0], [2.0]])
    npt.assert_array_equal(ad.matmul([[1.0, 2.0]], [[3.0], [4.0]]).data, [[11.0]])
    x = np.random.default_rng(0).standard_normal((3, 4))
    npt.assert_array_equal(ad.matmul(np.zeros((2, 3)), x).data, np.zeros((2, 4)))
    with pytest.raises(ad.ShapeError):
        ad.matmul(np.ones((2, 3)), np.ones((2, 3)))


def test_reduce_examples():
    assert ad.reduce("sum", [1.0, 2.0, 3.0]).item() == 6.0
    assert ad.reduce("mean", [2.0, 4.0]).item() == 3.0
    assert ad.reduce("sum", np.zeros(5)).item() == 0.0
    npt.assert_array_equal(ad.reduce("sum", np.ones((2, 3)), axis=0).data, [2, 2, 2])
    with pytest.raises((ad.ShapeError, IndexError, ValueError)):
        ad.reduce("sum", np.ones((2, 3)), axis=2)


def test_concat_slice_examples():
    npt.assert_array_equal(ad.concat_slice("concat", [[1.0], [2.0]]).data, [1.0, 2.0])
    npt.assert_array_equal(ad.concat_slice("slice", [1.0, 2.0, 3.0], 1, 3).data, [2.0, 3.0])
    x = np.array([1.0, 2.0])
    npt.assert_array_equal(ad.concat([x, np.zeros(0)]).data, x)
    with pytest.raises(IndexError):
        ad.slice_([1.0, 2.0], 1, 3)
    with pytest.raises(ad.ShapeError):
        ad.concat([np.ones((2, 2)), np.ones((3, 3))], axis=1)


# --- backward examples ----------------------------------------------------


def test_power_rule():
    x = leaf([3.0])
    with ad.Tape():
        g = ad.backward(ad.unary_op("square", x).sum())
    npt.assert_array_equal(g[x], [6.0])


def test_tanh_slope_at_origin():
    x = leaf([0.0])
    with ad.Tape():
        g = ad.backward(ad.unary_op("tanh", x).sum())
    npt.assert_array_equal(g[x], [1.0])


def test_sigmoid_layer_against_finite_differences():
    rng = np.random.default_rng(3)
    W0 = rng.standard_normal((4, 3))
    x0 = rng.standard_normal((3, 1))
    W, x = leaf(W0), leaf(x0)
    with ad.Tape():
        g = ad.backward(ad.unary_op("sigmoid", ad.matmul(W, x)).sum())

    def f_W(w):
        return np.sum(1 / (1 + np.exp(-(w @ x0))))

    def f_x(v):
        return np.sum(1 / (1 + np.exp(-(W0 @ v))))

    for got, want in ((g[W], numeric_grad(f_W, W0)), (g[x], numeric_grad(f_x, x0))):
        assert np.max(np.abs(got - want) / (1 + np.abs(want))) < 1e-6


def test_backward_rejects_non_scalar():
    x = leaf([1.0, 2.0])
    with ad.Tape():
        y = x * 2.0
        with pytest.raises(ad.ShapeError):
            ad.backward(y)


def test_backward_clears_tape_and_accumulates_into_grad():
    x = leaf([1.0, 2.0])
    with ad.Tape() as tape:
        ad.backward((x * x).sum())
        assert len(tape) == 0
        ad.backward((x * 3.0).sum())
    npt.assert_allclose(x.grad, [2.0 + 3.0, 4.0 + 3.0])


def test_no_grad_records_nothing():
    x = leaf([1.0])
    with ad.Tape() as tape, ad.no_grad():
        y = ad.unary_op("exp", x)
        assert len(tape) == 0
    assert not y.requires_grad


def test_detach_blocks_gradient():
    x = leaf([2.0])
    with ad.Tape():
        g = ad.backward((x * ad.detach(x)).sum())
    npt.assert_array_equal(g[x], [2.0])


def test_inputs_not_reached_get_zero_gradients():
    x, y = leaf([1.0]), leaf([5.0, 6.0])
    with ad.Tape():
        g = ad.backward((x * 2.0).sum(), inputs=[x, y])
    npt.assert_array_equal(g[y], [0.0, 0.0])


def test_diamond_graph_accumulates():
    # a used along two paths: f = sum(tanh(a) * exp(a))
    a0 = np.array([0.3, -0.7, 1.1])
    a = leaf(a0)
    with ad.Tape():
        g = ad.backward((ad.unary_op("tanh", a) * ad.unary_op("exp", a)).sum())
    want = numeric_grad(lambda v: np.sum(np.tanh(v) * np.exp(v)), a0)
    npt.assert_allclose(g[a], want, rtol=1e-8)


def test_backward_is_deterministic():
    rng = np.random.default_rng(1)
    W0, b0, x0 = rng.standard_normal((5, 4)), rng.standard_normal(5), rng.standard_normal((7, 4))

    def run():
        W, b = leaf(W0), leaf(b0)
        with ad.Tape():
            y = ad.unary_op("tanh", ad.linear(x0, W, b))
            g = ad.backward((y * y).mean())
        return g[W], g[b]

    a, b = run(), run()
    assert all(np.array_equal(p, q) for p, q in zip(a, b))


def test_tape_visits_each_node_once():
    counts = {}
    original = dict(ad.BACKWARD_RULES)

    def counting(name):
        def rule(node, g):
            counts[id(node)] = counts.get(id(node), 0) + 1
            return original[name](node, g)

        return rule

    try:
        for name in original:
            ad.BACKWARD_RULES[name] = counting(name)
        x = leaf([0.5, 1.5])
        with ad.Tape() as tape:
            y = ad.unary_op("exp", x) * x + ad.unary_op("sigmoid", x)
            loss = y.sum()
            n_nodes = len(tape)
            ad.backward(loss)
    finally:
        ad.BACKWARD_RULES.update(original)
    assert len(counts) == n_nodes
    assert set(counts.values()) == {1}


# --- grad_check -----------------------------------------------------------


def test_grad_check_examples():
    rng = np.random.default_rng(0)
    assert ad.grad_check(lambda t: t.sum(), leaf(rng.standard_normal(6))) < 1e-10
    assert ad.grad_check(lambda t: (t * t).sum(), leaf([1.0, 2.0])) < 1e-7


def test_grad_check_eps_range():
    with pytest.raises(ValueError):
        ad.grad_check(lambda t: t.sum(), leaf([1.0]), eps=1e-2)
    with pytest.raises(ValueError):
        ad.grad_check(lambda t: t.sum(), leaf([1.0]), eps=1e-9)


def test_grad_check_nonfinite_raises():
    with pytest.raises(ad.DomainError):
        ad.grad_check(lambda t: ad.unary_op("log", t).sum(), leaf([0.0]), eps=1e-6)


def test_grad_check_catches_broken_rule():
    saved = ad.BACKWARD_RULES["tanh"]
    ad.BACKWARD_RULES["tanh"] = lambda node, g: (2.0 * g,)
    try:
        err = ad.grad_check(lambda t: ad.unary_op("tanh", t).sum(), leaf([0.4, -0.2]))
    finally:
        ad.BACKWARD_RULES["tanh"] = saved
    assert err > 0.1


# --- every op, several seeds ---------------------------------------------


def _op_cases(rng):
    A = rng.standard_normal((3, 4))
    B = rng.standard_normal((4, 2))
    v = rng.standard_normal(4)
    pos = rng.uniform(0.5, 2.0, (3, 4))
    return {
        "tanh": (lambda t: ad.unary_op("tanh", t).sum(), A),
        "sigmoid": (lambda t: ad.unary_op("sigmoid", t).sum(), A),
        "exp": (lambda t: ad.unary_op("exp", t).sum(), A),
        "log": (lambda t: ad.unary_op("log", t).sum(), pos),
        "softplus": (lambda t: ad.unary_op("softplus", t).sum(), A),
        "neg": (lambda t: (ad.unary_op("neg", t) * A).sum(), A),
        "square": (lambda t: ad.unary_op("square", t).sum(), A),
        "clamp": (lambda t: (ad.clamp(t, -0.5, 0.5) * A).sum(), A * 0.3 + 0.01),
        "add_bcast": (lambda t: ad.unary_op("square", A + t).sum(), v),
        "sub_bcast": (lambda t: ad.unary_op("square", A - t).sum(), v),
        "mul_bcast": (lambda t: ad.unary_op("tanh", A * t).sum(), v),
        "div_bcast": (lambda t: (A / t).sum(), v + 3.0),
        "rdiv": (lambda t: (t / pos).sum() + (1.0 / t).sum(), pos),
        "matmul_left": (lambda t: ad.unary_op("tanh", ad.matmul(t, B)).sum(), A),
        "matmul_right": (lambda t: ad.unary_op("tanh", ad.matmul(A, t)).sum(), B),
        "linear_x": (lambda t: ad.unary_op("tanh", ad.linear(t, B.T, B[0])).sum(), A),
        "linear_W": (lambda t: ad.unary_op("tanh", ad.linear(A, t, None)).sum(), B.T.copy()),
        "linear_1d": (lambda t: ad.unary_op("tanh", ad.linear(t, B.T, None)).sum(), v),
        "transpose": (lambda t: (ad.transpose(t) * A.T).sum(), A),
        "sum_axis": (lambda t: ad.unary_op("square", ad.reduce("sum", t, axis=0)).sum(), A),
        "mean_axis": (lambda t: ad.unary_op("square", ad.reduce("mean", t, axis=1)).sum(), A),
        "mean_all": (lambda t: ad.unary_op("square", t).mean(), A),
        "concat": (lambda t: ad.unary_op("tanh", ad.concat([t, A], axis=0)).sum(), A * 2),
        "slice": (lambda t: ad.unary_op("square", ad.slice_(t, 1, 3, axis=1)).sum(), A),
        "split": (lambda t: sum((p * (i + 1.0)).sum() for i, p in
                                enumerate(ad.split(ad.unary_op("tanh", t), (1, 3), axis=1))), A),
        "split_partial": (lambda t: ad.unary_op("square", ad.split(t, (2, 2))[1]).sum(), A),
        "reshape": (lambda t: (ad.reshape(t, (2, 6)) * A.reshape(2, 6)).sum(), A),
    }


@pytest.mark.parametrize("seed", range(5))
def test_every_op_passes_grad_check(seed):
    cases = _op_cases(np.random.default_rng(seed))
    for name, (f, x) in cases.items():
        err = ad.grad_check(f, leaf(x.copy()))
        assert err < 1e-5, f"{name}: {err}"


def test_every_registered_rule_is_exercised():
    names = set()
    original = dict(ad.BACKWARD_RULES)

    def spy(name):
        def rule(node, g):
            names.add(name)
            return original[name](node, g)

        return rule

    try:
        for name in original:
            ad.BACKWARD_RULES[name] = spy(name)
        for f, x in _op_cases(np.random.default_rng(0)).values():
            t = leaf(x.copy())
            with ad.Tape():
                ad.backward(f(t))
    finally:
        ad.BACKWARD_RULES.update(original)
    assert names == set(original)


@settings(max_examples=40, deadline=None)
@given(st.lists(st.floats(-5, 5), min_size=1, max_size=6), st.sampled_from(["tanh", "sigmoid", "softplus", "exp"]))
def test_unary_gradients_property(vals, kind):
    x = np.array(vals)
    assert ad.grad_check(lambda t: ad.unary_op(kind, t).sum(), leaf(x)) < 1e-5


@settings(max_examples=30, deadline=None)
@given(st.integers(1, 4), st.integers(1, 4), st.integers(0, 2 ** 31 - 1))
def test_broadcast_gradient_sums_over_leading_axes(m, d, seed):
    rng = np.random.default_rng(seed)
    A = rng.standard_normal((m, d))
    b = leaf(rng.standard_normal(d))
    with ad.Tape():
        g = ad.backward((A * b).sum(), inputs=[b])
    npt.assert_allclose(g[b], A.sum(axis=0), rtol=1e-12, atol=1e-12)


def test_tapes_are_thread_local():
    import threading

    results = {}

    def work(k):
        x = leaf([float(k)])
        with ad.Tape():
            results[k] = ad.backward((x * x).sum())[x][0]

    threads = [threading.Thread(target=work, args=(k,)) for k in range(1, 5)]
    for t in threads:
        t.start()
    for t in threads:
        t.join()
    assert results == {k: 2.0 * k for k in range(1, 5)}
