"""Gradient and semantics tests for the autodiff engine.

Every op is checked against central finite differences recomputed in
float64 (see neural_fusion.gradcheck).  cumprod_exclusive additionally
gets a brute-force O(K^2) Jacobian oracle because its backward pass has
special handling for zero entries that finite differences alone would
exercise only by luck.
"""
import numpy as np
import pytest
from hypothesis import given, strategies as st

from neural_fusion import autodiff as ad
from neural_fusion.autodiff import Tensor
from neural_fusion.gradcheck import check_gradients

RNG_TRIALS = list(range(5))


def _rand(rng, *shape, lo=-2.0, hi=2.0):
    return rng.uniform(lo, hi, size=shape)


def _away_from(x, points, margin=0.08):
    """Nudge entries of x away from the listed non-smooth points."""
    x = np.array(x)
    for p in points:
        close = np.abs(x - p) < margin
        x[close] = p + margin * np.where(x[close] >= p, 1.0, -1.0) * 2.0
    return x


def _project(t: Tensor, w: np.ndarray) -> Tensor:
    """Random fixed projection to a scalar so cotangents are non-trivial."""
    return ad.tensor_sum(t * w)


# One entry per op: (name, builder factory, parameter arrays factory).
def _case_add(rng):
    a, b = _rand(rng, 3, 4), _rand(rng, 3, 4)
    w = _rand(rng, 3, 4)
    return lambda p: _project(p[0] + p[1], w), [a, b]


def _case_add_broadcast(rng):
    a, b = _rand(rng, 3, 4), _rand(rng, 4)
    w = _rand(rng, 3, 4)
    return lambda p: _project(p[0] + p[1], w), [a, b]


def _case_sub(rng):
    a, b = _rand(rng, 2, 5), _rand(rng, 1, 5)
    w = _rand(rng, 2, 5)
    return lambda p: _project(p[0] - p[1], w), [a, b]


def _case_mul(rng):
    a, b = _rand(rng, 4, 3), _rand(rng, 4, 1)
    w = _rand(rng, 4, 3)
    return lambda p: _project(p[0] * p[1], w), [a, b]


def _case_div(rng):
    a = _rand(rng, 3, 3)
    b = rng.uniform(0.5, 2.0, (3, 3)) * np.where(rng.random((3, 3)) < 0.5, -1, 1)
    w = _rand(rng, 3, 3)
    return lambda p: _project(p[0] / p[1], w), [a, b]


def _case_neg(rng):
    a = _rand(rng, 6)
    w = _rand(rng, 6)
    return lambda p: _project(-p[0], w), [a]


def _case_matmul(rng):
    a, b = _rand(rng, 4, 3), _rand(rng, 3, 5)
    w = _rand(rng, 4, 5)
    return lambda p: _project(ad.matmul(p[0], p[1]), w), [a, b]


def _case_matmul_batched(rng):
    a, b = _rand(rng, 2, 4, 3), _rand(rng, 3, 5)
    w = _rand(rng, 2, 4, 5)
    return lambda p: _project(ad.matmul(p[0], p[1]), w), [a, b]


def _case_sum_axis(rng):
    a = _rand(rng, 3, 4, 2)
    w = _rand(rng, 3, 2)
    return lambda p: _project(ad.tensor_sum(p[0], axis=1), w), [a]


def _case_sum_keepdims(rng):
    a = _rand(rng, 3, 4)
    w = _rand(rng, 3, 1)
    return lambda p: _project(ad.tensor_sum(p[0], axis=1, keepdims=True), w), [a]


def _case_mean(rng):
    a = _rand(rng, 4, 5)
    w = _rand(rng, 5)
    return lambda p: _project(ad.tensor_mean(p[0], axis=0), w), [a]


def _case_relu(rng):
    a = _away_from(_rand(rng, 4, 4), [0.0])
    w = _rand(rng, 4, 4)
    return lambda p: _project(ad.relu(p[0]), w), [a]


def _case_softplus(rng):
    a = _rand(rng, 3, 5, lo=-4, hi=4)
    w = _rand(rng, 3, 5)
    return lambda p: _project(ad.softplus(p[0]), w), [a]


def _case_sigmoid(rng):
    a = _rand(rng, 3, 5, lo=-4, hi=4)
    w = _rand(rng, 3, 5)
    return lambda p: _project(ad.sigmoid(p[0]), w), [a]


def _case_sin(rng):
    a = _rand(rng, 7, lo=-3, hi=3)
    w = _rand(rng, 7)
    return lambda p: _project(ad.sin(p[0]), w), [a]


def _case_cos(rng):
    a = _rand(rng, 7, lo=-3, hi=3)
    w = _rand(rng, 7)
    return lambda p: _project(ad.cos(p[0]), w), [a]


def _case_exp(rng):
    a = _rand(rng, 4, 3, lo=-2, hi=1.5)
    w = _rand(rng, 4, 3)
    return lambda p: _project(ad.exp(p[0]), w), [a]


def _case_log(rng):
    a = rng.uniform(0.2, 4.0, (3, 4))
    w = _rand(rng, 3, 4)
    return lambda p: _project(ad.log(p[0]), w), [a]


def _case_sqrt(rng):
    a = rng.uniform(0.2, 4.0, (5,))
    w = _rand(rng, 5)
    return lambda p: _project(ad.sqrt(p[0]), w), [a]


def _case_square(rng):
    a = _rand(rng, 3, 3)
    w = _rand(rng, 3, 3)
    return lambda p: _project(ad.square(p[0]), w), [a]


def _case_abs(rng):
    a = _away_from(_rand(rng, 4, 4), [0.0])
    w = _rand(rng, 4, 4)
    return lambda p: _project(ad.absolute(p[0]), w), [a]


def _case_clip(rng):
    a = _away_from(_rand(rng, 5, 3), [-1.0, 1.0])
    w = _rand(rng, 5, 3)
    return lambda p: _project(ad.clip(p[0], -1.0, 1.0), w), [a]


def _case_concat(rng):
    a, b = _rand(rng, 2, 3), _rand(rng, 4, 3)
    w = _rand(rng, 6, 3)
    return lambda p: _project(ad.concat([p[0], p[1]], axis=0), w), [a, b]


def _case_linear(rng):
    x, wmat, b = _rand(rng, 5, 4), _rand(rng, 4, 3), _rand(rng, 3)
    w = _rand(rng, 5, 3)
    return lambda p: _project(ad.linear(p[0], p[1], p[2]), w), [x, wmat, b]


def _case_positional_encode(rng):
    a = _rand(rng, 4, 3) * 0.3
    w = _rand(rng, 4, 3 * (1 + 2 * 3))
    return lambda p: _project(ad.positional_encode(p[0], 3), w), [a]


def _case_take_slice(rng):
    a = _rand(rng, 6, 4)
    w = _rand(rng, 3, 2)
    return lambda p: _project(p[0][1:4, ::2], w), [a]


def _case_take_fancy(rng):
    a = _rand(rng, 8, 3)
    idx = np.array([0, 3, 3, 7, 1])
    w = _rand(rng, 5, 3)
    return lambda p: _project(p[0][idx], w), [a]


def _case_reshape(rng):
    a = _rand(rng, 4, 6)
    w = _rand(rng, 2, 3, 4)
    return lambda p: _project(ad.reshape(p[0], (2, 3, 4)), w), [a]


def _case_transpose(rng):
    a = _rand(rng, 3, 4, 2)
    w = _rand(rng, 2, 3, 4)
    return lambda p: _project(ad.transpose(p[0], (2, 0, 1)), w), [a]


def _case_astype(rng):
    a = _rand(rng, 4, 4)
    w = _rand(rng, 4, 4)
    return lambda p: _project(ad.astype(ad.astype(p[0], np.float64), np.float32), w), [a]


def _case_cumprod_exclusive(rng):
    a = rng.uniform(0.1, 1.0, (4, 6))
    w = _rand(rng, 4, 6)
    return lambda p: _project(ad.cumprod_exclusive(p[0], axis=-1), w), [a]


def _case_cumprod_axis0(rng):
    a = rng.uniform(0.1, 1.0, (5, 3))
    w = _rand(rng, 5, 3)
    return lambda p: _project(ad.cumprod_exclusive(p[0], axis=0), w), [a]


def _case_composite_chain(rng):
    # Shape of the renderer's weight computation: exp, cumprod, sums.
    a = rng.uniform(0.05, 2.0, (3, 8))
    d = rng.uniform(0.1, 0.5, (3, 8))
    w = _rand(rng, 3)

    def build(p):
        opacity = 1.0 - ad.exp(-p[0] * d)
        trans = ad.cumprod_exclusive(1.0 - opacity, axis=-1)
        weights = opacity * trans
        return _project(ad.tensor_sum(weights, axis=-1), w)

    return build, [a]


OP_CASES = {
    "add": _case_add,
    "add_broadcast": _case_add_broadcast,
    "sub": _case_sub,
    "mul": _case_mul,
    "div": _case_div,
    "neg": _case_neg,
    "matmul": _case_matmul,
    "matmul_batched": _case_matmul_batched,
    "sum_axis": _case_sum_axis,
    "sum_keepdims": _case_sum_keepdims,
    "mean": _case_mean,
    "relu": _case_relu,
    "softplus": _case_softplus,
    "sigmoid": _case_sigmoid,
    "sin": _case_sin,
    "cos": _case_cos,
    "exp": _case_exp,
    "log": _case_log,
    "sqrt": _case_sqrt,
    "square": _case_square,
    "abs": _case_abs,
    "clip": _case_clip,
    "concat": _case_concat,
    "linear": _case_linear,
    "positional_encode": _case_positional_encode,
    "take_slice": _case_take_slice,
    "take_fancy": _case_take_fancy,
    "reshape": _case_reshape,
    "transpose": _case_transpose,
    "astype": _case_astype,
    "cumprod_exclusive": _case_cumprod_exclusive,
    "cumprod_axis0": _case_cumprod_axis0,
    "composite_chain": _case_composite_chain,
}


@pytest.mark.parametrize("trial", RNG_TRIALS)
@pytest.mark.parametrize("op", sorted(OP_CASES))
def test_op_gradients_match_finite_differences(op, trial):
    rng = np.random.default_rng(hash((op, trial)) % (2**32))
    builder, arrays = OP_CASES[op](rng)
    report = check_gradients(builder, arrays, dtype=np.float32, rtol=1e-3)
    assert report.passed, f"{op}: max rel err {report.max_rel_error:.3e}"


def _brute_force_cumprod_grad(x: np.ndarray, g: np.ndarray) -> np.ndarray:
    """O(K^2) Jacobian-transpose product for the exclusive cumprod."""
    k = x.shape[-1]
    grad = np.zeros_like(x)
    for j in range(k):
        for i in range(j + 1, k):
            partial = 1.0
            for m in range(i):
                if m != j:
                    partial *= x[..., m]
            grad[..., j] += g[..., i] * partial
    return grad


@given(
    st.integers(min_value=1, max_value=7),
    st.integers(min_value=0, max_value=3),
    st.integers(min_value=0, max_value=2**31 - 1),
)
def test_cumprod_exclusive_backward_matches_brute_force(k, n_zeros, seed):
    rng = np.random.default_rng(seed)
    x = rng.uniform(-1.5, 1.5, (3, k))
    for _ in range(n_zeros):
        x[rng.integers(0, 3), rng.integers(0, k)] = 0.0
    g = rng.normal(size=(3, k))
    t = Tensor(x, requires_grad=True)
    out = ad.cumprod_exclusive(t, axis=-1)
    ad.tensor_sum(out * g).backward()
    expected = _brute_force_cumprod_grad(x, g)
    np.testing.assert_allclose(t.grad, expected, rtol=1e-9, atol=1e-9)


def test_cumprod_exclusive_forward_values():
    x = np.array([[2.0, 3.0, 4.0]])
    out = ad.cumprod_exclusive(Tensor(x), axis=-1)
    np.testing.assert_array_equal(out.values, [[1.0, 2.0, 6.0]])


def test_diamond_graph_accumulates_once():
    x = Tensor(np.array([3.0]), requires_grad=True)
    y = x + x
    z = ad.tensor_sum(y * y)
    z.backward()
    # z = 4 x^2, dz/dx = 8 x, exact in float64.
    np.testing.assert_array_equal(x.grad, np.array([24.0]))


def test_backward_accumulates_across_calls_until_zero_grad():
    x = Tensor(np.array([2.0]), requires_grad=True)
    ad.tensor_sum(ad.square(x)).backward()
    first = x.grad.copy()
    ad.tensor_sum(ad.square(x)).backward()
    np.testing.assert_array_equal(x.grad, 2 * first)
    x.zero_grad()
    assert x.grad is None


def test_backward_requires_scalar():
    x = Tensor(np.ones(3), requires_grad=True)
    with pytest.raises(ValueError):
        (x * 2.0).backward()


def test_constants_are_not_tracked():
    x = Tensor(np.ones(3))
    y = x * 2.0 + 1.0
    assert not y.requires_grad and y.parents == ()


def test_take_repeated_indices_accumulate():
    x = Tensor(np.arange(4.0), requires_grad=True)
    idx = np.array([1, 1, 1])
    ad.tensor_sum(x[idx]).backward()
    np.testing.assert_array_equal(x.grad, [0.0, 3.0, 0.0, 0.0])


def test_gradients_match_parameter_dtype():
    x32 = Tensor(np.ones((2, 2), dtype=np.float32), requires_grad=True)
    loss = ad.tensor_sum(ad.square(x32), dtype=np.float64)
    assert loss.dtype == np.float64
    loss.backward()
    assert x32.grad.dtype == np.float32


def test_log_rejects_non_positive():
    with pytest.raises(ValueError):
        ad.log(Tensor(np.array([1.0, 0.0])))
    with pytest.raises(ValueError):
        ad.sqrt(Tensor(np.array([-1.0])))


@given(st.floats(min_value=30.0, max_value=500.0))
def test_softplus_sigmoid_stable_at_extremes(x):
    arr = np.array([x, -x], dtype=np.float32)
    sp = ad.softplus(Tensor(arr)).values
    sg = ad.sigmoid(Tensor(arr)).values
    assert np.all(np.isfinite(sp)) and np.all(np.isfinite(sg))
    assert sp[0] == pytest.approx(x, rel=1e-5)
    assert sp[1] >= 0.0
    assert 0.0 <= sg[1] <= sg[0] <= 1.0


def test_adam_first_step_is_signed_learning_rate():
    p = Tensor(np.array([1.0, -2.0], dtype=np.float32), requires_grad=True)
    opt = ad.Adam([p], lr=0.1)
    p.grad = np.array([0.5, -3.0], dtype=np.float32)
    opt.step()
    # After bias correction the first update is lr * g / (|g| + eps).
    np.testing.assert_allclose(p.values, [1.0 - 0.1, -2.0 + 0.1], rtol=1e-5)


def test_adam_matches_reference_implementation():
    rng = np.random.default_rng(0)
    v0 = rng.normal(size=(3, 2)).astype(np.float32)
    p = Tensor(v0.copy(), requires_grad=True)
    opt = ad.Adam([p], lr=0.01, beta1=0.9, beta2=0.999, eps=1e-8)
    ref = v0.astype(np.float64).copy()
    m = np.zeros_like(ref)
    v = np.zeros_like(ref)
    for t in range(1, 6):
        g = rng.normal(size=(3, 2)).astype(np.float32)
        p.grad = g.copy()
        opt.step()
        m = 0.9 * m + 0.1 * g
        v = 0.999 * v + 0.001 * g.astype(np.float64) ** 2
        mh = m / (1 - 0.9**t)
        vh = v / (1 - 0.999**t)
        ref -= 0.01 * mh / (np.sqrt(vh) + 1e-8)
        np.testing.assert_allclose(p.values, ref, rtol=2e-4, atol=1e-6)


def test_adam_skips_parameters_without_grad():
    p = Tensor(np.ones(2, dtype=np.float32), requires_grad=True)
    q = Tensor(np.ones(2, dtype=np.float32), requires_grad=True)
    opt = ad.Adam([p, q], lr=0.5)
    p.grad = np.ones(2, dtype=np.float32)
    opt.step()
    assert not np.array_equal(p.values, np.ones(2))
    np.testing.assert_array_equal(q.values, np.ones(2))
