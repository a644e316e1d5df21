import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from motionmae import numerics as nm
from motionmae.numerics import (
    NonFiniteError,
    OptimState,
    Tape,
    Tensor,
    adamw_step,
    backward,
    finite_diff_check,
)


def _rng(seed=0):
    return np.random.default_rng(seed)


# ---- matmul ----


def test_matmul_identity():
    a = Tensor(_rng(1).normal(size=(3, 3)))
    eye = Tensor(np.eye(3))
    np.testing.assert_array_equal(nm.matmul(a, eye).data, a.data)


def test_matmul_zeros():
    a = Tensor(_rng(2).normal(size=(2, 4)))
    z = Tensor(np.zeros((4, 3)))
    np.testing.assert_array_equal(nm.matmul(a, z).data, np.zeros((2, 3)))


def test_matmul_hand_example():
    a = Tensor([[1.0, 2.0], [3.0, 4.0]])
    b = Tensor([[5.0, 6.0], [7.0, 8.0]])
    np.testing.assert_array_equal(
        nm.matmul(a, b).data, [[19.0, 22.0], [43.0, 50.0]]
    )


def test_matmul_triple_loop_oracle():
    """Random rectangular product against an explicit three-loop computation."""
    r = _rng(3)
    a = r.normal(size=(4, 5))
    b = r.normal(size=(5, 3))
    want = np.zeros((4, 3))
    for i in range(4):
        for j in range(3):
            for l in range(5):
                want[i, j] += a[i, l] * b[l, j]
    np.testing.assert_allclose(nm.matmul(Tensor(a), Tensor(b)).data, want, rtol=1e-12)


def test_matmul_dim_mismatch():
    with pytest.raises(ValueError):
        nm.matmul(Tensor(np.ones((2, 3))), Tensor(np.ones((4, 2))))


def test_matmul_batched():
    r = _rng(4)
    a = r.normal(size=(6, 3, 4))
    b = r.normal(size=(6, 4, 2))
    out = nm.matmul(Tensor(a), Tensor(b)).data
    for i in range(6):
        np.testing.assert_allclose(out[i], a[i] @ b[i], rtol=1e-12)


# ---- softmax ----


def test_softmax_symmetry():
    out = nm.softmax(Tensor([0.0, 0.0])).data
    np.testing.assert_allclose(out, [0.5, 0.5])


def test_softmax_analytic():
    out = nm.softmax(Tensor([0.0, np.log(3.0)])).data
    np.testing.assert_allclose(out, [0.25, 0.75], rtol=1e-12)


def test_softmax_shift_invariance():
    r = _rng(5)
    x = r.normal(size=(3, 7))
    a = nm.softmax(Tensor(x), axis=-1).data
    b = nm.softmax(Tensor(x + 123.456), axis=-1).data
    np.testing.assert_allclose(a, b, atol=1e-12)


@given(st.integers(min_value=0, max_value=2 ** 32 - 1))
@settings(max_examples=30, deadline=None)
def test_softmax_rows_sum_to_one(seed):
    """Stability invariant: holds even for magnitude-1e4 inputs."""
    x = np.random.default_rng(seed).uniform(-1e4, 1e4, size=(4, 9))
    out = nm.softmax(Tensor(x), axis=-1).data
    assert (out >= 0).all()
    np.testing.assert_allclose(out.sum(axis=-1), 1.0, atol=1e-6)


def test_softmax_bad_axis():
    with pytest.raises(ValueError):
        nm.softmax(Tensor(np.ones((2, 2))), axis=5)


# ---- layer_norm ----


def test_layer_norm_constant_row_collapses():
    x = Tensor(np.full((2, 8), 3.7))
    g = Tensor(np.ones(8))
    b = Tensor(np.zeros(8))
    np.testing.assert_allclose(nm.layer_norm(x, g, b).data, 0.0, atol=1e-9)


def test_layer_norm_already_normalized():
    x = Tensor([[-1.0, 1.0]])
    g = Tensor(np.ones(2))
    b = Tensor(np.zeros(2))
    np.testing.assert_allclose(nm.layer_norm(x, g, b).data, [[-1.0, 1.0]], atol=1e-5)


def test_layer_norm_beta_shift():
    x = Tensor(np.full((3, 4), 9.0))
    g = Tensor(np.ones(4))
    b = Tensor(np.full(4, 2.5))
    np.testing.assert_allclose(nm.layer_norm(x, g, b).data, 2.5, atol=1e-9)


def test_layer_norm_population_variance():
    # with gamma=1, beta=0 the output row has mean 0 and *biased* variance ~1
    r = _rng(6)
    x = r.normal(size=(5, 16))
    out = nm.layer_norm(Tensor(x), Tensor(np.ones(16)), Tensor(np.zeros(16))).data
    np.testing.assert_allclose(out.mean(axis=-1), 0.0, atol=1e-12)
    np.testing.assert_allclose(out.var(axis=-1), 1.0, atol=1e-4)


def test_layer_norm_shape_mismatch():
    with pytest.raises(ValueError):
        nm.layer_norm(Tensor(np.ones((2, 4))), Tensor(np.ones(3)), Tensor(np.zeros(4)))


# ---- gelu ----


def test_gelu_fixed_points():
    assert nm.gelu(Tensor(0.0)).item() == 0.0
    assert abs(nm.gelu(Tensor(10.0)).item() - 10.0) < 1e-6
    assert abs(nm.gelu(Tensor(-10.0)).item()) < 1e-6


# ---- backward ----


def test_backward_sum_of_squares():
    x = Tensor(_rng(7).normal(size=(4, 3)))
    tape = Tape()
    tape.watch(x)
    loss = nm.sum_all(nm.mul(x, x))
    backward(loss, tape)
    np.testing.assert_allclose(x.grad, 2.0 * x.data, rtol=1e-12)


def test_backward_matmul_finite_difference():
    r = _rng(8)
    a = Tensor(r.normal(size=(3, 4)))
    b = Tensor(r.normal(size=(4, 2)))

    def f(params):
        return nm.sum_all(nm.matmul(params[0], params[1]))

    assert finite_diff_check(f, [a, b]) < 1e-4


def test_backward_independent_sums():
    x = Tensor(_rng(9).normal(size=5))
    y = Tensor(_rng(10).normal(size=7))
    tape = Tape()
    tape.watch(x)
    tape.watch(y)
    loss = nm.add(nm.sum_all(x), nm.sum_all(y))
    backward(loss, tape)
    np.testing.assert_array_equal(x.grad, np.ones(5))
    np.testing.assert_array_equal(y.grad, np.ones(7))


def test_backward_accumulates_shared_node():
    # x feeds two consumers: loss = sum(x) + sum(x*x) -> grad = 1 + 2x
    x = Tensor(_rng(11).normal(size=6))
    tape = Tape()
    tape.watch(x)
    loss = nm.add(nm.sum_all(x), nm.sum_all(nm.mul(x, x)))
    backward(loss, tape)
    np.testing.assert_allclose(x.grad, 1.0 + 2.0 * x.data, rtol=1e-12)


def test_backward_rejects_nonscalar_loss():
    x = Tensor(np.ones(3))
    tape = Tape()
    tape.watch(x)
    y = nm.mul(x, x)
    with pytest.raises(ValueError):
        backward(y, tape)


def test_backward_rejects_detached_loss():
    x = Tensor(np.ones(3))
    tape = Tape()
    tape.watch(x)
    detached = Tensor(np.asarray(1.0))
    with pytest.raises(ValueError):
        backward(detached, tape)


@given(st.integers(min_value=0, max_value=2 ** 32 - 1))
@settings(max_examples=20, deadline=None)
def test_backward_linearity(seed):
    """grad(a*L1 + b*L2) == a*grad(L1) + b*grad(L2) in double precision."""
    r = np.random.default_rng(seed)
    xv = r.normal(size=(3, 3))
    a, b = 1.7, -0.3

    def grad_of(build):
        x = Tensor(xv.copy())
        tape = Tape()
        tape.watch(x)
        backward(build(x), tape)
        return x.grad

    def l1(x):
        return nm.sum_all(nm.mul(x, x))

    def l2(x):
        return nm.sum_all(nm.gelu(x))

    combined = grad_of(lambda x: nm.add(nm.scale(l1(x), a), nm.scale(l2(x), b)))
    separate = a * grad_of(l1) + b * grad_of(l2)
    np.testing.assert_allclose(combined, separate, atol=1e-10)


# ---- per-op gradient checks ----


def _check(f, shapes, seed, eps=1e-5):
    r = np.random.default_rng(seed)
    params = [Tensor(r.normal(size=s)) for s in shapes]
    err = finite_diff_check(f, params, eps=eps)
    assert err < 1e-4, f"max relative gradient error {err:.3e}"


def test_grad_add_broadcast():
    _check(lambda p: nm.sum_all(nm.add(p[0], p[1])), [(3, 4), (4,)], 20)


def test_grad_sub():
    _check(lambda p: nm.sum_all(nm.mul(nm.sub(p[0], p[1]), nm.sub(p[0], p[1]))),
           [(3, 4), (3, 4)], 21)


def test_grad_mul():
    _check(lambda p: nm.sum_all(nm.mul(p[0], p[1])), [(2, 5), (2, 5)], 22)


def test_grad_softmax():
    _check(lambda p: nm.sum_all(nm.mul(nm.softmax(p[0], axis=-1), p[1])),
           [(3, 5), (3, 5)], 23)


def test_grad_layer_norm():
    _check(lambda p: nm.sum_all(nm.mul(nm.layer_norm(p[0], p[1], p[2]), p[3])),
           [(4, 6), (6,), (6,), (4, 6)], 24)


def test_grad_gelu():
    _check(lambda p: nm.sum_all(nm.mul(nm.gelu(p[0]), p[0])), [(3, 3)], 25)


def test_grad_exp_log():
    def f(p):
        return nm.sum_all(nm.log(nm.add(nm.exp(p[0]), nm.exp(nm.neg(p[0])))))
    _check(f, [(4,)], 26)


def test_grad_absolute():
    # keep inputs away from the kink at 0
    r = np.random.default_rng(27)
    x = Tensor(np.sign(r.normal(size=8)) * (0.5 + r.uniform(size=8)))
    assert finite_diff_check(lambda p: nm.sum_all(nm.absolute(p[0])), [x]) < 1e-4


def test_grad_huber():
    r = np.random.default_rng(28)
    x = Tensor(r.normal(size=10) * 2.0)
    assert finite_diff_check(lambda p: nm.sum_all(nm.huber(p[0], 1.0)), [x]) < 1e-4


def test_grad_reshape_transpose():
    def f(p):
        y = nm.transpose(nm.reshape(p[0], (3, 4)), (1, 0))
        return nm.sum_all(nm.mul(y, y))
    _check(f, [(12,)], 29)


def test_grad_gather_scatter():
    def f(p):
        got = nm.gather_rows(p[0], [2, 0, 2])  # duplicate index accumulates
        spread = nm.scatter_rows(got, [1, 4, 0], 6)
        return nm.sum_all(nm.mul(spread, spread))
    _check(f, [(4, 3)], 30)


def test_grad_broadcast_rows_take_scalar():
    def f(p):
        tiled = nm.broadcast_rows(p[0], 5)
        return nm.take_scalar(nm.mul(tiled, tiled), 7)
    _check(f, [(4,)], 31)


def test_grad_means():
    _check(lambda p: nm.mean_all(nm.mul(p[0], p[0])), [(3, 4)], 32)
    _check(lambda p: nm.sum_all(nm.mean_axis(nm.mul(p[0], p[0]), 0)), [(3, 4)], 33)


def test_grad_batched_matmul():
    _check(lambda p: nm.sum_all(nm.matmul(p[0], p[1])), [(2, 3, 4), (2, 4, 2)], 34)


# ---- finiteness policing ----


def test_log_of_negative_raises():
    with pytest.raises(NonFiniteError):
        nm.log(Tensor([-1.0]))


def test_exp_overflow_raises():
    with pytest.raises(NonFiniteError):
        nm.exp(Tensor([1e308]))


def test_tensor_rejects_nan():
    with pytest.raises(NonFiniteError):
        Tensor([np.nan])


# ---- adamw ----


def test_adamw_first_step_closed_form():
    """m-hat = g, v-hat = g^2 on step one, so delta = -lr*g/(|g|+eps)."""
    p = {"w": Tensor(np.array([1.0]))}
    state = OptimState.for_params(p)
    adamw_step(p, {"w": np.array([2.0])}, state, lr=0.1,
               beta1=0.9, beta2=0.95, eps=1e-8, weight_decay=0.0)
    want = 1.0 - 0.1 * 2.0 / (2.0 + 1e-8)
    np.testing.assert_allclose(p["w"].data, [want], rtol=1e-12)
    assert state.t == 1


def test_adamw_zero_grad_no_change():
    p = {"w": Tensor(np.array([3.0, -1.0]))}
    state = OptimState.for_params(p)
    adamw_step(p, {"w": np.zeros(2)}, state, lr=0.5, weight_decay=0.0)
    np.testing.assert_array_equal(p["w"].data, [3.0, -1.0])
    assert state.t == 1


def test_adamw_decoupled_decay():
    p = {"w": Tensor(np.array([4.0]))}
    state = OptimState.for_params(p)
    adamw_step(p, {"w": np.zeros(1)}, state, lr=0.1, weight_decay=0.2)
    np.testing.assert_allclose(p["w"].data, [4.0 * (1.0 - 0.1 * 0.2)], rtol=1e-12)


def test_adamw_bit_deterministic():
    def run():
        r = np.random.default_rng(99)
        p = {"a": Tensor(r.normal(size=(3, 3))), "b": Tensor(r.normal(size=3))}
        state = OptimState.for_params(p)
        for step in range(10):
            g = {k: np.full_like(v.data, 0.1 * (step + 1)) for k, v in p.items()}
            adamw_step(p, g, state, lr=1e-2, weight_decay=0.05)
        return {k: v.data.copy() for k, v in p.items()}

    one, two = run(), run()
    for k in one:
        assert (one[k] == two[k]).all()


def test_adamw_rejects_bad_beta():
    p = {"w": Tensor(np.ones(1))}
    with pytest.raises(ValueError):
        adamw_step(p, {"w": np.ones(1)}, OptimState.for_params(p), lr=0.1, beta1=1.0)


def test_adamw_rejects_shape_mismatch():
    p = {"w": Tensor(np.ones(2))}
    with pytest.raises(ValueError):
        adamw_step(p, {"w": np.ones(3)}, OptimState.for_params(p), lr=0.1)


# ---- finite_diff_check ----


def test_finite_diff_linear_is_machine_precision():
    c = Tensor(np.array([1.0, -2.0, 3.0]))

    def f(params):
        return nm.sum_all(nm.mul(params[0], c))

    err = finite_diff_check(f, [Tensor(_rng(40).normal(size=3))])
    assert err < 1e-9


def test_finite_diff_zero_eps_rejected():
    with pytest.raises(ValueError):
        finite_diff_check(lambda p: nm.sum_all(p[0]), [Tensor(np.ones(2))], eps=0.0)


def test_finite_diff_rejects_nondeterministic_f():
    calls = [0.0]

    def f(params):
        calls[0] += 1.0
        return nm.scale(nm.sum_all(params[0]), calls[0])

    with pytest.raises(ValueError):
        finite_diff_check(f, [Tensor(np.ones(2))])


def test_finite_diff_requires_float64():
    x = Tensor(np.ones(2, dtype=np.float32))
    with pytest.raises(ValueError):
        finite_diff_check(lambda p: nm.sum_all(p[0]), [x])
