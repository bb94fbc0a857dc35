import math

import mpmath
import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from cliplite import autodiff as ad
from cliplite.autodiff import Tape, Tensor, check_gradients, conv2d, linear, reduce


def test_softplus_at_zero_is_ln2():
    assert ad.softplus(0.0).item() == pytest.approx(math.log(2), abs=1e-15)


def test_relu_definition():
    assert ad.relu(-3.5).item() == 0.0
    assert ad.relu(2.0).item() == 2.0


def test_softplus_large_argument_matches_extended_precision():
    mpmath.mp.dps = 50
    expected = float(mpmath.log(1 + mpmath.exp(50)))
    got = ad.softplus(50.0).item()
    assert math.isfinite(got)
    assert got == pytest.approx(expected, rel=1e-15)
    assert ad.softplus(800.0).item() == 800.0


def test_elementwise_dispatch_and_errors():
    a, b = Tensor([1.0, 2.0]), Tensor([3.0, 5.0])
    assert ad.elementwise("sub", a, b).data.tolist() == [-2.0, -3.0]
    assert ad.elementwise("scale", a, 3.0).data.tolist() == [3.0, 6.0]
    assert ad.elementwise("add", a, 1.0).data.tolist() == [2.0, 3.0]
    with pytest.raises(ad.ShapeError):
        ad.add(Tensor(np.ones(2)), Tensor(np.ones(3)))
    with pytest.raises(ValueError, match="non-positive"):
        ad.log(Tensor([1.0, 0.0]))
    with pytest.raises(ValueError):
        ad.elementwise("tanh", a)


def test_non_finite_results_are_errors():
    with pytest.raises(ad.NonFiniteError):
        ad.exp(Tensor([1000.0]))
    with pytest.raises(ad.NonFiniteError):
        Tensor([np.nan])


def test_linear_identity_and_affine():
    np.testing.assert_array_equal(linear(np.eye(2), np.eye(2), np.zeros(2)).data, np.eye(2))
    out = linear([[1.0, 2.0]], [[1.0, 0.0], [0.0, 1.0]], [3.0, 3.0])
    np.testing.assert_array_equal(out.data, [[4.0, 5.0]])


def test_linear_matches_triple_loop():
    rng = np.random.default_rng(0)
    x, W, b = rng.normal(size=(4, 3)), rng.normal(size=(3, 2)), rng.normal(size=2)
    ref = np.zeros((4, 2))
    for i in range(4):
        for j in range(2):
            acc = b[j]
            for k in range(3):
                acc += x[i, k] * W[k, j]
            ref[i, j] = acc
    np.testing.assert_allclose(linear(x, W, b).data, ref, rtol=1e-14, atol=1e-14)
    with pytest.raises(ad.ShapeError):
        linear(x, rng.normal(size=(2, 2)), b)


def _naive_conv(x, K, stride, pad):
    n, c, h, w = x.shape
    co, _, k, _ = K.shape
    xp = np.zeros((n, c, h + 2 * pad, w + 2 * pad))
    xp[:, :, pad : pad + h, pad : pad + w] = x
    oh = (h + 2 * pad - k) // stride + 1
    ow = (w + 2 * pad - k) // stride + 1
    out = np.zeros((n, co, oh, ow))
    for b in range(n):
        for o in range(co):
            for i in range(oh):
                for j in range(ow):
                    patch = xp[b, :, i * stride : i * stride + k, j * stride : j * stride + k]
                    out[b, o, i, j] = (patch * K[o]).sum()
    return out


def test_conv_hand_example():
    x = np.arange(1.0, 10.0).reshape(1, 1, 3, 3)
    out = conv2d(x, np.ones((1, 1, 2, 2)), stride=1, pad=0)
    np.testing.assert_array_equal(out.data[0, 0], [[12.0, 16.0], [24.0, 28.0]])


def test_conv_identity_kernel_and_shape_formula():
    rng = np.random.default_rng(1)
    x = rng.normal(size=(2, 3, 5, 5))
    K = np.zeros((3, 3, 1, 1))
    K[[0, 1, 2], [0, 1, 2]] = 1.0
    np.testing.assert_array_equal(conv2d(x, K).data, x)
    out = conv2d(rng.normal(size=(1, 3, 16, 16)), rng.normal(size=(4, 3, 3, 3)), stride=2, pad=1)
    assert out.shape == (1, 4, 8, 8)


@pytest.mark.parametrize("stride,pad", [(1, 0), (1, 1), (2, 1), (3, 2)])
def test_conv_matches_naive_loops(stride, pad):
    rng = np.random.default_rng(stride * 10 + pad)
    x, K = rng.normal(size=(2, 3, 7, 6)), rng.normal(size=(4, 3, 3, 3))
    np.testing.assert_allclose(conv2d(x, K, stride, pad).data, _naive_conv(x, K, stride, pad), atol=1e-12)


def test_conv_rejects_oversized_kernel():
    with pytest.raises(ad.ShapeError):
        conv2d(np.ones((1, 1, 2, 2)), np.ones((1, 1, 3, 3)), pad=0)


def test_reductions():
    assert reduce("mean", [1.0, 2.0, 3.0, 4.0]).item() == 2.5
    assert reduce("log_sum_exp", [0.0, 0.0]).item() == pytest.approx(math.log(2), abs=1e-15)
    gap = reduce("global_avg_pool", np.arange(8.0).reshape(1, 2, 2, 2))
    np.testing.assert_array_equal(gap.data, [[1.5, 5.5]])
    with pytest.raises(ValueError, match="empty"):
        reduce("sum", np.zeros((0, 3)), axes=0)


def test_log_sum_exp_large_values_extended_precision():
    mpmath.mp.dps = 50
    expected = float(mpmath.log(mpmath.exp(1000) + mpmath.exp(1000)))
    got = reduce("log_sum_exp", [1000.0, 1000.0]).item()
    assert got == pytest.approx(expected, rel=1e-15)
    assert got == pytest.approx(1000 + math.log(2), rel=1e-15)


def test_backward_sum_of_squares():
    x = Tensor.param([1.0, 2.0, 3.0])
    with Tape() as tape:
        loss = reduce("sum", x * x)
    tape.backward(loss)
    np.testing.assert_array_equal(x.grad, [2.0, 4.0, 6.0])


def test_backward_softplus_at_zero_is_half():
    w = Tensor.param(0.0)
    with Tape() as tape:
        loss = ad.softplus(w * 1.0)
    tape.backward(loss)
    assert float(w.grad) == 0.5


def test_backward_errors():
    x = Tensor.param([1.0, 2.0])
    with Tape() as tape:
        y = x * 2.0
    with pytest.raises(ad.ShapeError):
        tape.backward(y)
    with Tape() as tape:
        loss = reduce("sum", x)
    tape.backward(loss)
    with pytest.raises(ad.TapeError):
        tape.backward(loss)


def test_backward_accumulates_into_grad():
    x = Tensor.param([1.0])
    for _ in range(2):
        with Tape() as tape:
            loss = reduce("sum", x * 3.0)
        tape.backward(loss)
    np.testing.assert_array_equal(x.grad, [6.0])


def test_no_recording_outside_tape():
    x = Tensor.param([1.0])
    y = x * 2.0
    assert y._tape is None


def _mlp_params(rng, d_in=2, hidden=3, d_out=1):
    return {
        "W1": Tensor.param(rng.uniform(-2, 2, (d_in, hidden))),
        "b1": Tensor.param(rng.uniform(-2, 2, hidden)),
        "W2": Tensor.param(rng.uniform(-2, 2, (hidden, d_out))),
        "b2": Tensor.param(rng.uniform(-2, 2, d_out)),
    }


def test_two_layer_mlp_matches_finite_differences():
    rng = np.random.default_rng(3)
    p = _mlp_params(rng)  # 6 + 3 + 3 + 1 = 13 parameters
    x = rng.uniform(-2, 2, (5, 2))

    def f():
        h = ad.relu(linear(x, p["W1"], p["b1"]))
        return reduce("mean", ad.softplus(linear(h, p["W2"], p["b2"])))

    report = check_gradients(f, p, eps=1e-5, tol=1e-4)
    assert report.passed, report.errors


def _random_net(seed):
    """One random composition touching every primitive."""
    rng = np.random.default_rng(seed)
    p = {
        "K": Tensor.param(rng.uniform(-2, 2, (2, 1, 2, 2))),
        "kb": Tensor.param(rng.uniform(-2, 2, 2)),
        "W": Tensor.param(rng.uniform(-2, 2, (2, 3))),
        "b": Tensor.param(rng.uniform(-2, 2, 3)),
        "E": Tensor.param(rng.uniform(-2, 2, (4, 3))),
    }
    x = rng.uniform(-2, 2, (2, 1, 4, 4))
    idx = rng.integers(0, 4, 2)

    def f():
        a = ad.relu(conv2d(x, p["K"], stride=2, pad=1, bias=p["kb"]))
        h = linear(reduce("global_avg_pool", a), p["W"], p["b"])
        e = ad.gather_rows(p["E"], idx)
        u = ad.normalize_rows(h - e * 0.5)
        s = ad.matmul(u, ad.transpose(ad.exp(ad.scale(e, 0.3))))
        t = reduce("log_sum_exp", s, axes=1) + reduce("sum", ad.log(ad.softplus(s)), axes=0)
        gate = ad.reshape(ad.relu(reduce("sum", h, axes=1)), (2,))
        return reduce("mean", ad.negate(t) * gate)

    return f, p


@pytest.mark.parametrize("seed", range(100))
def test_random_compositions_match_finite_differences(seed):
    f, p = _random_net(seed)
    report = check_gradients(f, p, eps=1e-5, tol=1e-4)
    assert report.passed, report.errors


def test_gradcheck_quadratic_bowl_is_exact():
    p = {"w": Tensor.param([0.3, -1.2, 2.0])}
    report = check_gradients(lambda: ad.scale(reduce("sum", p["w"] * p["w"]), 0.5), p)
    assert report.max_error < 1e-9


def test_gradcheck_conv_relu_gap_toy():
    rng = np.random.default_rng(7)
    p = {"K": Tensor.param(rng.normal(size=(3, 2, 3, 3))), "b": Tensor.param(rng.normal(size=3))}
    x = rng.normal(size=(2, 2, 6, 6))
    report = check_gradients(
        lambda: reduce("sum", reduce("global_avg_pool", ad.relu(conv2d(x, p["K"], 1, 1, p["b"])))), p
    )
    assert report.max_error < 1e-4


def test_gradcheck_flags_a_corrupted_rule(monkeypatch):
    good = ad.BACKWARD_RULES["softplus"]
    monkeypatch.setitem(ad.BACKWARD_RULES, "softplus", lambda g, s: tuple(x * 1.1 for x in good(g, s)))
    p = {"a": Tensor.param([0.5, -0.3]), "b": Tensor.param([1.0, 2.0])}
    report = check_gradients(lambda: reduce("sum", ad.softplus(p["a"]) + p["b"] * p["b"]), p)
    assert report.failed == ["a"]


def test_gradcheck_skips_coordinates_straddling_a_relu_kink():
    p = {"w": Tensor.param([3e-6, 0.5])}
    f = lambda: reduce("sum", ad.relu(p["w"]))
    naive = check_gradients(f, p, skip_kinks=False)
    assert not naive.passed  # numeric slope at 3e-6 is (3e-6 + 1e-5) / 2e-5 = 0.65
    aware = check_gradients(f, p)
    assert aware.passed and aware.skipped == {"w": 1}


def test_gradcheck_suite_covers_primitives_and_losses():
    from cliplite.gradcheck_suite import CASES, run_suite, suite_csv

    assert {"model/jsd_single_neg", "model/infonce_all_pairs", "conv2d/s2p1"} <= set(CASES)
    results = run_suite(0, only={"linear", "reduce/log_sum_exp"})
    assert [r.name for r in results] == ["linear", "reduce/log_sum_exp"]
    assert all(r.passed for r in results)
    assert suite_csv(results).startswith("case,max_rel_err,")


def test_gradcheck_detects_non_deterministic_forward():
    rng = np.random.default_rng(0)
    p = {"w": Tensor.param([1.0])}
    with pytest.raises(RuntimeError, match="deterministic"):
        check_gradients(lambda: reduce("sum", p["w"] * rng.normal()), p)


def test_forward_backward_bitwise_deterministic():
    def run():
        f, p = _random_net(11)
        with Tape() as tape:
            loss = f()
        tape.backward(loss)
        return loss.item(), {k: v.grad.copy() for k, v in p.items()}

    (l1, g1), (l2, g2) = run(), run()
    assert l1 == l2
    for k in g1:
        assert np.array_equal(g1[k], g2[k])


def test_retained_intermediate_gradient():
    x = Tensor.param([1.0, 2.0])
    with Tape() as tape:
        h = (x * 3.0).retain_grad()
        loss = reduce("sum", h * h)
    tape.backward(loss)
    np.testing.assert_allclose(h.grad, 2 * np.array([3.0, 6.0]))


@settings(max_examples=200, deadline=None)
@given(st.floats(-30, 30))
def test_softplus_odd_part_is_identity(x):
    assert abs(ad.softplus(x).item() - ad.softplus(-x).item() - x) <= 1e-12


@settings(max_examples=100, deadline=None)
@given(
    st.lists(st.floats(-50, 50), min_size=1, max_size=8),
    st.floats(-100, 100),
)
def test_log_sum_exp_shift_invariance(xs, c):
    x = np.array(xs)
    lhs = reduce("log_sum_exp", x + c).item()
    rhs = reduce("log_sum_exp", x).item() + c
    assert lhs == pytest.approx(rhs, rel=1e-12, abs=1e-10)
