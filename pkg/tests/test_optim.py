import math

import numpy as np
import pytest

from cliplite.autodiff import NonFiniteError, Tensor
from cliplite.optim import LrSchedule, Optimizer, default_decay_mask, lr_at


def _quadratic_grad(params):
    for p in params.values():
        p.grad = p.data.copy()  # d/dp of 0.5 * ||p||^2


def _f(params):
    return 0.5 * sum(float((p.data**2).sum()) for p in params.values())


def test_sgd_one_step_by_hand():
    p = Tensor.param([1.0])
    opt = Optimizer({"w": p}, "sgd_momentum", weight_decay=0.0)
    p.grad = np.array([0.5])
    opt.step(0.1)
    assert p.data[0] == pytest.approx(0.95, abs=1e-15)


def test_sgd_momentum_and_decay():
    p = Tensor.param([2.0])
    opt = Optimizer({"w": p}, "sgd_momentum", momentum=0.9, weight_decay=0.1)
    p.grad = np.array([1.0])
    opt.step(0.5)  # v = 1 + 0.2 = 1.2, p = 2 - 0.6
    assert p.data[0] == pytest.approx(1.4)
    p.grad = np.array([1.0])
    opt.step(0.5)  # v = 0.9*1.2 + 1 + 0.14 = 2.22
    assert p.data[0] == pytest.approx(1.4 - 0.5 * 2.22)


def test_adamw_first_step_closed_form():
    p = Tensor.param([3.0])
    opt = Optimizer({"w": p}, "adamw", betas=(0.9, 0.999), eps=1e-8, weight_decay=0.0)
    p.grad = np.array([1.0])
    opt.step(1e-3)
    assert 3.0 - p.data[0] == pytest.approx(1e-3 / (1 + 1e-8), rel=1e-12)


def test_adamw_decay_is_decoupled_and_masked():
    w, b = Tensor.param([1.0]), Tensor.param([1.0])
    opt = Optimizer({"fc_w": w, "fc_b": b}, "adamw", weight_decay=0.5)
    w.grad = np.zeros(1)
    b.grad = np.zeros(1)
    opt.step(0.1)
    assert w.data[0] == pytest.approx(0.95)
    assert b.data[0] == 1.0
    assert not default_decay_mask("text/embedding")
    assert not default_decay_mask("logit_scale")
    assert default_decay_mask("image/conv1")


def test_lookahead_alpha_one_is_bare_optimizer():
    rng = np.random.default_rng(0)
    init = rng.normal(size=4)
    grads = rng.normal(size=(10, 4))
    runs = []
    for la in (None, (1.0, 3)):
        p = Tensor.param(init.copy())
        opt = Optimizer({"w": p}, "sgd_momentum", lookahead=la)
        for g in grads:
            p.grad = g.copy()
            opt.step(0.05)
        runs.append(p.data.copy())
    np.testing.assert_array_equal(runs[0], runs[1])


def test_lookahead_sync_sets_fast_to_slow():
    p = Tensor.param([1.0, -1.0])
    opt = Optimizer({"w": p}, "sgd_momentum", lookahead=(0.5, 5))
    for step in range(1, 11):
        p.grad = np.array([0.3, 0.7])
        opt.step(0.1)
        if step % 5 == 0:
            np.testing.assert_array_equal(p.data, opt.slots["slow/w"])


@pytest.mark.parametrize(
    "kind,kw",
    [
        ("sgd_momentum", {}),
        ("sgd_momentum", {"weight_decay": 1e-4}),
        ("sgd_momentum", {"lookahead": (0.5, 5)}),
        ("adamw", {}),
        ("adamw", {"weight_decay": 0.2, "lookahead": (0.5, 5)}),
    ],
)
def test_small_lr_decreases_quadratic(kind, kw):
    # A LookAhead sync pulls the fast weights back toward the (lagging) slow
    # weights, which can raise f relative to the previous fast iterate. So the
    # inner steps must decrease f, and so must the sequence of slow weights.
    params = {"w": Tensor.param(np.array([1.0, -2.0, 0.5]))}
    opt = Optimizer(params, kind, **kw)
    lr = 1e-3 if kind == "sgd_momentum" else 1e-4
    k = opt.lookahead[1] if opt.lookahead else None
    prev = _f(params)
    slow_prev = prev
    for step in range(1, 41):
        _quadratic_grad(params)
        opt.step(lr)
        cur = _f(params)
        if k and step % k == 0:
            assert cur < slow_prev
            slow_prev = cur
        else:
            assert cur < prev
        prev = cur


def test_non_finite_gradient_names_parameter():
    p = Tensor.param([1.0])
    opt = Optimizer({"conv1": p})
    p.grad = np.array([np.inf])
    with pytest.raises(NonFiniteError, match="conv1"):
        opt.step(0.1)
    assert p.data[0] == 1.0


def test_state_roundtrip_continues_identically():
    def make():
        p = Tensor.param([1.0, 2.0])
        return p, Optimizer({"w": p}, "adamw", weight_decay=0.1, lookahead=(0.5, 3))

    p1, o1 = make()
    for _ in range(4):
        p1.grad = np.array([0.1, -0.2])
        o1.step(0.01)
    p2, o2 = make()
    p2.data[...] = p1.data
    o2.load_state(o1.state_arrays(), o1.state_meta())
    for _ in range(4):
        for p, o in ((p1, o1), (p2, o2)):
            p.grad = np.array([0.3, 0.1])
            o.step(0.01)
    np.testing.assert_array_equal(p1.data, p2.data)


def test_schedule_points():
    s = LrSchedule(0.05, 100, 1100)
    assert lr_at(s, 0) == 0.0
    assert lr_at(s, 50) == pytest.approx(0.025)
    assert lr_at(s, 100) == 0.05
    assert lr_at(s, 600) == pytest.approx(0.025, abs=1e-15)
    assert lr_at(s, 1100) == 0.0
    lrs = [lr_at(s, t) for t in range(100, 1101)]
    assert all(b <= a for a, b in zip(lrs, lrs[1:]))
    with pytest.raises(ValueError):
        lr_at(s, 1101)
    with pytest.raises(ValueError):
        LrSchedule(0.1, 10, 10)


def test_schedule_without_warmup():
    s = LrSchedule(1.0, 0, 4)
    assert lr_at(s, 0) == 1.0
    assert lr_at(s, 2) == pytest.approx(0.5)
    assert math.isclose(lr_at(s, 4), 0.0)
