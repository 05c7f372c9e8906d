import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from metainit.model import ModelConfig, ParameterSet
from metainit.optim import (
    ADAPT_SCHEDULE,
    META_SCHEDULE,
    MultiStepSchedule,
    adam_init,
    adam_step,
    matched_schedule,
    schedule_lr,
    schedule_sum,
    sgd_step,
)

LIN = ModelConfig(input_dim=1, layers=0, n_classes=1, output_bias=False)


def scalar(v):
    return ParameterSet(LIN, {"out.W": np.array([[v]])})


def g(v):
    return {"out.W": np.array([[v]])}


def test_sgd_examples():
    p = scalar(1.0)
    assert sgd_step(p, g(0.0), 0.1).equals(p)
    assert sgd_step(p, g(2.0), 2e-4)["out.W"][0, 0] == pytest.approx(0.9996, abs=1e-15)
    assert p["out.W"][0, 0] == 1.0
    with pytest.raises(ValueError):
        sgd_step(p, g(1.0), 0.0)


def test_sgd_two_steps_on_linear_model():
    # loss = c * w has constant gradient c: two steps equal one step with the summed gradient
    c, lr = 0.7, 0.1
    two = sgd_step(sgd_step(scalar(1.0), g(c), lr), g(c), lr)
    one = sgd_step(scalar(1.0), g(2 * c), lr)
    assert two["out.W"][0, 0] == pytest.approx(one["out.W"][0, 0], abs=1e-15)
    # loss = w^2 / 2 has gradient w: closed form trajectory w_k = (1 - lr)^k
    w = scalar(1.0)
    for _ in range(2):
        w = sgd_step(w, g(w["out.W"][0, 0]), lr)
    assert w["out.W"][0, 0] == pytest.approx((1 - lr) ** 2, rel=1e-14)
    assert w["out.W"][0, 0] != pytest.approx(sgd_step(scalar(1.0), g(2.0), lr)["out.W"][0, 0])


@given(grad=st.floats(1e-3, 1e3) | st.floats(-1e3, -1e-3))
def test_adam_first_step(grad):
    lr = 2e-4
    state = adam_init(scalar(0.5))
    state2, p = adam_step(state, scalar(0.5), g(grad), lr)
    # m_hat = g, v_hat = g^2 -> update = lr * g / (|g| + eps)
    expect = lr * abs(grad) / (abs(grad) + 1e-8)
    assert abs(p["out.W"][0, 0] - 0.5) == pytest.approx(expect, rel=1e-9)
    assert state2.step_count == 1 and state.step_count == 0


def test_adam_zero_grad_never_moves():
    p = scalar(0.3)
    state = adam_init(p)
    for _ in range(20):
        state, p = adam_step(state, p, g(0.0), 1e-2)
    assert p["out.W"][0, 0] == 0.3


def test_adam_deterministic():
    def run():
        p, s = scalar(1.0), adam_init(scalar(1.0))
        for i in range(10):
            s, p = adam_step(s, p, g(np.sin(i) + p["out.W"][0, 0]), 1e-2)
        return p, s

    (p1, s1), (p2, s2) = run(), run()
    assert p1.equals(p2)
    assert s1.m["out.W"].tobytes() == s2.m["out.W"].tobytes()
    assert s1.v["out.W"].tobytes() == s2.v["out.W"].tobytes()


def test_adam_degenerate_sign_descent():
    # beta1 = beta2 = 0 and a large eps: update lr * g / (|g| + eps), monotone on a convex quadratic
    p = scalar(3.0)
    state = adam_init(p, beta1=0.0, beta2=0.0, eps=10.0)
    losses = []
    for _ in range(50):
        w = p["out.W"][0, 0]
        losses.append(0.5 * w * w)
        state, p = adam_step(state, p, g(w), 0.5)
    assert all(b < a for a, b in zip(losses, losses[1:]))


def test_meta_schedule():
    assert schedule_lr(META_SCHEDULE, 0) == 2e-4
    assert schedule_lr(META_SCHEDULE, 1999) == 2e-4
    assert schedule_lr(META_SCHEDULE, 2000) == 3e-5
    assert schedule_lr(META_SCHEDULE, 6799) == 3e-5


def test_adapt_schedule():
    assert schedule_lr(ADAPT_SCHEDULE, 0) == 1e-5
    assert schedule_lr(ADAPT_SCHEDULE, 1) == 1e-5
    assert schedule_lr(ADAPT_SCHEDULE, 2) == 1e-6
    assert schedule_lr(ADAPT_SCHEDULE, 14) == 1e-6


@given(
    ms=st.lists(st.integers(0, 500), min_size=0, max_size=4, unique=True),
    gamma=st.floats(0.01, 0.99),
    base=st.floats(1e-6, 1.0),
)
def test_schedule_non_increasing_piecewise_constant(ms, gamma, base):
    s = MultiStepSchedule(base, tuple(sorted(ms)), gamma)
    lrs = [schedule_lr(s, i) for i in range(0, 520)]
    assert all(b <= a for a, b in zip(lrs, lrs[1:]))
    changes = {i for i in range(1, 520) if lrs[i] != lrs[i - 1]}
    assert changes <= set(ms)


def test_schedule_validation():
    with pytest.raises(ValueError):
        MultiStepSchedule(1e-3, (5, 5), 0.1)
    with pytest.raises(ValueError):
        MultiStepSchedule(1e-3, (5,), 1.5)
    with pytest.raises(ValueError):
        schedule_lr(META_SCHEDULE, -1)


def test_schedule_sum_closed_form():
    # 2000 steps at 2e-4 then 4800 at 3e-5
    assert schedule_sum(META_SCHEDULE, 6800) == pytest.approx(2000 * 2e-4 + 4800 * 3e-5, rel=1e-12)
    assert schedule_sum(ADAPT_SCHEDULE, 15, 300) == pytest.approx(300 * (2 * 1e-5 + 13 * 1e-6), rel=1e-12)


def test_matched_schedule_meta_desk():
    s = matched_schedule(META_SCHEDULE, 6800, 100)
    assert s.milestones == (29,) and s.gamma == META_SCHEDULE.gamma
    assert schedule_sum(s, 100) == pytest.approx(schedule_sum(META_SCHEDULE, 6800), rel=1e-10)


def test_matched_schedule_adapt_desk():
    s = matched_schedule(ADAPT_SCHEDULE, 15, 15, 300, 5)
    assert s.milestones == ADAPT_SCHEDULE.milestones
    assert s.lr_base == pytest.approx(6e-4, rel=1e-10)


def test_matched_schedule_identity():
    assert matched_schedule(META_SCHEDULE, 6800, 6800) == META_SCHEDULE


@given(units=st.integers(5, 5000), per=st.floats(0.5, 50))
def test_matched_schedule_preserves_sum(units, per):
    s = matched_schedule(META_SCHEDULE, 6800, units, 1.0, per)
    assert schedule_sum(s, units, per) == pytest.approx(schedule_sum(META_SCHEDULE, 6800), rel=1e-9)
    assert s.gamma == META_SCHEDULE.gamma
