import numpy as np
import pytest

from affmtl.optim import Adam, DivergenceError, LrSchedule
from affmtl.tensor import Tensor


def test_adam_zero_grad_is_fixed_point():
    p = Tensor(np.array([1.0, -2.0]), requires_grad=True)
    opt = Adam([p], base_lr=0.1)
    for _ in range(5):
        p.grad = np.zeros_like(p.data)
        opt.step()
    np.testing.assert_allclose(p.data, [1.0, -2.0])
    np.testing.assert_allclose(opt.m[0], [0.0, 0.0])


def test_adam_moments_decay_after_spike():
    p = Tensor(np.array([0.0]), requires_grad=True)
    opt = Adam([p], base_lr=0.0)
    p.grad = np.array([1.0])
    opt.step()
    m_after_spike = abs(opt.m[0][0])
    for _ in range(10):
        p.grad = np.zeros(1)
        opt.step()
    assert abs(opt.m[0][0]) < m_after_spike


def test_adam_first_step_size():
    # with constant gradient 1, bias correction makes step 1 move by ~lr
    p = Tensor(np.array([0.5]), requires_grad=True)
    opt = Adam([p], base_lr=0.01)
    p.grad = np.ones(1)
    opt.step()
    np.testing.assert_allclose(p.data, [0.5 - 0.01], atol=1e-6)


def test_adam_descends_quadratic():
    p = Tensor(np.array([1.0]), requires_grad=True)
    opt = Adam([p], base_lr=0.1)
    values = [float(p.data[0] ** 2)]
    for _ in range(2):
        p.grad = 2.0 * p.data.copy()
        opt.step()
        values.append(float(p.data[0] ** 2))
    assert values[1] < values[0] and values[2] < values[1]


def test_adam_step_counter_increments():
    p = Tensor(np.zeros(1), requires_grad=True)
    opt = Adam([p], base_lr=0.1)
    for expected in (1, 2, 3):
        p.grad = np.ones(1)
        opt.step()
        assert opt.step_count == expected


def test_adam_rejects_nan_grad():
    p = Tensor(np.zeros(2), requires_grad=True)
    opt = Adam([p], base_lr=0.1)
    p.grad = np.array([0.0, np.nan])
    before = p.data.copy()
    with pytest.raises(DivergenceError):
        opt.step()
    np.testing.assert_array_equal(p.data, before)
    assert opt.step_count == 0


def test_lr_schedule_endpoints():
    sched = LrSchedule(base_lr=0.001, warmup_epochs=5, total_epochs=6)
    assert sched.lr_at(0.0) == 0.0
    assert sched.lr_at(5.0) == pytest.approx(0.001)
    assert sched.lr_at(6.0) == pytest.approx(0.0, abs=1e-12)


def test_lr_schedule_cosine_midpoint():
    sched = LrSchedule(base_lr=0.001, warmup_epochs=5, total_epochs=6)
    assert sched.lr_at(5.5) == pytest.approx(0.0005)


def test_lr_schedule_nonnegative_and_continuous():
    sched = LrSchedule(base_lr=0.003, warmup_epochs=2, total_epochs=7)
    grid = np.linspace(0.0, 7.0, 701)
    values = [sched.lr_at(t) for t in grid]
    assert min(values) >= 0.0
    # continuity at the warmup/cosine joint
    assert sched.lr_at(2.0 - 1e-9) == pytest.approx(sched.lr_at(2.0 + 1e-9), abs=1e-8)
    assert sched.lr_at(2.0) == pytest.approx(0.003)


def test_lr_schedule_no_warmup():
    sched = LrSchedule(base_lr=0.01, warmup_epochs=0, total_epochs=4)
    assert sched.lr_at(0.0) == pytest.approx(0.01)


def test_lr_schedule_rejects_bad_config():
    with pytest.raises(ValueError):
        LrSchedule(base_lr=0.001, warmup_epochs=7, total_epochs=6)
    with pytest.raises(ValueError):
        LrSchedule(base_lr=-1.0, warmup_epochs=1, total_epochs=2)


def test_lr_schedule_rejects_out_of_range_progress():
    sched = LrSchedule(base_lr=0.001, warmup_epochs=5, total_epochs=6)
    with pytest.raises(ValueError):
        sched.lr_at(6.5)
