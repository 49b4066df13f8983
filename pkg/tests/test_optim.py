import numpy as np

from lmclab.optim import SGD, Adam
from lmclab.tensor import Tensor


def test_adam_first_step_hand_value():
    # m_hat = 1, v_hat = 1 after one unit-gradient step, so the update is
    # -lr / (1 + eps)
    p = Tensor(np.array([0.0]), requires_grad=True)
    p.grad = np.array([1.0])
    Adam(lr=1e-3).step([p])
    expected = -1e-3 / (1.0 + 1e-8)
    assert abs(p.data[0] - expected) < 1e-12
    assert abs(p.data[0] + 9.99999e-4) < 1e-8


def test_adam_zero_gradient_no_move():
    p = Tensor(np.array([1.5]), requires_grad=True)
    p.grad = np.array([0.0])
    Adam().step([p])
    assert p.data[0] == 1.5


def test_adam_constant_gradient_monotone():
    p = Tensor(np.array([0.0]), requires_grad=True)
    opt = Adam(lr=1e-3)
    values = [p.data[0]]
    for _ in range(3):
        p.grad = np.array([1.0])
        opt.step([p])
        values.append(p.data[0])
    assert values[0] > values[1] > values[2] > values[3]


def test_adam_skips_frozen_and_gradless():
    frozen = Tensor(np.array([1.0]), requires_grad=False)
    frozen.grad = np.array([1.0])
    fresh = Tensor(np.array([1.0]), requires_grad=True)
    Adam().step([frozen, fresh])
    assert frozen.data[0] == 1.0 and fresh.data[0] == 1.0


def test_adam_late_joining_parameter():
    a = Tensor(np.array([0.0]), requires_grad=True)
    b = Tensor(np.array([0.0]), requires_grad=True)
    opt = Adam(lr=1e-3)
    a.grad = np.array([1.0])
    opt.step([a])
    a.grad, b.grad = np.array([1.0]), np.array([1.0])
    opt.step([a, b])
    # b's first step gets full bias correction regardless of a's history
    assert abs(b.data[0] + 1e-3 / (1 + 1e-8)) < 1e-12


def test_sgd_step():
    p = Tensor(np.array([1.0]), requires_grad=True)
    p.grad = np.array([0.5])
    SGD(lr=0.1).step([p])
    assert abs(p.data[0] - 0.95) < 1e-15
