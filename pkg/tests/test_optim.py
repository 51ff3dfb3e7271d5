import numpy as np

from featprobe.nn import AdamW, Parameter


def test_zero_gradient_no_decay_leaves_params_unchanged():
    p = Parameter(np.array([1.0, -2.0, 3.0]))
    opt = AdamW([p], lr=1e-3, weight_decay=0.0)
    before = p.data.copy()
    p.grad = np.zeros_like(p.data)
    for _ in range(5):
        opt.step()
    assert np.array_equal(p.data, before)


def test_decoupled_decay_closed_form():
    p = Parameter(np.array([10.0, -4.0]))
    opt = AdamW([p], lr=1e-3, weight_decay=0.01)
    p.grad = np.zeros_like(p.data)
    opt.step()
    assert np.allclose(p.data, np.array([10.0, -4.0]) * (1.0 - 1e-5), rtol=0, atol=1e-12)


def test_first_step_magnitude_is_lr():
    # with g=1: m_hat=1, v_hat=1 -> update = -lr / (1 + eps)
    p = Parameter(np.array([0.0]))
    opt = AdamW([p], lr=1e-3, weight_decay=0.0)
    p.grad = np.array([1.0])
    opt.step()
    assert abs(p.data[0] + 1e-3) <= 1e-6 * 1e-3 + 1e-12


def test_two_step_hand_trace():
    # hand-evaluated AdamW with constant gradient 1.0, lr=0.1
    lr, b1, b2, eps = 0.1, 0.9, 0.999, 1e-8
    p = Parameter(np.array([1.0]))
    opt = AdamW([p], lr=lr, weight_decay=0.0)
    x, m, v = 1.0, 0.0, 0.0
    for t in (1, 2):
        p.grad = np.array([1.0])
        opt.step()
        m = b1 * m + (1 - b1) * 1.0
        v = b2 * v + (1 - b2) * 1.0
        x -= lr * (m / (1 - b1 ** t)) / (np.sqrt(v / (1 - b2 ** t)) + eps)
        assert abs(p.data[0] - x) <= 1e-12


def test_skips_params_without_grad():
    a = Parameter(np.array([1.0]))
    b = Parameter(np.array([2.0]))
    opt = AdamW([a, b], lr=0.1, weight_decay=0.0)
    a.grad = np.array([1.0])
    opt.step()
    assert a.data[0] != 1.0
    assert b.data[0] == 2.0


def test_deterministic_given_state(rng):
    def run():
        p = Parameter(np.full(4, 2.0))
        opt = AdamW([p], lr=1e-2, weight_decay=0.01)
        g = np.random.default_rng(0)
        for _ in range(20):
            p.grad = g.standard_normal(4)
            opt.step()
        return p.data.copy()

    assert np.array_equal(run(), run())
