import numpy as np

from dualroute.autodiff import Tensor
from dualroute.optim import AdamW, clip_grad_norm


def _param(values, grad):
    p = Tensor(np.array(values, dtype=float), requires_grad=True)
    p.grad = np.array(grad, dtype=float)
    return p


def test_clip_scales_to_max_norm():
    a, b = _param([0.0], [3.0]), _param([0.0, 0.0], [0.0, 4.0])
    assert clip_grad_norm([a, b], 1.0) == 5.0
    total = np.sqrt((a.grad ** 2).sum() + (b.grad ** 2).sum())
    assert abs(total - 1.0) < 1e-9
    np.testing.assert_allclose(b.grad / a.grad[0], [0.0, 4 / 3])


def test_clip_leaves_small_gradients():
    a = _param([0.0], [0.5])
    assert clip_grad_norm([a], 1.0) == 0.5
    assert a.grad.tolist() == [0.5]


def test_first_adam_step_has_lr_magnitude():
    p = _param([1.0, -2.0], [0.3, -7.0])
    AdamW([p], lr=0.1, weight_decay=0.0, clip=0.0).step()
    np.testing.assert_allclose(p.data, [0.9, -1.9], atol=1e-6)


def test_weight_decay_is_decoupled():
    p = _param([2.0], [0.0])
    AdamW([p], lr=0.1, weight_decay=0.5, clip=0.0).step()
    assert abs(p.data[0] - (2.0 - 0.1 * 0.5 * 2.0)) < 1e-12


def test_zero_lr_is_a_no_op_and_none_grads_are_skipped():
    p, q = _param([1.0], [5.0]), Tensor(np.array([3.0]), requires_grad=True)
    AdamW([p, q], lr=0.0).step()
    assert p.data.tolist() == [1.0] and q.data.tolist() == [3.0]


def test_warmup_is_linear():
    opt = AdamW([_param([0.0], [1.0])], lr=1.0, warmup_steps=4)
    seen = []
    for _ in range(6):
        seen.append(opt.current_lr())
        opt.step()
    assert seen == [0.25, 0.5, 0.75, 1.0, 1.0, 1.0]


def test_minimizes_a_quadratic():
    p = Tensor(np.array([3.0, -4.0]), requires_grad=True)
    opt = AdamW([p], lr=0.05, weight_decay=0.0)
    for _ in range(500):
        opt.zero_grad()
        p.grad = 2 * p.data
        opt.step()
    assert np.abs(p.data).max() < 1e-2
