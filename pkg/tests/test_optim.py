"""AdamW update rules, clipping, and the cosine schedule."""

from __future__ import annotations

import numpy as np

from eeglm.autodiff import Graph, Tensor, backward, mul, sub, sum_
from eeglm.optim import AdamW, adamw_step, clip_global_norm, cosine_schedule


def test_zero_grad_no_decay_leaves_params_unchanged():
    p = Tensor(np.array([1.0, -2.0, 3.0]), requires_grad=True)
    state = {"step": 0, "m": {}, "v": {}}
    adamw_step({"p": p}, {"p": np.zeros(3)}, state, lr=0.5, weight_decay=0.0)
    np.testing.assert_allclose(p.data, [1.0, -2.0, 3.0])


def test_decoupled_decay_shrinks_by_factor():
    p = Tensor(np.array([2.0, -4.0]), requires_grad=True)
    state = {"step": 0, "m": {}, "v": {}}
    adamw_step({"p": p}, {"p": np.zeros(2)}, state, lr=1.0, weight_decay=0.1)
    np.testing.assert_allclose(p.data, [2.0 * 0.9, -4.0 * 0.9])


def test_quadratic_convergence():
    x = Tensor(np.array([0.0]), requires_grad=True)
    opt = AdamW({"x": x}, lr=0.1)
    for _ in range(200):
        with Graph():
            diff = sub(x, 3.0)
            loss = sum_(mul(diff, diff))
            grads = backward(loss, wrt=[x])
        opt.step({"x": grads[x]})
    assert abs(float(x.data[0]) - 3.0) < 0.01


def test_bias_correction_first_step_size():
    # with bias correction the very first step has magnitude ~lr regardless of betas
    p = Tensor(np.array([0.0]), requires_grad=True)
    state = {"step": 0, "m": {}, "v": {}}
    adamw_step({"p": p}, {"p": np.array([0.5])}, state, lr=0.01)
    assert abs(abs(float(p.data[0])) - 0.01) < 1e-6


def test_lr_scales_apply_per_parameter():
    a = Tensor(np.array([0.0]), requires_grad=True)
    b = Tensor(np.array([0.0]), requires_grad=True)
    grads = {"a": np.array([1.0]), "b": np.array([1.0])}
    state = {"step": 0, "m": {}, "v": {}}
    adamw_step({"a": a, "b": b}, grads, state, lr=0.1, lr_scales={"b": 0.1})
    assert abs(float(a.data[0])) > abs(float(b.data[0])) * 5


def test_clip_global_norm():
    grads = {"a": np.array([3.0]), "b": np.array([4.0])}
    clipped = clip_global_norm(grads, 1.0)
    total = np.sqrt(sum(float(np.sum(g * g)) for g in clipped.values()))
    assert abs(total - 1.0) < 1e-12
    # below the threshold nothing changes
    same = clip_global_norm({"a": np.array([0.1])}, 1.0)
    np.testing.assert_allclose(same["a"], [0.1])


def test_cosine_schedule_shape():
    base, total, warm = 1.0, 100, 10
    lrs = [cosine_schedule(s, total, base, warm, min_lr=0.1) for s in range(total)]
    assert lrs[warm - 1] == base               # warmup reaches base
    assert all(a <= b + 1e-12 for a, b in zip(lrs[: warm - 1], lrs[1:warm]))
    assert all(a >= b - 1e-12 for a, b in zip(lrs[warm:-1], lrs[warm + 1 :]))
    assert abs(lrs[-1] - 0.1) < 0.02           # decays towards min_lr


def test_optimizer_state_roundtrip():
    p = Tensor(np.array([1.0]), requires_grad=True)
    opt = AdamW({"p": p}, lr=0.1)
    opt.step({"p": np.array([0.3])})
    snap = opt.export_state()
    opt2 = AdamW({"p": p}, lr=0.1)
    opt2.load_state(snap)
    assert opt2.state["step"] == 1
    np.testing.assert_allclose(opt2.state["m"]["p"], opt.state["m"]["p"])
