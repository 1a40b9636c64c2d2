from __future__ import annotations

import json
import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

import gradcheck
from odorpair import tensor as T
from odorpair.tensor import (
    Adam,
    AdamState,
    NonScalarLoss,
    ScheduleConfig,
    ShapeMismatch,
    Tensor,
    adam_step,
    load_checkpoint,
    lr_schedule,
    save_checkpoint,
)


def test_sigmoid_zero():
    assert T.sigmoid(Tensor(0.0)).item() == 0.5


def test_sigmoid_and_bce_stable_at_extremes():
    z = Tensor(np.array([[-50.0, 50.0, -800.0, 800.0]]), requires_grad=True)
    s = T.sigmoid(z).data
    assert np.all(np.isfinite(s)) and s[0, 3] == 1.0 and s[0, 2] == 0.0
    loss = T.bce_with_logits(z, np.array([[0.0, 1.0, 0.0, 1.0]]))
    assert np.isfinite(loss.item()) and loss.item() < 1e-20
    T.backward(loss)
    assert np.all(np.isfinite(z.grad))


def test_scatter_add_definition():
    x = Tensor(np.array([[1.0, 2.0], [3.0, 4.0]]))
    out = T.scatter_add_rows(x, [0, 0], 2).data
    assert out.tolist() == [[4.0, 6.0], [0.0, 0.0]]


def test_matmul_by_hand():
    a = np.array([[1.0, 2.0, 3.0], [4.0, 5.0, 6.0]])
    b = np.array([[7.0, 8.0], [9.0, 10.0], [11.0, 12.0]])
    assert T.matmul(Tensor(a), Tensor(b)).data.tolist() == [[58.0, 64.0], [139.0, 154.0]]


def test_square_gradient():
    x = Tensor(3.0, requires_grad=True)
    T.backward(x * x)
    assert x.grad == 6.0


def test_disconnected_leaf_zero_grad():
    x = Tensor(np.ones(3), requires_grad=True)
    y = Tensor(np.ones(3), requires_grad=True)
    T.backward(T.tsum(x * 2.0))
    assert np.array_equal(y.grad, np.zeros(3))


def test_non_scalar_and_reuse_errors():
    x = Tensor(np.ones(3), requires_grad=True)
    with pytest.raises(NonScalarLoss):
        T.backward(x * 2.0)
    loss = T.tsum(x * 2.0)
    T.backward(loss)
    with pytest.raises(RuntimeError):
        T.backward(loss)


def test_shape_mismatch():
    with pytest.raises(ShapeMismatch):
        T.matmul(Tensor(np.ones((2, 3))), Tensor(np.ones((2, 3))))
    with pytest.raises(ShapeMismatch):
        Tensor(np.ones((2, 3))) + Tensor(np.ones((3, 2)))
    with pytest.raises(ShapeMismatch):
        T.gather_rows(Tensor(np.ones((2, 3))), [5])


def test_diamond_graph_accumulates():
    x = Tensor(2.0, requires_grad=True)
    y = x * x
    T.backward(y * y + y)
    assert x.grad == pytest.approx(4 * 8 + 2 * 2)


def test_no_grad_builds_no_graph():
    x = Tensor(np.ones(2), requires_grad=True)
    with T.no_grad():
        y = x * 3.0
    assert not y.requires_grad and y.is_leaf


@pytest.mark.parametrize("name", gradcheck.OPS)
def test_op_gradients(name):
    for seed in range(4):
        assert gradcheck.op_error(name, seed) < 1e-4, (name, seed)


def test_segment_softmax_sums_to_one():
    seg = np.array([0, 1, 0, 2, 1, 0])
    s = T.segment_softmax(Tensor(np.arange(6.0)), seg, 3).data
    assert np.allclose(np.bincount(seg, weights=s), 1.0)


def test_indexed_matvec_matches_loop():
    rng = np.random.default_rng(0)
    mats, vecs = rng.standard_normal((3, 4, 5)), rng.standard_normal((7, 5))
    idx = rng.integers(0, 3, 7)
    out = T.indexed_matvec(Tensor(mats), idx, Tensor(vecs)).data
    for e in range(7):
        assert np.allclose(out[e], mats[idx[e]] @ vecs[e], atol=1e-14)


def test_adam_zero_gradient_is_identity():
    p = np.array([1.0, -2.0])
    adam_step([p], [np.zeros(2)], AdamState(), lr=0.1)
    assert p.tolist() == [1.0, -2.0]


def test_adam_first_step_closed_form():
    p = np.array([1.0])
    adam_step([p], [np.array([1.0])], AdamState(), lr=0.01)
    # m_hat = 1, v_hat = 1, step = lr / (1 + eps)
    assert p[0] == pytest.approx(1.0 - 0.01 / (1.0 + 1e-8), abs=1e-15)


def test_adam_weight_decay_is_l2():
    p = np.array([2.0])
    adam_step([p], [np.array([0.0])], AdamState(), lr=0.01, weight_decay=0.5)
    assert p[0] < 2.0


def _trajectory(seed):
    rng = np.random.default_rng(seed)
    w = Tensor(rng.standard_normal((3, 2)), requires_grad=True)
    x = rng.standard_normal((5, 3))
    opt = Adam([w])
    out = []
    for _ in range(20):
        opt.zero_grad()
        h = T.tanh(T.matmul(Tensor(x), w))
        T.backward(T.tsum(h * h))
        opt.step(0.05)
        out.append(w.data.copy())
    return np.stack(out)


def test_adam_bitwise_reproducible():
    assert np.array_equal(_trajectory(4), _trajectory(4))


def test_schedules():
    assert lr_schedule(ScheduleConfig("exponential_steps", lr0=1e-3), step=0) == 1e-3
    cfg = ScheduleConfig("exponential_steps", lr0=1e-3, rate=0.5, decay_steps=840)
    assert lr_schedule(cfg, step=840) == pytest.approx(5e-4, rel=1e-15)
    frac = ScheduleConfig("fractional_span", lr0=2e-3, decay=0.08, span=0.9, epochs=100)
    assert abs(lr_schedule(frac, epoch=90) - 0.08 * 2e-3) < 1e-12
    assert lr_schedule(frac, epoch=99) == lr_schedule(frac, epoch=90)
    assert lr_schedule(frac, epoch=45) == pytest.approx(2e-3 * math.sqrt(0.08), rel=1e-12)
    with pytest.raises(ValueError):
        lr_schedule(ScheduleConfig("nope"))


@given(st.integers(0, 5000))
@settings(max_examples=50, deadline=None)
def test_exponential_schedule_monotone(step):
    cfg = ScheduleConfig("exponential_steps", lr0=1.0, rate=0.5, decay_steps=100)
    assert lr_schedule(cfg, step=step + 1) < lr_schedule(cfg, step=step) <= 1.0


def test_checkpoint_round_trip(tmp_path):
    rng = np.random.default_rng(1)
    tensors = {"a.weight": rng.standard_normal((3, 4)), "b": rng.standard_normal(5), "scalar": np.array(2.5)}
    save_checkpoint(tmp_path / "c.bin", tensors, tmp_path / "c.json")
    back = load_checkpoint(tmp_path / "c.bin")
    assert list(back) == list(tensors)
    for k in tensors:
        assert back[k].shape == tensors[k].shape and np.array_equal(back[k], tensors[k])
    manifest = json.loads((tmp_path / "c.json").read_text())
    assert [(e["name"], e["shape"]) for e in manifest["tensors"]] == [("a.weight", [3, 4]), ("b", [5]), ("scalar", [])]
    (tmp_path / "bad.bin").write_bytes(b"XXXX")
    with pytest.raises(ValueError):
        load_checkpoint(tmp_path / "bad.bin")
