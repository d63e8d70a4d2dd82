import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from c3dvqa import checkpoint
from c3dvqa import tensor as T
from c3dvqa.layers import (
    Conv2D,
    Conv3D,
    Linear,
    LossHyperParams,
    avg_pool_spatial,
    eq1_loss,
    global_avg_pool,
)
from c3dvqa.optim import Adam, PlateauScheduler
from c3dvqa.tensor import Tape, Tensor
from oracles import conv2d_oracle_max_error, conv3d_oracle_max_error, naive_conv2d, naive_conv3d


# -- convolution ------------------------------------------------------------------


def test_conv2d_fixed_case_oracle():
    rng = np.random.default_rng(1)
    layer = Conv2D(2, 3, 3, rng=rng)
    x = rng.standard_normal((2, 9, 9)).astype(np.float32)
    want = naive_conv2d(x, layer.weight.data, layer.bias.data, (1, 1), (0, 0))
    assert np.max(np.abs(layer(Tensor(x)).data - want)) <= 1e-5


def test_conv3d_fixed_case_oracle():
    rng = np.random.default_rng(2)
    layer = Conv3D(2, 3, 3, rng=rng)
    x = rng.standard_normal((2, 4, 5, 5)).astype(np.float32)
    want = naive_conv3d(x, layer.weight.data, layer.bias.data, (1, 1, 1), (0, 0, 0))
    assert np.max(np.abs(layer(Tensor(x)).data - want)) <= 1e-5


def test_conv_random_oracles():
    assert conv2d_oracle_max_error(50, seed=10) <= 1e-5
    assert conv3d_oracle_max_error(50, seed=11) <= 1e-5


def test_branch_conv_shape():
    layer = Conv2D(1, 16, 3, stride=2, padding=1)
    assert layer(T.zeros([1, 112, 112])).shape == (16, 56, 56)


def test_conv2d_identity_kernel():
    layer = Conv2D(1, 1, 1)
    layer.weight.data[...] = 1.0
    x = np.random.default_rng(0).standard_normal((1, 5, 7)).astype(np.float32)
    assert np.array_equal(layer(Tensor(x)).data, x)


def test_conv3d_delta_kernel():
    layer = Conv3D(1, 1, 3, padding=1)
    layer.weight.data[...] = 0.0
    layer.weight.data[0, 0, 1, 1, 1] = 1.0
    x = np.random.default_rng(0).standard_normal((1, 4, 5, 6)).astype(np.float32)
    assert np.array_equal(layer(Tensor(x)).data, x)


def test_trunk_chain_shape():
    rng = np.random.default_rng(0)
    x = T.zeros([32, 60, 28, 28])
    c_in = 32
    for c_out in (64, 64, 32, 1):
        x = Conv3D(c_in, c_out, 3, padding=1, rng=rng)(x)
        c_in = c_out
    assert x.shape == (1, 60, 28, 28)


@pytest.mark.parametrize("H", range(8, 113, 8))
def test_branch_quarter_resolution(H):
    a = Conv2D(1, 16, 3, stride=2, padding=1)
    b = Conv2D(16, 16, 3, stride=2, padding=1)
    assert a.output_shape(b.output_shape((H, H))) == (H // 4, H // 4)
    assert b.output_shape(a.output_shape((H, H))) == (H // 4, H // 4)


def test_temporal_extent_preserved():
    layer = Conv3D(1, 1, 3, padding=1)
    for D in range(1, 121):
        assert layer.output_shape((D, 4, 4))[0] == D
    assert layer(T.zeros([1, 1, 4, 4])).shape == (1, 1, 4, 4)


def test_conv_rejects_channel_mismatch():
    with pytest.raises(ValueError, match="channel"):
        Conv2D(2, 3, 3)(T.zeros([3, 8, 8]))


def test_conv_rejects_kernel_larger_than_input():
    with pytest.raises(ValueError):
        Conv2D(1, 1, 5)(T.zeros([1, 3, 3]))


def test_batched_equals_unbatched():
    rng = np.random.default_rng(4)
    layer = Conv3D(2, 3, 3, padding=1, rng=rng)
    x = rng.standard_normal((2, 2, 3, 5, 5)).astype(np.float32)
    both = layer(Tensor(x)).data
    for i in range(2):
        np.testing.assert_allclose(both[i], layer(Tensor(x[i])).data, atol=1e-6)


def test_he_init_statistics():
    layer = Conv3D(32, 64, 3, rng=np.random.default_rng(0))
    std = math.sqrt(2.0 / (32 * 27))
    assert abs(float(layer.weight.data.std()) - std) < 0.05 * std
    assert np.all(layer.bias.data == 0)


# -- pooling and fully connected --------------------------------------------------


def test_gap_constant():
    out = global_avg_pool(T.full([3, 2, 4, 4], 2.5))
    assert out.shape == (3, 2)
    assert np.all(out.data == 2.5)


def test_gap_hand_case():
    x = Tensor(np.arange(1.0, 9.0).reshape(1, 2, 2, 2))
    assert global_avg_pool(x, "spatial").data.tolist() == [[2.5, 6.5]]
    assert global_avg_pool(x, "spatiotemporal").data.tolist() == [4.5]


def test_gap_matches_reduce_mean():
    x = T.randn([2, 3, 4, 5, 6], np.random.default_rng(0))
    assert np.array_equal(global_avg_pool(x).data, T.mean(x, (3, 4)).data)


def test_avg_pool_hand_case():
    x = Tensor(np.arange(16.0).reshape(4, 4))
    assert avg_pool_spatial(x, 2).data.tolist() == [[2.5, 4.5], [10.5, 12.5]]
    with pytest.raises(ValueError):
        avg_pool_spatial(Tensor(np.ones((5, 4))), 2)


def test_linear_matches_numpy():
    rng = np.random.default_rng(0)
    fc = Linear(5, 3, rng=rng)
    fc.bias.data = rng.standard_normal(3).astype(np.float32)
    x = rng.standard_normal((4, 5)).astype(np.float32)
    np.testing.assert_allclose(fc(Tensor(x)).data, x @ fc.weight.data.T + fc.bias.data, atol=1e-6)
    with pytest.raises(ValueError):
        Linear(0, 3)


# -- loss ---------------------------------------------------------------------------


def test_loss_perfect_fit():
    hp = LossHyperParams(1.0, 0.0)
    assert eq1_loss(Tensor([0.3, 0.7]), [0.3, 0.7], [], hp).item() == 0.0


def test_loss_hand_case():
    assert eq1_loss(Tensor([0.5]), [1.0], [], LossHyperParams(1.0, 0.0)).item() == 0.25


def test_loss_penalty_sum_of_squares_oracle():
    rng = np.random.default_rng(0)
    ws = [T.randn(s, rng, dtype=np.float64) for s in [(3, 4), (2, 2, 3), (5,)]]
    oracle = 0.0
    for w in ws:
        for v in w.data.ravel():
            oracle += float(v) * float(v)
    got = eq1_loss(Tensor([0.1], dtype=np.float64), [0.9], ws, LossHyperParams(0.0, 1.0)).item()
    assert abs(got - oracle) <= 1e-9 * oracle


def test_loss_is_batch_mean():
    hp = LossHyperParams(1.0, 0.0)
    assert eq1_loss(Tensor([0.0, 0.0]), [1.0, 3.0], [], hp).item() == 5.0


def test_loss_params_validated():
    with pytest.raises(ValueError):
        LossHyperParams(-1.0, 0.0)
    with pytest.raises(ValueError):
        LossHyperParams(1.0, math.nan)


# -- Adam -----------------------------------------------------------------------------


def test_adam_zero_gradient_is_identity():
    w = Tensor([1.0, -2.0], requires_grad=True)
    opt = Adam([w], lr=0.1)
    before = w.data.copy()
    w.grad = np.zeros(2)
    opt.step()
    assert np.array_equal(w.data, before)


def test_adam_first_step_size():
    w = Tensor(0.0, dtype=np.float64, requires_grad=True)
    opt = Adam([w], lr=1e-4)
    w.grad = np.array(1.0)
    opt.step()
    # m_hat = 1, v_hat = 1 -> step = lr / (1 + eps)
    assert abs(-w.item() - 1e-4 / (1 + 1e-8)) < 1e-15
    assert w.grad is None


def test_adam_quadratic_descent():
    w = Tensor(1.0, dtype=np.float64, requires_grad=True)
    opt = Adam([w], lr=0.1)
    for _ in range(100):
        with Tape() as tape:
            loss = T.mul(w, w)
        tape.backward(loss)
        opt.step()
    assert abs(w.item()) < 0.1


def test_adam_requires_gradients():
    opt = Adam([Tensor([1.0], requires_grad=True)])
    with pytest.raises(ValueError):
        opt.step()


def test_adam_state_congruent():
    w = Tensor(np.ones((2, 3)), requires_grad=True)
    opt = Adam([w])
    for t in range(1, 4):
        w.grad = np.ones((2, 3))
        opt.step()
        assert opt.t == t
        assert opt.m[0].shape == w.shape and opt.v[0].shape == w.shape


# -- plateau scheduler ----------------------------------------------------------------


def decay_epochs(losses, lr=1.0):
    sched = PlateauScheduler(lr=lr)
    out, prev = [], lr
    for epoch, loss in enumerate(losses):
        cur = sched.step(loss)
        if cur < prev:
            out.append(epoch)
        prev = cur
    return out, prev


def test_scheduler_no_plateau():
    epochs, lr = decay_epochs([1.0 / (i + 1) for i in range(20)])
    assert epochs == [] and lr == 1.0


def test_scheduler_single_decay():
    epochs, lr = decay_epochs([1.0] * 6)
    assert epochs == [5]
    assert lr == 0.9


def test_scheduler_constant_twelve():
    epochs, lr = decay_epochs([1.0] * 12, lr=1e-4)
    assert epochs == [5, 10]
    assert lr == 1e-4 * 0.9 * 0.9


def test_scheduler_writes_optimizer_rate():
    opt = Adam([Tensor([1.0], requires_grad=True)], lr=1e-3)
    sched = PlateauScheduler(opt)
    for _ in range(6):
        sched.step(2.0)
    assert opt.lr == pytest.approx(9e-4, rel=0, abs=1e-18)


def test_scheduler_rejects_nan():
    with pytest.raises(FloatingPointError):
        PlateauScheduler(lr=1.0).step(math.nan)


@settings(max_examples=60, deadline=None)
@given(st.lists(st.floats(0.0, 10.0), min_size=1, max_size=60))
def test_scheduler_monotone(losses):
    sched = PlateauScheduler(lr=1.0)
    prev = 1.0
    for loss in losses:
        lr = sched.step(loss)
        assert lr == prev or lr == prev * 0.9
        prev = lr


# -- checkpoint ---------------------------------------------------------------------


def test_checkpoint_round_trip(tmp_path):
    rng = np.random.default_rng(0)
    params = {"a.weight": rng.standard_normal((3, 2, 3, 3)).astype(np.float32),
              "a.bias": np.zeros(3, np.float32),
              "s": np.array(1.5, np.float32)}
    blob = checkpoint.dumps(params)
    back = checkpoint.loads(blob)
    assert list(back) == list(params)
    for k in params:
        assert back[k].tobytes() == params[k].tobytes() and back[k].shape == params[k].shape
    checkpoint.save(tmp_path / "c.bin", params)
    assert (tmp_path / "c.bin").read_bytes() == blob


def test_checkpoint_layout():
    blob = checkpoint.dumps({"w": np.array([1.0, 2.0], np.float32)})
    assert blob[:8] == b"C3DVQAck"
    assert int.from_bytes(blob[8:12], "little") == 1
    assert int.from_bytes(blob[12:16], "little") == 1
    assert len(blob) == 16 + 2 + 1 + 1 + 4 + 8


@pytest.mark.parametrize("mutate", [
    lambda b: b"XXXXXXXX" + b[8:],
    lambda b: b[:-1],
    lambda b: b + b"\0",
    lambda b: b[:8] + (2).to_bytes(4, "little") + b[12:],
])
def test_checkpoint_corruption_detected(mutate):
    blob = checkpoint.dumps({"w": np.ones((2, 2), np.float32)})
    with pytest.raises(checkpoint.CheckpointError):
        checkpoint.loads(mutate(blob))


def test_conv_gradcheck_small():
    from c3dvqa.gradcheck import numeric_grad, relative_error

    rng = np.random.default_rng(0)
    layer = Conv3D(2, 2, 3, stride=(1, 2, 1), padding=1, rng=rng, dtype=np.float64)
    layer.bias.data = rng.standard_normal(2)
    x = Tensor(rng.standard_normal((2, 2, 3, 4, 4)), dtype=np.float64, requires_grad=True)
    up = Tensor(rng.standard_normal(layer(x).shape))

    def f():
        return T.sum(T.mul(layer(x), up))

    with Tape() as tape:
        loss = f()
    tape.backward(loss)
    for p in (x, layer.weight, layer.bias):
        assert relative_error(p.grad, numeric_grad(lambda: float(f().data), p)) <= 1e-3

