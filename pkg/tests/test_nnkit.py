import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from uatrkit.nnkit import (
    CheckpointError,
    LabelError,
    ModelConfig,
    ModelState,
    NumericGuardError,
    Tensor,
    adam_step,
    cross_entropy,
    forward,
    kl_term,
    load_checkpoint,
    loss_and_grads,
    lr_schedule,
    save_checkpoint,
)
from uatrkit.nnkit import tensor as T
from uatrkit.nnkit.losses import total_loss

from .helpers import numeric_grad, random_compact_model, rel_err


# ---------------------------------------------------------------- losses

def test_cross_entropy_hand_value():
    # -log softmax([1,2,3])[2] = log(e + e^2 + e^3) - 3
    expected = math.log(math.e + math.e ** 2 + math.e ** 3) - 3.0
    got = float(cross_entropy(np.array([[1.0, 2.0, 3.0]]), np.array([2])).data)
    assert got == pytest.approx(expected, abs=1e-12)
    assert got == pytest.approx(0.40761, abs=1e-5)


def test_cross_entropy_is_batch_mean():
    z = np.array([[1.0, 2.0, 3.0], [0.0, 0.0, 0.0]])
    got = float(cross_entropy(z, np.array([2, 1])).data)
    expected = 0.5 * ((math.log(math.e + math.e ** 2 + math.e ** 3) - 3.0) + math.log(3.0))
    assert got == pytest.approx(expected, abs=1e-12)


def test_cross_entropy_rejects_bad_labels():
    with pytest.raises(LabelError):
        cross_entropy(np.zeros((2, 3)), np.array([0, 3]))
    with pytest.raises(LabelError):
        cross_entropy(np.zeros((2, 3)), np.array([0.0, 1.0]))


def test_kl_hand_value():
    z = np.log(np.array([[0.9, 0.1]]))
    zt = np.log(np.array([[0.5, 0.5]]))
    expected = 0.9 * math.log(0.9 / 0.5) + 0.1 * math.log(0.1 / 0.5)
    got = float(kl_term(z, zt).data)
    assert got == pytest.approx(expected, abs=1e-12)
    assert got == pytest.approx(0.36806, abs=1e-5)


def test_kl_of_identical_logits_is_zero():
    z = np.random.default_rng(0).normal(size=(8, 5)) * 3
    assert float(kl_term(z, z).data) == 0.0


@settings(max_examples=60, deadline=None)
@given(arrays(np.float64, (4, 6), elements=st.floats(-30, 30)),
       arrays(np.float64, (4, 6), elements=st.floats(-30, 30)))
def test_kl_nonnegative(a, b):
    assert float(kl_term(a, b).data) >= -1e-12


def test_kl_floor_keeps_saturated_logits_finite():
    z = np.array([[800.0, -800.0]])
    zt = np.array([[-800.0, 800.0]])
    v = float(kl_term(z, zt).data)
    assert math.isfinite(v)
    assert v == pytest.approx(-math.log(1e-12), rel=1e-6)


def test_total_loss_contract():
    rng = np.random.default_rng(1)
    z, zt = rng.normal(size=(3, 4)), rng.normal(size=(3, 4))
    y = np.array([0, 1, 3])
    ce = float(cross_entropy(z, y).data)
    sym = float(kl_term(z, zt).data) + float(kl_term(zt, z).data)
    assert float(total_loss(z, y, 2.0, zt).data) == pytest.approx(ce + 2.0 * sym, abs=1e-12)
    assert float(total_loss(z, y, 0.0, zt).data) == ce
    assert float(total_loss(z, y).data) == ce
    with pytest.raises(ValueError):
        total_loss(z, y, -0.1, zt)
    with pytest.raises(ValueError):
        total_loss(z, y, 1.0)


def test_noisy_logits_do_not_enter_cross_entropy():
    # with alpha = 0 the gradient w.r.t. the noisy logits is exactly zero
    z = Tensor(np.random.default_rng(2).normal(size=(3, 4)), requires_grad=True)
    zt = Tensor(np.random.default_rng(3).normal(size=(3, 4)), requires_grad=True)
    total_loss(z, np.array([0, 1, 2]), 0.0, zt).backward()
    assert not np.any(zt.grad)


# ---------------------------------------------------------------- autodiff ops

def _check_op(fn, *shapes, seed=0, positive=False):
    rng = np.random.default_rng(seed)
    arrs = [rng.uniform(0.5, 2.0, s) if positive else rng.normal(size=s) for s in shapes]
    ts = [Tensor(a.copy(), requires_grad=True) for a in arrs]
    out = fn(*ts)
    w = rng.normal(size=out.shape)
    T.sum_(T.mul(out, w)).backward()
    for i, a in enumerate(arrs):
        def f(v, i=i):
            args = [Tensor(x) for x in arrs]
            args[i] = Tensor(v)
            return float((fn(*args).data * w).sum())
        assert rel_err(ts[i].grad, numeric_grad(f, a)) < 1e-6


@pytest.mark.parametrize("name,fn,shapes,pos", [
    ("add_broadcast", lambda a, b: T.add(a, b), [(3, 4), (4,)], False),
    ("mul_broadcast", lambda a, b: T.mul(a, b), [(2, 3, 4), (3, 1)], False),
    ("matmul_batched", lambda a, b: T.matmul(a, b), [(2, 3, 4), (4, 5)], False),
    ("relu", lambda a: T.relu(a), [(5, 6)], False),
    ("sum_axis", lambda a: T.sum_(a, axis=1), [(3, 4, 2)], False),
    ("mean_all", lambda a: T.mean(a), [(3, 4)], False),
    ("log", lambda a: T.log(a), [(4, 3)], True),
    ("softmax", lambda a: T.softmax(a, axis=1), [(3, 5)], False),
    ("log_softmax", lambda a: T.log_softmax(a, axis=-1), [(3, 5)], False),
    ("reshape", lambda a: T.reshape(a, (6, 2)), [(3, 4)], False),
])
def test_op_gradients(name, fn, shapes, pos):
    _check_op(fn, *shapes, positive=pos)


@pytest.mark.parametrize("stride,kt,kf", [((1, 1), 3, 3), ((1, 2), 1, 3), ((2, 2), 3, 1), ((1, 2), 3, 5)])
def test_conv2d_gradients(stride, kt, kf):
    rng = np.random.default_rng(4)
    x, w, b = rng.normal(size=(2, 5, 7, 3)), rng.normal(size=(kt, kf, 3, 4)), rng.normal(size=4)
    _check_op(lambda x, w, b: T.conv2d(x, w, b, stride=stride), x.shape, w.shape, b.shape)


def test_conv2d_matches_direct_loop():
    rng = np.random.default_rng(5)
    x, w, b = rng.normal(size=(1, 5, 6, 2)), rng.normal(size=(3, 3, 2, 3)), rng.normal(size=3)
    got = T.conv2d(Tensor(x), Tensor(w), Tensor(b), stride=(1, 2)).data
    xp = np.pad(x, ((0, 0), (1, 1), (1, 1), (0, 0)))
    ref = np.zeros((1, 5, 3, 3))
    for t in range(5):
        for f in range(3):
            patch = xp[0, t:t + 3, 2 * f:2 * f + 3, :]
            for c in range(3):
                ref[0, t, f, c] = (patch * w[..., c]).sum() + b[c]
    np.testing.assert_allclose(got, ref, atol=1e-12)


def test_conv2d_output_shape_same_padding():
    out = T.conv2d(Tensor(np.ones((2, 9, 11, 1))), Tensor(np.ones((3, 3, 1, 4))), Tensor(np.zeros(4)), stride=(1, 2))
    assert out.shape == (2, 9, 6, 4)


def test_gradients_accumulate_over_reuse():
    x = Tensor(np.array([1.0, 2.0]), requires_grad=True)
    T.sum_(T.add(T.mul(x, x), x)).backward()
    np.testing.assert_allclose(x.grad, 2 * x.data + 1)


# ---------------------------------------------------------------- model

def test_full_model_gradients_match_finite_differences():
    model, X, y, Xn = random_compact_model(seed=7)
    _, grads, _ = loss_and_grads(model, X, y, 2.0, Xn)
    for name, p in model.params.items():
        def f(v, name=name):
            saved = model.params[name]
            model.params[name] = v
            try:
                return float(total_loss(forward(model, X).z, y, 2.0, forward(model, Xn).z).data)
            finally:
                model.params[name] = saved
        num = numeric_grad(f, p)
        assert np.all(np.abs(grads[name] - num) <= np.maximum(1e-6, 1e-4 * np.abs(num))), name


def test_model_is_invariant_to_time_order_with_unit_time_kernel():
    cfg = ModelConfig(n_classes=3, channels=(3, 4), embed_dim=8, n_heads=2, prune_dim=4)
    model = ModelState.create(cfg, 0)
    X = np.random.default_rng(0).normal(size=(2, 9, 8))
    perm = np.random.default_rng(1).permutation(9)
    a, b = forward(model, X), forward(model, X[:, perm])
    np.testing.assert_allclose(a.z.data, b.z.data, atol=1e-10)
    np.testing.assert_allclose(a.s_raw.data, b.s_raw.data, atol=1e-10)


def test_forward_shapes_and_guard():
    cfg = ModelConfig(n_classes=4, channels=(2, 3), embed_dim=6, n_heads=2, prune_dim=5)
    model = ModelState.create(cfg, 0)
    out = forward(model, np.zeros((3, 7, 10)))
    assert out.z.shape == (3, 4) and out.s_raw.shape == (3, 5) and out.emb.shape == (3, 6)
    bad = np.zeros((1, 7, 10))
    bad[0, 2, 3] = np.nan
    with pytest.raises(NumericGuardError):
        forward(model, bad)
    with pytest.raises(ValueError):
        forward(model, np.zeros((7, 10)))


def test_pruning_path_sends_no_gradient_to_trunk():
    # the pruning layer reads a detached copy of the embedding
    cfg = ModelConfig(n_classes=3, channels=(2,), embed_dim=4, n_heads=1, prune_dim=3)
    model = ModelState.create(cfg, 1)
    params = model.tensors()
    out = forward(model, np.random.default_rng(0).normal(size=(2, 5, 6)), params)
    T.sum_(out.s_raw).backward()
    assert params["prune.w"].grad is not None
    assert all(t.grad is None or not np.any(t.grad) for k, t in params.items() if not k.startswith("prune."))


def test_init_is_deterministic_and_ordered():
    cfg = ModelConfig(n_classes=3)
    a, b = ModelState.create(cfg, 5), ModelState.create(cfg, 5)
    assert list(a.params) == list(b.params)
    assert list(a.params)[:2] == ["stem.w", "stem.b"] and list(a.params)[-2:] == ["prune.w", "prune.b"]
    assert all(np.array_equal(a.params[k], b.params[k]) for k in a.params)
    assert all(not np.any(v) for k, v in a.params.items() if k.endswith(".b"))


# ---------------------------------------------------------------- optimizer

def _adam_oracle(p0, gs, lr, b1=0.9, b2=0.999, eps=1e-8):
    p, m, v = p0, 0.0, 0.0
    for t, g in enumerate(gs, start=1):
        m = b1 * m + (1 - b1) * g
        v = b2 * v + (1 - b2) * g * g
        p = p - lr * (m / (1 - b1 ** t)) / (math.sqrt(v / (1 - b2 ** t)) + eps)
    return p


def test_adam_three_steps_match_scalar_oracle():
    cfg = ModelConfig(n_classes=2, channels=(1,), embed_dim=2, n_heads=1, prune_dim=2)
    model = ModelState.create(cfg, 0)
    p0 = model.params["head.b"].copy()
    gs = [np.array([1.0, -0.3]), np.array([-2.0, 0.7]), np.array([0.5, 0.1])]
    for g in gs:
        adam_step(model, {"head.b": g}, 1e-2)
    for i in range(2):
        assert model.params["head.b"][i] == pytest.approx(_adam_oracle(p0[i], [g[i] for g in gs], 1e-2), abs=1e-15)
    assert model.step == 3


def test_adam_constant_gradient_first_step_is_lr_sized():
    cfg = ModelConfig(n_classes=2, channels=(1,), embed_dim=2, n_heads=1, prune_dim=2)
    model = ModelState.create(cfg, 0)
    before = model.params["head.w"].copy()
    adam_step(model, {"head.w": np.full_like(before, 3.0)}, 1e-3)
    np.testing.assert_allclose(before - model.params["head.w"], 1e-3 * 3.0 / (3.0 + 1e-8))


def test_adam_rejects_non_finite_gradient():
    cfg = ModelConfig(n_classes=2, channels=(1,), embed_dim=2, n_heads=1, prune_dim=2)
    model = ModelState.create(cfg, 0)
    with pytest.raises(NumericGuardError):
        adam_step(model, {"head.b": np.array([np.inf, 0.0])}, 1e-3)


def test_lr_schedule_values():
    assert lr_schedule(5) == pytest.approx(5e-4, abs=1e-18)
    assert lr_schedule(100) == pytest.approx(0.0, abs=1e-18)
    assert lr_schedule(0) == 0.0
    assert lr_schedule(2.5) == pytest.approx(2.5e-4)
    # half way through the decay the rate is half the base
    assert lr_schedule(52.5) == pytest.approx(2.5e-4)
    with pytest.raises(ValueError):
        lr_schedule(101)
    with pytest.raises(ValueError):
        lr_schedule(-1)


@given(st.floats(0, 100), st.floats(0, 100))
def test_lr_schedule_shape(a, b):
    lo, hi = sorted((a, b))
    if hi <= 5:
        assert lr_schedule(lo) <= lr_schedule(hi)
    if lo >= 5:
        assert lr_schedule(lo) >= lr_schedule(hi)
    assert 0 <= lr_schedule(a) <= 5e-4


# ---------------------------------------------------------------- checkpoint

def test_checkpoint_round_trip(tmp_path):
    cfg = ModelConfig(n_classes=3, channels=(2, 3), embed_dim=4, n_heads=2, prune_dim=3)
    model = ModelState.create(cfg, 3)
    save_checkpoint(tmp_path / "m.ckpt", model)
    back = load_checkpoint(tmp_path / "m.ckpt", cfg)
    for k, v in model.params.items():
        np.testing.assert_array_equal(back.params[k], v.astype(np.float32).astype(np.float64))
    assert (tmp_path / "m.ckpt").read_bytes()[:4] == b"ACKP"


def test_checkpoint_rejects_other_architecture(tmp_path):
    cfg = ModelConfig(n_classes=3, channels=(2, 3), embed_dim=4, n_heads=2, prune_dim=3)
    save_checkpoint(tmp_path / "m.ckpt", ModelState.create(cfg, 3))
    with pytest.raises(CheckpointError):
        load_checkpoint(tmp_path / "m.ckpt", ModelConfig(n_classes=4, channels=(2, 3), embed_dim=4, n_heads=2, prune_dim=3))
    (tmp_path / "junk").write_bytes(b"nope")
    with pytest.raises(CheckpointError):
        load_checkpoint(tmp_path / "junk", cfg)
