import math

import numpy as np
import pytest

from amodal_forge import autodiff as ad
from amodal_forge.errors import (
    DegenerateVectorError,
    EmptyMaskError,
    ShapeMismatchError,
    TapeError,
)
from amodal_forge.optim import adamw_init, adamw_step


def t64(arr, rg=True):
    return ad.Tensor(np.asarray(arr), requires_grad=rg, dtype=np.float64)


def naive_conv2d(x, w, b, stride=1):
    """Plain-loop reference, same accumulation order as the float64 path."""
    B, H, W, Cin = x.shape
    kh, kw, _, Cout = w.shape
    ph, pw = kh // 2, kw // 2
    xp = np.pad(x, ((0, 0), (ph, ph), (pw, pw), (0, 0)))
    Ho = (H + 2 * ph - kh) // stride + 1
    Wo = (W + 2 * pw - kw) // stride + 1
    out = np.zeros((B, Ho, Wo, Cout), dtype=x.dtype)
    for bi in range(B):
        for i in range(Ho):
            for j in range(Wo):
                for co in range(Cout):
                    acc = np.zeros((), dtype=x.dtype) + b[co]
                    for di in range(kh):
                        for dj in range(kw):
                            for ci in range(Cin):
                                acc += xp[bi, i * stride + di, j * stride + dj, ci] * w[di, dj, ci, co]
                    out[bi, i, j, co] = acc
    return out


# --- forward semantics --------------------------------------------------------


def test_conv_identity_kernel():
    rng = np.random.default_rng(0)
    x = ad.Tensor(rng.standard_normal((2, 5, 5, 3)))
    w = np.zeros((1, 1, 3, 3), dtype=np.float32)
    for c in range(3):
        w[0, 0, c, c] = 1.0
    y = ad.conv2d(x, ad.Tensor(w), ad.Tensor(np.zeros(3)))
    assert np.array_equal(y.data, x.data)


def test_conv_zero_weights_gives_bias():
    rng = np.random.default_rng(1)
    x = ad.Tensor(rng.standard_normal((1, 4, 4, 2)))
    bias = np.array([0.5, -1.5], dtype=np.float32)
    y = ad.conv2d(x, ad.Tensor(np.zeros((3, 3, 2, 2))), ad.Tensor(bias))
    assert np.allclose(y.data, np.broadcast_to(bias, (1, 4, 4, 2)))


def test_conv_matches_naive_loop_bit_for_bit():
    rng = np.random.default_rng(2)
    for stride, shape, kshape in [
        (1, (2, 9, 9, 4), (3, 3, 4, 3)),
        (2, (2, 8, 8, 4), (3, 3, 4, 2)),
        (1, (1, 7, 5, 2), (5, 5, 2, 4)),
    ]:
        x = rng.standard_normal(shape)
        w = rng.standard_normal(kshape)
        b = rng.standard_normal(kshape[-1])
        got = ad.conv2d(t64(x, rg=False), t64(w, rg=False), t64(b, rg=False), stride=stride)
        want = naive_conv2d(x, w, b, stride=stride)
        assert got.data.tobytes() == want.tobytes()


def test_conv_float32_close_to_float64_path():
    rng = np.random.default_rng(3)
    x = rng.standard_normal((2, 8, 8, 4)).astype(np.float32)
    w = (rng.standard_normal((3, 3, 4, 4)) * 0.2).astype(np.float32)
    b = rng.standard_normal(4).astype(np.float32)
    y32 = ad.conv2d(ad.Tensor(x), ad.Tensor(w), ad.Tensor(b))
    y64 = ad.conv2d(t64(x, False), t64(w, False), t64(b, False))
    assert np.allclose(y32.data, y64.data, atol=1e-5)


def test_conv_shape_errors():
    x = ad.Tensor(np.zeros((1, 4, 4, 3)))
    with pytest.raises(ShapeMismatchError):
        ad.conv2d(x, ad.Tensor(np.zeros((3, 3, 2, 4))), ad.Tensor(np.zeros(4)))
    with pytest.raises(ShapeMismatchError):
        ad.conv2d(x, ad.Tensor(np.zeros((2, 2, 3, 4))), ad.Tensor(np.zeros(4)))


def test_elementwise_definitions():
    assert ad.sigmoid(ad.Tensor(np.zeros(()))).item() == 0.5
    assert ad.leaky_relu(ad.Tensor(np.array(-1.0)), 0.01).item() == pytest.approx(-0.01)
    assert ad.softplus(ad.Tensor(np.zeros(()))).item() == pytest.approx(math.log(2), abs=1e-7)


def test_avg_downsample_constant_and_checkerboard():
    const = ad.Tensor(np.full((1, 4, 4, 2), 3.25))
    assert np.allclose(ad.avg_downsample(const, 2).data, 3.25)
    board = np.indices((6, 6)).sum(axis=0) % 2
    x = ad.Tensor(board[None, :, :, None].astype(np.float32))
    assert np.allclose(ad.avg_downsample(x, 2).data, 0.5)
    with pytest.raises(ShapeMismatchError):
        ad.avg_downsample(ad.Tensor(np.zeros((1, 5, 4, 1))), 2)


def test_masked_mean_full_and_single_pixel():
    rng = np.random.default_rng(4)
    e = rng.standard_normal((2, 6, 5, 3)).astype(np.float32)
    full = ad.masked_mean(ad.Tensor(e), ad.Tensor(np.ones((2, 6, 5, 1))))
    assert np.allclose(full.data, e.mean(axis=(1, 2)), atol=1e-6)
    m = np.zeros((2, 6, 5, 1), dtype=np.float32)
    m[0, 2, 3, 0] = 1.0
    m[1, 0, 0, 0] = 1.0
    single = ad.masked_mean(ad.Tensor(e), ad.Tensor(m))
    assert np.allclose(single.data[0], e[0, 2, 3], atol=1e-7)
    assert np.allclose(single.data[1], e[1, 0, 0], atol=1e-7)


def test_masked_mean_random_vs_loop():
    rng = np.random.default_rng(5)
    e = rng.standard_normal((1, 7, 4, 3))
    m = (rng.random((1, 7, 4, 1)) < 0.4).astype(np.float64)
    if m.sum() == 0:
        m[0, 0, 0, 0] = 1.0
    got = ad.masked_mean(t64(e, False), t64(m, False)).data
    want = np.zeros(3)
    for c in range(3):
        num = den = 0.0
        for i in range(7):
            for j in range(4):
                num += e[0, i, j, c] * m[0, i, j, 0]
                den += m[0, i, j, 0]
        want[c] = num / den
    assert np.allclose(got[0], want, atol=1e-12)


def test_masked_mean_empty_region_raises():
    with pytest.raises(EmptyMaskError):
        ad.masked_mean(ad.Tensor(np.ones((1, 2, 2, 1))), ad.Tensor(np.zeros((1, 2, 2, 1))))


def test_cosine_basics():
    u = np.array([[1.0, 0.0, 0.0], [3.0, 4.0, 0.0]])
    v = np.array([[0.0, 1.0, 0.0], [3.0, 4.0, 0.0]])
    c = ad.cosine(t64(u, False), t64(v, False)).data
    assert c[0] == pytest.approx(0.0)
    assert c[1] == pytest.approx(1.0)
    rng = np.random.default_rng(6)
    a, b = rng.standard_normal((2, 2, 5))
    got = ad.cosine(t64(a, False), t64(b, False)).data
    want = (a * b).sum(axis=1) / (np.linalg.norm(a, axis=1) * np.linalg.norm(b, axis=1))
    assert np.allclose(got, want, atol=1e-12)
    with pytest.raises(DegenerateVectorError):
        ad.cosine(ad.Tensor(np.zeros((1, 3))), ad.Tensor(np.ones((1, 3))))


def test_bce_and_dice_values():
    logits = ad.Tensor(np.zeros((1, 2, 2, 1), dtype=np.float32))
    target = ad.Tensor(np.array([1, 0, 1, 0], dtype=np.float32).reshape(1, 2, 2, 1))
    assert ad.bce_with_logits(logits, target).item() == pytest.approx(math.log(2), abs=1e-7)
    # near-perfect hard prediction drives dice toward 0
    big = ad.Tensor(np.where(target.data > 0.5, 1.0, 0.0).astype(np.float32))
    assert ad.dice_loss(big, target).item() == pytest.approx(0.0, abs=1e-6)
    rng = np.random.default_rng(7)
    p = rng.random((1, 3, 3, 1))
    t = (rng.random((1, 3, 3, 1)) < 0.5).astype(np.float64)
    want = 1 - (2 * (p * t).sum() + 1) / (p.sum() + t.sum() + 1)
    assert ad.dice_loss(t64(p, False), t64(t, False)).item() == pytest.approx(want, abs=1e-12)


def test_bce_stable_at_extreme_logits():
    grid = np.array([-100.0, -50.0, -1.0, 0.0, 1.0, 50.0, 100.0], dtype=np.float32)
    x = ad.Tensor(np.tile(grid, 2).reshape(1, 2, 7, 1), requires_grad=True)
    t = ad.Tensor((np.tile(grid, 2) > 0).astype(np.float32).reshape(1, 2, 7, 1))
    with ad.Tape():
        loss = ad.bce_with_logits(x, t)
    assert np.isfinite(loss.item())
    ad.backward(loss)
    assert np.isfinite(x.grad).all()


def test_upsample_and_concat_and_broadcast():
    x = ad.Tensor(np.arange(4, dtype=np.float32).reshape(1, 2, 2, 1))
    up = ad.upsample_nearest(x, 2)
    assert up.data.shape == (1, 4, 4, 1)
    assert np.array_equal(up.data[0, :2, :2, 0], np.zeros((2, 2)))
    a = ad.Tensor(np.ones((1, 2, 2, 3)))
    b = ad.Tensor(np.zeros((1, 2, 2, 2)))
    cat = ad.concat_channels(a, b)
    assert cat.data.shape == (1, 2, 2, 5)
    v = ad.Tensor(np.array([[1.0, 2.0]]))
    bs = ad.broadcast_spatial(v, 3, 4)
    assert bs.data.shape == (1, 3, 4, 2)
    assert np.all(bs.data[0, :, :, 1] == 2.0)


# --- backward ----------------------------------------------------------------


def test_backward_sum_gives_ones_and_quadratic_gives_x():
    rng = np.random.default_rng(8)
    x = t64(rng.standard_normal((2, 3, 4, 2)))
    with ad.Tape():
        loss = ad.sum_all(x)
    ad.backward(loss)
    assert np.array_equal(x.grad, np.ones_like(x.data))
    x.grad = None
    with ad.Tape():
        loss = ad.scale(ad.sum_all(ad.mul(x, x)), 0.5)
    ad.backward(loss)
    assert np.array_equal(x.grad, x.data)


def test_backward_requires_scalar_and_tape():
    x = t64(np.ones((2, 2)))
    with ad.Tape():
        y = ad.mul(x, x)
    with pytest.raises(TapeError):
        ad.backward(y)
    z = ad.sum_all(ad.Tensor(np.ones(3), requires_grad=True))
    with pytest.raises(TapeError):
        ad.backward(z)  # not recorded (no active tape)


def test_tape_single_use():
    x = t64(np.ones(4))
    with ad.Tape():
        loss = ad.mean_all(ad.mul(x, x))
    ad.backward(loss)
    with pytest.raises(TapeError):
        ad.backward(loss)


def test_grad_accumulates_for_reused_tensor():
    x = t64(np.array(2.0))
    with ad.Tape():
        loss = ad.sum_all(ad.mul(x, x))  # x used twice -> grad 2x
    ad.backward(loss)
    assert x.grad == pytest.approx(4.0)


def test_no_grad_for_non_requiring():
    x = t64(np.ones(3), rg=False)
    y = t64(np.ones(3))
    with ad.Tape():
        loss = ad.sum_all(ad.mul(x, y))
    ad.backward(loss)
    assert x.grad is None and y.grad is not None


# --- gradient checks against central differences ------------------------------

OP_CASES = {}


def _case(name):
    def deco(fn):
        OP_CASES[name] = fn
        return fn

    return deco


def _gc(fn, x, h=1e-4):
    return ad.grad_check(fn, x, h=h)


def test_grad_check_linear_is_machine_precision():
    x = t64(np.random.default_rng(9).standard_normal(5))
    err = _gc(lambda t: ad.sum_all(ad.scale(t, 3.0)), x)
    assert err < 1e-9


def test_grad_check_sigmoid_chain():
    x = t64(np.random.default_rng(10).standard_normal((1, 4, 4, 2)))
    err = _gc(lambda t: ad.mean_all(ad.sigmoid(ad.sigmoid(t))), x)
    assert err < 1e-6


@pytest.mark.parametrize(
    "name",
    [
        "add",
        "sub",
        "mul",
        "scale",
        "sigmoid",
        "leaky_relu",
        "softplus",
        "concat",
        "conv_s1",
        "conv_s2",
        "conv_wrt_w",
        "conv_wrt_b",
        "upsample",
        "avg_down",
        "masked_mean",
        "cosine",
        "linear",
        "broadcast",
        "mean_per_sample",
        "bce",
        "dice",
    ],
)
def test_every_op_grad_check(name):
    rng = np.random.default_rng(hash(name) % 2**32)
    other = t64(rng.standard_normal((2, 4, 4, 3)), rg=False)
    mask = t64((rng.random((2, 4, 4, 1)) < 0.5).astype(float), rg=False)
    if mask.data.sum() == 0:
        mask.data[0, 0, 0, 0] = 1.0
    target = t64((rng.random((2, 4, 4, 3)) < 0.5).astype(float), rg=False)
    w = t64(rng.standard_normal((3, 3, 3, 2)) * 0.4)
    bias = t64(rng.standard_normal(2) * 0.1)
    x = t64(rng.standard_normal((2, 4, 4, 3)))
    fns = {
        "add": lambda t: ad.mean_all(ad.mul(ad.add(t, other), ad.add(t, other))),
        "sub": lambda t: ad.mean_all(ad.mul(ad.sub(t, other), ad.sub(t, other))),
        "mul": lambda t: ad.mean_all(ad.mul(t, other)),
        "scale": lambda t: ad.mean_all(ad.scale(t, -2.5)),
        "sigmoid": lambda t: ad.mean_all(ad.sigmoid(t)),
        "leaky_relu": lambda t: ad.mean_all(ad.leaky_relu(t, 0.01)),
        "softplus": lambda t: ad.mean_all(ad.softplus(t)),
        "concat": lambda t: ad.mean_all(ad.mul(ad.concat_channels(t, other), ad.concat_channels(other, t))),
        "conv_s1": lambda t: ad.mean_all(ad.sigmoid(ad.conv2d(t, w, bias, stride=1))),
        "conv_s2": lambda t: ad.mean_all(ad.sigmoid(ad.conv2d(t, w, bias, stride=2))),
        "upsample": lambda t: ad.mean_all(ad.mul(ad.upsample_nearest(t, 2), ad.upsample_nearest(t, 2))),
        "avg_down": lambda t: ad.mean_all(ad.mul(ad.avg_downsample(t, 2), ad.avg_downsample(t, 2))),
        "masked_mean": lambda t: ad.mean_all(ad.mul(ad.masked_mean(t, mask), ad.masked_mean(t, mask))),
        "mean_per_sample": lambda t: ad.mean_all(ad.softplus(ad.mean_per_sample(t))),
        "bce": lambda t: ad.bce_with_logits(t, target),
        "dice": lambda t: ad.dice_loss(ad.sigmoid(t), target),
    }
    if name == "conv_wrt_w":
        err = _gc(lambda t: ad.mean_all(ad.sigmoid(ad.conv2d(x, t, bias))), w)
    elif name == "conv_wrt_b":
        err = _gc(lambda t: ad.mean_all(ad.sigmoid(ad.conv2d(x, w, t))), bias)
    elif name == "cosine":
        u = t64(rng.standard_normal((3, 5)))
        v = t64(rng.standard_normal((3, 5)), rg=False)
        err = _gc(lambda t: ad.mean_all(ad.cosine(t, v)), u)
    elif name == "linear":
        xv = t64(rng.standard_normal((3, 4)))
        wl = t64(rng.standard_normal((4, 2)))
        bl = t64(rng.standard_normal(2))
        err = max(
            _gc(lambda t: ad.mean_all(ad.sigmoid(ad.linear(t, wl, bl))), xv),
            _gc(lambda t: ad.mean_all(ad.sigmoid(ad.linear(xv, t, bl))), wl),
            _gc(lambda t: ad.mean_all(ad.sigmoid(ad.linear(xv, wl, t))), bl),
        )
    elif name == "broadcast":
        v = t64(rng.standard_normal((2, 3)))
        err = _gc(lambda t: ad.mean_all(ad.sigmoid(ad.broadcast_spatial(t, 3, 3))), v)
    else:
        err = _gc(fns[name], x)
    assert err < 1e-5, f"{name}: max rel err {err}"


# --- optimizer ----------------------------------------------------------------


def test_adamw_zero_grad_zero_decay_is_noop():
    p = ad.Tensor(np.array([1.0, -2.0]), requires_grad=True)
    before = p.data.copy()
    state = adamw_init([p], lr=1e-3, weight_decay=0.0)
    for _ in range(3):
        p.grad = None
        adamw_step([p], state)
    assert np.array_equal(p.data, before)


def test_adamw_first_step_hand_computed():
    p = t64(np.array([1.0, 1.0, 1.0]))
    g = np.array([0.3, -0.02, 5.0])
    p.grad = g.copy()
    lr, eps = 1e-2, 1e-8
    state = adamw_init([p], lr=lr, weight_decay=0.0, eps=eps)
    adamw_step([p], state)
    # step 1 bias correction makes m_hat = g, v_hat = g^2
    want = 1.0 - lr * g / (np.abs(g) + eps)
    assert np.allclose(p.data, want, atol=1e-12)


def test_adamw_converges_on_quadratic_bowl():
    rng = np.random.default_rng(11)
    target = rng.standard_normal(6)
    p = t64(rng.standard_normal(6))
    state = adamw_init([p], lr=5e-2, weight_decay=0.0)
    for _ in range(2000):
        p.grad = None
        with ad.Tape():
            diff = ad.sub(p, t64(target, rg=False))
            loss = ad.scale(ad.sum_all(ad.mul(diff, diff)), 0.5)
        ad.backward(loss)
        adamw_step([p], state)
        if np.abs(p.data - target).max() < 1e-4:
            break
    assert np.abs(p.data - target).max() < 1e-4


def test_adamw_decoupled_decay_shrinks_params():
    p = ad.Tensor(np.array([2.0]), requires_grad=True)
    state = adamw_init([p], lr=0.1, weight_decay=0.5)
    p.grad = None
    adamw_step([p], state)
    assert p.data[0] == pytest.approx(2.0 - 0.1 * 0.5 * 2.0)


# --- checkpoint I/O -----------------------------------------------------------


def test_checkpoint_round_trip(tmp_path):
    rng = np.random.default_rng(12)
    params = {
        "enc.w": ad.Tensor(rng.standard_normal((3, 3, 2, 4)).astype(np.float32)),
        "enc.b": ad.Tensor(np.zeros(4, dtype=np.float32)),
    }
    path = tmp_path / "model.ckpt"
    ad.save_checkpoint(path, params, topology={"kind": "demo", "depths": [1, 3]})
    topo, loaded = ad.load_checkpoint(path)
    assert topo == {"kind": "demo", "depths": [1, 3]}
    assert set(loaded) == {"enc.w", "enc.b"}
    assert np.array_equal(loaded["enc.w"], params["enc.w"].data)


def test_checkpoint_deterministic_bytes(tmp_path):
    rng = np.random.default_rng(13)
    params = {"a": ad.Tensor(rng.standard_normal(5).astype(np.float32))}
    p1, p2 = tmp_path / "a.ckpt", tmp_path / "b.ckpt"
    ad.save_checkpoint(p1, params, topology={"x": 1})
    ad.save_checkpoint(p2, params, topology={"x": 1})
    assert p1.read_bytes() == p2.read_bytes()


def test_checkpoint_corrupt_header(tmp_path):
    path = tmp_path / "bad.ckpt"
    path.write_bytes(b"not json\n\x00\x00")
    from amodal_forge.errors import CheckpointError

    with pytest.raises(CheckpointError):
        ad.load_checkpoint(path)
