import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from membrane_twin import tensor as T
from membrane_twin.tensor import checkpoint
from membrane_twin.model.networks import AutoEncoder
from membrane_twin.model.chamfer import chamfer_loss
from oracles import conv_transpose_loops, numeric_grad, sampled_grad

RNG = np.random.default_rng(0)


def rel_err(a, b):
    return np.max(np.abs(a - b)) / max(np.max(np.abs(b)), 1e-12)


def grad_check(build, *arrays, h=1e-4):
    """Compare backward() against central differences for every input array."""
    params = [T.Tensor(a, requires_grad=True) for a in arrays]
    build(*params).backward()
    worst = 0.0
    for p in params:
        num = numeric_grad(lambda: float(build(*params).data), p.data, h)
        worst = max(worst, rel_err(p.grad, num))
    return worst


# -- finite-difference checks ------------------------------------------------


def test_grad_linear():
    x, W, b = RNG.normal(size=(3, 7, 4)), RNG.normal(size=(4, 5)), RNG.normal(size=5)
    assert grad_check(lambda x, W, b: T.square(T.linear(x, W, b)).sum(), x, W, b) < 1e-4


def test_grad_relu():
    x = RNG.normal(size=(4, 6))
    x[np.abs(x) < 1e-2] = 0.5  # stay away from the kink
    assert grad_check(lambda x: T.square(T.relu(x) * 1.5).sum(), x) < 1e-4


def test_grad_shared_pointwise_mlp():
    mlp = T.MLP((3, 8, 6), np.random.default_rng(1), final_relu=True)
    pts = RNG.normal(size=(2, 10, 3))
    params = mlp.parameters()

    def f():
        return T.square(mlp(pts)).sum()

    for p in params:
        p.grad = None
    f().backward()
    for p in params:
        num = numeric_grad(lambda: float(f().data), p.data)
        assert rel_err(p.grad, num) < 1e-4


def test_grad_global_max_pool():
    x = RNG.normal(size=(2, 9, 4))
    assert grad_check(lambda x: T.square(T.global_max_pool(x, axis=1)).sum(), x) < 1e-4


def test_grad_conv_transpose():
    x, w, b = RNG.normal(size=(2, 3, 3, 3)), RNG.normal(size=(3, 2, 4, 4)), RNG.normal(size=2)
    f = lambda x, w, b: T.square(T.conv_transpose2d(x, w, b, stride=2, padding=1)).sum()  # noqa: E731
    assert grad_check(f, x, w, b) < 1e-4


def test_grad_reshape_transpose_gather_matmul():
    x = RNG.normal(size=(2, 6, 3))
    idx = RNG.integers(0, 6, size=(2, 8))
    f = lambda x: T.square(T.gather_points(x.reshape(2, 3, 6).transpose(0, 2, 1), idx)).sum()  # noqa: E731
    assert grad_check(f, x) < 1e-4
    a, b = RNG.normal(size=(4, 3)), RNG.normal(size=(3, 5))
    assert grad_check(lambda a, b: T.square(a @ b).mean(), a, b) < 1e-4


def test_grad_chamfer_loss():
    pred = RNG.normal(size=(2, 12, 3))
    gt = RNG.normal(size=(2, 15, 3))
    assert grad_check(lambda p: chamfer_loss(p, gt), pred, h=1e-6) < 1e-4


def test_grad_full_autoencoder_toy():
    ae = AutoEncoder(latent=4, n_points=16, seed=3)
    clouds = np.random.default_rng(5).normal(size=(2, 16, 3)) * [30.0, 30.0, 5.0]

    def f():
        return float(chamfer_loss(ae(clouds), clouds).data)

    ae.zero_grad()
    chamfer_loss(ae(clouds), clouds).backward()
    checked = 0
    for name, p in ae.named_parameters():
        idx, est, smooth = sampled_grad(f, p.data, 6)
        got = p.grad.reshape(-1)[idx]
        # entries whose step straddles a ReLU or max-pool switch are not differentiable there
        scale = max(np.max(np.abs(est)), 1e-12)
        assert np.max(np.abs(got - est)[smooth], initial=0.0) / scale < 1e-4, name
        checked += smooth.sum()
    assert checked >= 80


def test_active_point_encoder_matches_dense_graph():
    ae = AutoEncoder(latent=8, n_points=16, seed=2)
    clouds = np.random.default_rng(6).normal(size=(3, 50, 3)) * 20
    z = ae.encoder(clouds)
    (z * z).sum().backward()
    fast = [p.grad.copy() for p in ae.encoder.parameters()]
    ae.zero_grad()
    from membrane_twin.model.networks import COORD_SCALE
    z2 = ae.encoder(T.Tensor(clouds / COORD_SCALE))
    (z2 * z2).sum().backward()
    assert np.array_equal(z.data, z2.data)
    for a, p in zip(fast, ae.encoder.parameters()):
        assert np.allclose(a, p.grad, rtol=1e-12, atol=1e-14)


def test_chain_of_linears_equals_composed_linear():
    W1, W2 = RNG.normal(size=(4, 3)), RNG.normal(size=(3, 2))
    x = RNG.normal(size=(5, 4))
    a = T.Tensor(x, requires_grad=True)
    T.square(T.linear(T.linear(a, T.Tensor(W1)), T.Tensor(W2))).sum().backward()
    b = T.Tensor(x, requires_grad=True)
    T.square(T.linear(b, T.Tensor(W1 @ W2))).sum().backward()
    assert np.allclose(a.grad, b.grad, rtol=1e-12)


# -- layer contracts ---------------------------------------------------------


def test_conv_transpose_matches_loop_oracle():
    x, w, b = RNG.normal(size=(2, 3, 4, 5)), RNG.normal(size=(3, 2, 4, 4)), RNG.normal(size=2)
    out = T.conv_transpose2d(T.Tensor(x), T.Tensor(w), T.Tensor(b), 2, 1).data
    assert out.shape == (2, 2, 8, 10)
    assert np.allclose(out, conv_transpose_loops(x, w, b, 2, 1), atol=1e-12)


def test_conv_transpose_identity_kernel_3x3():
    x = np.arange(1.0, 10.0).reshape(1, 1, 3, 3)
    w = np.zeros((1, 1, 2, 2))
    w[0, 0, 0, 0] = 1.0
    out = T.conv_transpose2d(T.Tensor(x), T.Tensor(w), None, stride=2, padding=0).data
    expected = np.zeros((6, 6))
    expected[::2, ::2] = x[0, 0]
    assert out.shape == (1, 1, 6, 6)
    assert np.array_equal(out[0, 0], expected)


def test_linear_zero_weights():
    x = T.Tensor(RNG.normal(size=(3, 4)), requires_grad=True)
    out = T.linear(x, T.Tensor(np.zeros((4, 2)), requires_grad=True), T.Tensor(np.zeros(2)))
    assert np.all(out.data == 0)
    out.sum().backward()
    assert np.all(x.grad == 0)


def test_constant_loss_gives_zero_grad():
    w = T.Tensor(RNG.normal(size=3), requires_grad=True)
    (w * 0.0).sum().backward()
    assert np.all(w.grad == 0)


def test_backward_requires_scalar():
    w = T.Tensor(np.ones(3), requires_grad=True)
    with pytest.raises(ValueError):
        (w * 2.0).backward()


def test_shape_mismatch_raises():
    with pytest.raises(ValueError):
        T.linear(T.Tensor(np.ones((2, 3))), T.Tensor(np.ones((4, 2))))


@given(st.integers(0, 2**31 - 1))
def test_max_pool_permutation_invariant(seed):
    rng = np.random.default_rng(seed)
    x = rng.normal(size=(2, 11, 5))
    perm = rng.permutation(11)
    a = T.global_max_pool(T.Tensor(x), axis=1).data
    b = T.global_max_pool(T.Tensor(x[:, perm]), axis=1).data
    assert np.array_equal(a, b)


def test_max_pool_tie_goes_to_lowest_index():
    x = T.Tensor(np.array([[[1.0], [3.0], [3.0], [2.0]]]), requires_grad=True)
    T.global_max_pool(x, axis=1).sum().backward()
    assert x.grad.ravel().tolist() == [0.0, 1.0, 0.0, 0.0]


def test_encoder_permutation_invariant():
    ae = AutoEncoder(latent=6, n_points=16, seed=1)
    c = RNG.normal(size=(1, 40, 3)) * 20
    with T.no_grad():
        a = ae.encoder(c).data
        b = ae.encoder(c[:, RNG.permutation(40)]).data
    assert np.array_equal(a, b)


def test_no_grad_records_nothing():
    w = T.Tensor(np.ones(2), requires_grad=True)
    with T.no_grad():
        y = w * 3.0
    assert not y.requires_grad and y._parents == ()


def test_gradients_are_deterministic():
    def run():
        ae = AutoEncoder(latent=4, n_points=16, seed=9)
        clouds = np.random.default_rng(1).normal(size=(2, 30, 3))
        T.square(ae(clouds)).mean().backward()
        return [p.grad.copy() for p in ae.parameters()]
    assert all(np.array_equal(a, b) for a, b in zip(run(), run()))


# -- optimisers and schedules ------------------------------------------------


def scalar_adam(w, lr, steps, b1=0.9, b2=0.999, eps=1e-8):
    m = v = 0.0
    for t in range(1, steps + 1):
        g = 2 * w
        m = b1 * m + (1 - b1) * g
        v = b2 * v + (1 - b2) * g * g
        w -= lr * (m / (1 - b1 ** t)) / (math.sqrt(v / (1 - b2 ** t)) + eps)
    return w


def test_adam_on_quadratic():
    w = T.Tensor(np.array([1.0]), requires_grad=True)
    opt = T.Adam([w], lr=0.1)
    for _ in range(100):
        opt.zero_grad()
        T.square(w).sum().backward()
        T.adam_step(opt)
    assert abs(w.data[0]) < 1e-2
    assert w.data[0] == pytest.approx(scalar_adam(1.0, 0.1, 100), abs=1e-12)


def test_sgd_momentum_rule():
    w = T.Tensor(np.array([2.0]), requires_grad=True)
    opt = T.SGDMomentum([w], lr=0.1, momentum=0.9)
    ref, buf = 2.0, 0.0
    for k in range(5):
        opt.zero_grad()
        T.square(w).sum().backward()
        T.sgd_momentum_step(opt)
        buf = 0.9 * buf + 2 * ref if k else 2 * ref
        ref -= 0.1 * buf
        assert w.data[0] == pytest.approx(ref, abs=1e-14)


def test_plateau_scheduler():
    assert T.plateau_scheduler([5, 4, 3, 2, 1, 0.5], 1e-3) == 1e-3
    # three stale epochs are tolerated, the fourth cuts the rate
    assert T.plateau_scheduler([1, 1, 1, 1], 1e-3) == 1e-3
    assert T.plateau_scheduler([1, 1, 1, 1, 1], 1e-3) == pytest.approx(2e-4)
    # improvements smaller than the threshold count as stale
    assert T.plateau_scheduler([1, 1 - 1e-9, 1 - 2e-9, 1 - 3e-9, 1 - 4e-9], 1e-3) == pytest.approx(2e-4)


def test_cosine_scheduler():
    assert T.cosine_scheduler(0, 1e-3, 100) == 1e-3
    assert T.cosine_scheduler(50, 1e-3, 100) == pytest.approx(5e-4)
    assert T.cosine_scheduler(100, 1e-3, 100) == pytest.approx(0.0, abs=1e-18)


def test_early_stop():
    assert not T.early_stop([3, 2, 1], 2)
    assert T.early_stop([1, 2, 3], 2)
    assert not T.early_stop([1, 2, 0.5, 0.6], 2)


# -- checkpoints -------------------------------------------------------------


def test_checkpoint_round_trip(tmp_path):
    ae = AutoEncoder(latent=4, n_points=16, seed=0)
    checkpoint.save(tmp_path / "a.ckpt", ae, ae.arch)
    other = AutoEncoder(latent=4, n_points=16, seed=1)
    assert other.checksum() != ae.checksum()
    checkpoint.load_into(tmp_path / "a.ckpt", other, other.arch)
    assert other.checksum() == ae.checksum()


def test_checkpoint_rejects_wrong_arch_and_corruption(tmp_path):
    ae = AutoEncoder(latent=4, n_points=16, seed=0)
    path = tmp_path / "a.ckpt"
    checkpoint.save(path, ae, ae.arch)
    with pytest.raises(checkpoint.CheckpointError):
        checkpoint.load_into(path, AutoEncoder(latent=5, n_points=16), AutoEncoder(5, 16).arch)
    blob = bytearray(path.read_bytes())
    blob[100] ^= 1
    with pytest.raises(checkpoint.CheckpointError):
        checkpoint.loads(bytes(blob))
    with pytest.raises(checkpoint.CheckpointError):
        checkpoint.loads(b"XXXX" + bytes(blob[4:]))


def test_checkpoint_layout(tmp_path):
    arrays = [np.arange(6.0).reshape(2, 3)]
    blob = checkpoint.dumps({"model": "x"}, arrays)
    assert blob[:4] == b"MBCK"
    assert np.frombuffer(blob[-4 - 48:-4], "<f8").tolist() == list(range(6))
