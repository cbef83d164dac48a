"""MLP substrate tests: reference forward, finite-difference gradients,
closed-form Adam steps, soft updates, and checkpoint containers."""

import numpy as np
import pytest

from e2nas import nn_core
from e2nas.nn_core import MlpSpec


def reference_forward(params, x):
    """Independent loop-based forward for cross-checking."""
    h = np.array(x, dtype=float)
    n = len(params.weights)
    for i in range(n):
        w, b = params.weights[i], params.biases[i]
        out = np.empty(w.shape[1])
        for j in range(w.shape[1]):
            out[j] = float(np.dot(h, w[:, j])) + b[j]
        h = out if i == n - 1 else np.where(out > 0, out, 0.0)
    return h


def fd_gradients(loss_fn, params, h=1e-5):
    """Central finite differences over every parameter."""
    grads = nn_core.zeros_like_params(params)
    for arr, garr in zip(params.arrays(), grads.arrays()):
        it = np.nditer(arr, flags=["multi_index"])
        for _ in it:
            ix = it.multi_index
            old = arr[ix]
            arr[ix] = old + h
            lp = loss_fn()
            arr[ix] = old - h
            lm = loss_fn()
            arr[ix] = old
            garr[ix] = (lp - lm) / (2 * h)
    return grads


def max_rel_err(a, b):
    worst = 0.0
    for x, y in zip(a.arrays(), b.arrays()):
        denom = np.maximum(np.maximum(np.abs(x), np.abs(y)), 1e-6)
        worst = max(worst, float(np.max(np.abs(x - y) / denom)))
    return worst


def randomize(params, rng, scale=0.7):
    # nonzero biases keep ReLU pre-activations away from the exact kink,
    # where the subgradient convention and finite differences disagree
    for arr in params.arrays():
        arr[...] = scale * rng.normal(size=arr.shape)
    return params


def test_forward_zero_params_gives_zero():
    spec = MlpSpec(4, (5,), 3)
    params = nn_core.init_params(spec, np.random.default_rng(0))
    for arr in params.arrays():
        arr[...] = 0.0
    assert np.all(nn_core.forward(params, np.ones(4)) == 0.0)


def test_forward_identity_single_layer():
    spec = MlpSpec(4, (), 4)
    params = nn_core.init_params(spec, np.random.default_rng(0))
    params.weights[0][...] = np.eye(4)
    params.biases[0][...] = 0.0
    x = np.array([1.0, -2.0, 3.0, 0.5])
    assert np.array_equal(nn_core.forward(params, x), x)


def test_forward_matches_reference():
    rng = np.random.default_rng(1)
    for _ in range(100):
        dims = [int(rng.integers(1, 7)) for _ in range(4)]
        spec = MlpSpec(dims[0], tuple(dims[1:3]), dims[3])
        params = nn_core.init_params(spec, rng)
        x = rng.normal(size=dims[0])
        got = nn_core.forward(params, x)
        want = reference_forward(params, x)
        assert np.max(np.abs(got - want)) <= 1e-12


def test_forward_batched_equals_rowwise():
    rng = np.random.default_rng(2)
    spec = MlpSpec(5, (7, 6), 2)
    params = nn_core.init_params(spec, rng)
    xs = rng.normal(size=(9, 5))
    batched = nn_core.forward(params, xs)
    for i in range(9):
        # GEMM and GEMV accumulate in different orders; only ULP-level drift
        assert np.allclose(batched[i], nn_core.forward(params, xs[i]), rtol=0, atol=1e-12)


def test_forward_shape_error():
    params = nn_core.init_params(MlpSpec(3, (4,), 2), np.random.default_rng(0))
    with pytest.raises(nn_core.ShapeError):
        nn_core.forward(params, np.zeros(5))


def test_backward_matches_finite_differences():
    rng = np.random.default_rng(3)
    for _ in range(20):
        dims = [int(rng.integers(1, 9)) for _ in range(4)]
        spec = MlpSpec(dims[0], tuple(dims[1:3]), dims[3])
        params = randomize(nn_core.init_params(spec, rng), rng)
        x = rng.normal(size=dims[0])
        upstream = rng.normal(size=dims[3])
        grads, _ = nn_core.backward(params, x, upstream)
        fd = fd_gradients(lambda: float(np.dot(upstream, nn_core.forward(params, x))), params)
        assert max_rel_err(grads, fd) <= 1e-4


def test_backward_input_grad_matches_finite_differences():
    rng = np.random.default_rng(4)
    spec = MlpSpec(6, (8,), 4)
    params = nn_core.init_params(spec, rng)
    x = rng.normal(size=6)
    upstream = rng.normal(size=4)
    _, input_grad = nn_core.backward(params, x, upstream)
    h = 1e-5
    for i in range(6):
        xp = x.copy()
        xp[i] += h
        lp = float(np.dot(upstream, nn_core.forward(params, xp)))
        xp[i] -= 2 * h
        lm = float(np.dot(upstream, nn_core.forward(params, xp)))
        fd = (lp - lm) / (2 * h)
        assert abs(fd - input_grad[i]) / max(abs(fd), abs(input_grad[i]), 1e-6) <= 1e-4


def test_backward_zero_upstream_gives_zero_grads():
    rng = np.random.default_rng(5)
    params = nn_core.init_params(MlpSpec(3, (4,), 2), rng)
    grads, input_grad = nn_core.backward(params, rng.normal(size=3), np.zeros(2))
    assert all(np.all(a == 0) for a in grads.arrays())
    assert np.all(input_grad == 0)


def test_backward_linear_net_weight_grad_is_outer_product():
    rng = np.random.default_rng(6)
    params = nn_core.init_params(MlpSpec(4, (), 3), rng)
    x = rng.normal(size=4)
    upstream = rng.normal(size=3)
    grads, _ = nn_core.backward(params, x, upstream)
    assert np.allclose(grads.weights[0], np.outer(x, upstream), atol=1e-14)
    assert np.allclose(grads.biases[0], upstream, atol=1e-14)


def test_backward_cached_acts_matches_plain():
    rng = np.random.default_rng(7)
    params = nn_core.init_params(MlpSpec(5, (6, 6), 3), rng)
    x = rng.normal(size=(4, 5))
    up = rng.normal(size=(4, 3))
    _, acts = nn_core.forward_cached(params, x)
    g1, i1 = nn_core.backward(params, x, up)
    g2, i2 = nn_core.backward(params, x, up, acts=acts)
    assert max_rel_err(g1, g2) == 0.0
    assert np.array_equal(i1, i2)


def test_adam_zero_gradient_changes_nothing():
    rng = np.random.default_rng(8)
    params = nn_core.init_params(MlpSpec(3, (4,), 2), rng)
    before = [a.copy() for a in params.arrays()]
    state = nn_core.adam_init(params)
    nn_core.adam_step(params, nn_core.zeros_like_params(params), state, lr=1e-3)
    assert all(np.array_equal(a, b) for a, b in zip(params.arrays(), before))
    assert all(np.all(m == 0) for m in state.m) and all(np.all(v == 0) for v in state.v)


def test_adam_first_step_closed_form():
    rng = np.random.default_rng(9)
    params = nn_core.init_params(MlpSpec(3, (4,), 2), rng)
    before = [a.copy() for a in params.arrays()]
    grads = nn_core.zeros_like_params(params)
    for g in grads.arrays():
        g[...] = rng.normal(size=g.shape)
    lr = 1e-3
    nn_core.adam_step(params, grads, nn_core.adam_init(params), lr)
    for p, p0, g in zip(params.arrays(), before, grads.arrays()):
        expected = p0 - lr * g / (np.sqrt(g * g) + nn_core.ADAM_EPS)
        assert np.max(np.abs(p - expected)) <= 1e-12


def test_adam_two_runs_bit_identical():
    def run():
        rng = np.random.default_rng(10)
        params = nn_core.init_params(MlpSpec(4, (5,), 3), rng)
        state = nn_core.adam_init(params)
        for _ in range(50):
            grads, _ = nn_core.backward(params, rng.normal(size=4), rng.normal(size=3))
            nn_core.adam_step(params, grads, state, 1e-3)
        return nn_core.flatten(params)

    assert np.array_equal(run(), run())


def test_soft_update_edge_cases():
    rng = np.random.default_rng(11)
    online = nn_core.init_params(MlpSpec(3, (4,), 2), rng)
    target = nn_core.init_params(MlpSpec(3, (4,), 2), rng)
    frozen = target.copy()
    nn_core.soft_update(target, online, tau=0.0)
    assert all(np.array_equal(a, b) for a, b in zip(target.arrays(), frozen.arrays()))
    nn_core.soft_update(target, online, tau=1.0)
    assert all(np.array_equal(a, b) for a, b in zip(target.arrays(), online.arrays()))


def test_soft_update_elementwise_formula():
    rng = np.random.default_rng(12)
    online = nn_core.init_params(MlpSpec(3, (4,), 2), rng)
    target = nn_core.init_params(MlpSpec(3, (4,), 2), rng)
    tau = 0.005
    expected = [tau * o + (1 - tau) * t for t, o in zip(target.arrays(), online.arrays())]
    nn_core.soft_update(target, online, tau)
    for got, want in zip(target.arrays(), expected):
        assert np.max(np.abs(got - want)) <= 1e-15


def test_flatten_unflatten_round_trip():
    rng = np.random.default_rng(13)
    spec = MlpSpec(5, (7, 3), 2)
    params = nn_core.init_params(spec, rng)
    flat = nn_core.flatten(params)
    back = nn_core.unflatten(spec, flat)
    assert all(np.array_equal(a, b) for a, b in zip(params.arrays(), back.arrays()))


def test_container_round_trip(tmp_path):
    rng = np.random.default_rng(14)
    params = nn_core.init_params(MlpSpec(4, (6,), 2), rng)
    state = nn_core.adam_init(params)
    state.t = 7
    for m in state.m:
        m[...] = rng.normal(size=m.shape)
    path = tmp_path / "net.ckpt"
    nn_core.write_container(
        path, [nn_core.params_section("net", params), nn_core.adam_section("opt", state)]
    )
    sections = {name: (meta, payload) for name, meta, payload in nn_core.read_container(path)}
    back = nn_core.params_from_section(*sections["net"])
    assert all(np.array_equal(a, b) for a, b in zip(params.arrays(), back.arrays()))
    opt = nn_core.adam_from_section(*sections["opt"], back)
    assert opt.t == 7
    assert all(np.array_equal(a, b) for a, b in zip(opt.m, state.m))


def test_container_truncated_file_is_format_error(tmp_path):
    path = tmp_path / "net.ckpt"
    params = nn_core.init_params(MlpSpec(4, (6,), 2), np.random.default_rng(0))
    nn_core.write_container(path, [nn_core.params_section("net", params)])
    data = path.read_bytes()
    path.write_bytes(data[: len(data) // 2])
    with pytest.raises(nn_core.CheckpointError):
        nn_core.read_container(path)


def test_container_bad_magic(tmp_path):
    path = tmp_path / "junk.ckpt"
    path.write_bytes(b"not a container at all")
    with pytest.raises(nn_core.CheckpointError):
        nn_core.read_container(path)
