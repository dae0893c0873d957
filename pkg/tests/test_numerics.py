import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st
from hypothesis.extra import numpy as hnp

from edgesense import numerics as nx
from edgesense.numerics import (Adam, AdamState, ContractError, DimensionError, ParamLayer, Tensor, adam_step,
                                avg_pool2d, count_ops, dense_forward, finite_diff_grad, load_checkpoint,
                                no_grad, relative_error, save_checkpoint, upsample_nearest)


def _layer(w, b):
    layer = ParamLayer(len(w), len(w[0]))
    layer.weights.data = np.array(w, dtype=float)
    layer.bias.data = np.array(b, dtype=float)
    return layer


# ---------------------------------------------------------------- dense_forward

def test_identity_layer_passes_input_through():
    out = dense_forward(Tensor([1.0, 0.0]), _layer(np.eye(2), [0, 0]))
    assert out.data.tolist() == [1.0, 0.0]


def test_relu_clamps_negative():
    out = dense_forward(Tensor([-3.0]), _layer([[1.0]], [0.0]), "relu")
    assert out.data.tolist() == [0.0]


def test_random_layer_matches_matrix_vector_product(rng):
    layer = ParamLayer(4, 3, rng)
    layer.bias.data = rng.standard_normal(3)
    x = rng.standard_normal(4)
    expected = np.array([sum(x[i] * layer.weights.data[i, j] for i in range(4)) + layer.bias.data[j]
                         for j in range(3)])
    np.testing.assert_allclose(dense_forward(Tensor(x), layer).data, expected, atol=1e-12, rtol=0)


def test_inner_dimension_mismatch_raises(rng):
    with pytest.raises(DimensionError):
        dense_forward(Tensor(np.ones(5)), ParamLayer(4, 3, rng))


def test_unknown_activation_rejected(rng):
    with pytest.raises(ValueError):
        dense_forward(Tensor(np.ones(4)), ParamLayer(4, 3, rng), "tanh")


def test_batched_inference_matches_row_by_row(rng):
    layer = ParamLayer(7, 5, rng)
    x = rng.standard_normal((9, 7))
    with no_grad():
        full = dense_forward(Tensor(x), layer).data
        rows = np.stack([dense_forward(Tensor(x[i:i + 1]), layer).data[0] for i in range(9)])
    assert np.array_equal(full, rows)


# ---------------------------------------------------------------- backward

def test_linear_derivative():
    w = Tensor([0.7], requires_grad=True)
    (w * 2.0).sum().backward()
    assert w.grad.tolist() == [2.0]


def test_dead_relu_has_zero_gradient():
    w = Tensor([[0.5]], requires_grad=True)
    x = Tensor([[-2.0]])
    nx.relu(nx.affine(x, w, Tensor([0.0]))).sum().backward()
    assert w.grad.tolist() == [[0.0]]


def test_backward_on_non_scalar_is_contract_error():
    t = Tensor(np.ones(3), requires_grad=True)
    with pytest.raises(ContractError):
        (t * 2.0).backward()


@pytest.mark.parametrize("seed", range(5))
def test_two_layer_network_matches_finite_differences(seed):
    rng = np.random.default_rng(seed)
    l1, l2 = ParamLayer(5, 6, rng), ParamLayer(6, 3, rng)
    l1.bias.data = rng.standard_normal(6) * 0.3
    x = rng.standard_normal((4, 5))
    y = rng.integers(0, 3, 4)

    def loss():
        h = dense_forward(Tensor(x), l1, "softplus")
        return -nx.gather_mean(nx.log_softmax(dense_forward(h, l2), axis=1), y, axis=1)

    params = l1.parameters() + l2.parameters()
    loss().backward()
    numeric = finite_diff_grad(lambda: loss().item(), params, 1e-4)
    for p, g in zip(params, numeric):
        assert relative_error(p.grad, g) < 1e-4


def _fd_check(build, shape, rng, tol=1e-6):
    x = Tensor(rng.standard_normal(shape), requires_grad=True)
    build(x).backward()
    g = finite_diff_grad(lambda: build(x).item(), [x], 1e-5)[0]
    assert relative_error(x.grad, g) < tol


@pytest.mark.parametrize("name,shape,build", [
    ("pool", (2, 3, 6, 6), lambda x: (avg_pool2d(x, 4) * avg_pool2d(x, 4)).sum()),
    ("upsample", (2, 3, 3, 3), lambda x: (upsample_nearest(x, 6) * upsample_nearest(x, 6)).sum()),
    ("embed", (1, 2, 3, 3), lambda x: (nx.embed_grid(x, 5, 1, 2) * nx.embed_grid(x, 5, 1, 2)).sum()),
    ("transpose", (2, 3, 4), lambda x: (nx.transpose(x, (2, 0, 1)) * Tensor(np.arange(24.0).reshape(4, 2, 3))).sum()),
    ("concat", (2, 3), lambda x: (nx.concat([x, x * x], axis=1) * Tensor(np.arange(12.0).reshape(2, 6))).sum()),
    ("sigmoid", (3, 4), lambda x: (nx.sigmoid(x) * nx.sigmoid(x)).sum()),
    ("log_softmax", (3, 4), lambda x: (nx.log_softmax(x, 1) * Tensor(np.arange(12.0).reshape(3, 4))).sum()),
    ("rms", (2, 6), lambda x: (nx.rms_normalize(x, True) * Tensor(np.arange(12.0).reshape(2, 6))).sum()),
    ("gain", (2, 6), lambda x: (nx.complex_gain(x, [0.3, -1.2], [0.8, 0.4]) * x).sum()),
    ("mean", (3, 4), lambda x: (nx.mean(x * x, axis=0) * Tensor([1.0, 2.0, 3.0, 4.0])).sum()),
])
def test_primitive_gradients(name, shape, build, rng):
    _fd_check(build, shape, rng)


def test_log_of_softplus_gradient(rng):
    _fd_check(lambda x: nx.log(nx.softplus(x) + 1e-6).sum(), (4,), rng)


def test_transpose_rejects_non_permutation():
    with pytest.raises(DimensionError):
        nx.transpose(Tensor(np.ones((2, 3))), (0, 0))


# ---------------------------------------------------------------- finite differences

def test_quadratic_finite_difference():
    w = Tensor([3.0])
    g = finite_diff_grad(lambda: float(w.data[0] ** 2), [w], 1e-4)[0]
    assert abs(g[0] - 6.0) < 1e-6


def test_constant_finite_difference():
    w = Tensor(np.ones(4))
    g = finite_diff_grad(lambda: 7.5, [w], 1e-4)[0]
    assert np.all(np.abs(g) < 1e-9)


# ---------------------------------------------------------------- Adam

def test_zero_gradient_leaves_parameters_unchanged():
    p = Tensor([1.5, -2.0], requires_grad=True)
    opt = Adam([p], lr=0.1)
    p.grad = np.zeros(2)
    opt.step()
    assert p.data.tolist() == [1.5, -2.0]


def test_one_adam_step_by_hand():
    p = Tensor([0.0], requires_grad=True)
    opt = Adam([p], lr=0.1, betas=(0.9, 0.999), eps=1e-8)
    p.grad = np.array([1.0])
    opt.step()
    m_hat = (0.1 * 1.0) / (1 - 0.9)
    v_hat = (0.001 * 1.0) / (1 - 0.999)
    assert p.data[0] == pytest.approx(-0.1 * m_hat / (np.sqrt(v_hat) + 1e-8), abs=1e-12)
    assert p.data[0] == pytest.approx(-0.1, abs=1e-6)


def test_adam_converges_on_quadratic():
    w = Tensor([1.0], requires_grad=True)
    opt = Adam([w], lr=0.1)
    for _ in range(100):
        opt.zero_grad()
        (w * w).sum().backward()
        opt.step()
    assert abs(w.data[0]) < 0.05


def test_adam_step_counter_and_moment_sizes():
    params = [Tensor(np.ones((2, 3)), requires_grad=True), Tensor(np.ones(4), requires_grad=True)]
    state = AdamState.for_params(params)
    assert state.n_params == 10
    for k in range(3):
        for p in params:
            p.grad = np.ones_like(p.data)
        adam_step(params, state)
        assert state.step_count == k + 1


def test_uninitialised_adam_state_is_contract_error():
    with pytest.raises(ContractError):
        adam_step([Tensor([1.0], requires_grad=True)], None)


def test_decoupled_weight_decay():
    p = Tensor([2.0], requires_grad=True)
    state = AdamState.for_params([p], learning_rate=0.1, weight_decay=0.5)
    p.grad = np.zeros(1)
    adam_step([p], state)
    assert p.data[0] == pytest.approx(2.0 * (1 - 0.1 * 0.5))


# ---------------------------------------------------------------- ParamLayer

def test_zero_grad_keeps_values(rng):
    layer = ParamLayer(3, 2, rng)
    before = layer.weights.data.copy()
    dense_forward(Tensor(rng.standard_normal((2, 3))), layer).sum().backward()
    assert layer.grad_weights.shape == layer.weights.shape
    assert layer.grad_bias.shape == layer.bias.shape
    layer.zero_grad()
    assert np.array_equal(layer.weights.data, before)
    assert np.all(layer.grad_weights == 0)


def test_forward_and_gradients_are_deterministic():
    def run():
        rng = np.random.default_rng(5)
        layer = ParamLayer(6, 4, rng)
        x = Tensor(rng.standard_normal((3, 6)))
        out = dense_forward(x, layer, "softplus")
        out.sum().backward()
        return out.data.tobytes(), layer.weights.grad.tobytes()

    assert run() == run()


def test_op_counter_counts_affine_flops(rng):
    layer = ParamLayer(4, 3, rng)
    with count_ops() as ctr:
        dense_forward(Tensor(np.ones((5, 4))), layer)
    assert ctr.flops == 2 * 5 * 4 * 3
    assert ctr.by_op == {"affine": 1}


# ---------------------------------------------------------------- grid ops

@given(hnp.arrays(np.float64, (2, 3, 6, 6), elements=st.floats(-10, 10)), st.sampled_from([1, 2, 3, 6]))
def test_pool_upsample_preserves_block_means(x, k):
    pooled = avg_pool2d(Tensor(x), k)
    back = upsample_nearest(pooled, 6)
    b = 6 // k
    blocks = x.reshape(2, 3, k, b, k, b).mean(axis=(3, 5))
    back_blocks = back.data.reshape(2, 3, k, b, k, b).mean(axis=(3, 5))
    np.testing.assert_allclose(back_blocks, blocks, atol=1e-12)


def test_pool_of_2x2_grid():
    out = avg_pool2d(Tensor(np.array([[[[1.0, 2.0], [3.0, 4.0]]]])), 1)
    assert out.data.item() == 2.5


def test_uneven_pool_covers_every_cell():
    # adaptive pooling 6 -> 4 uses overlapping windows; constant input stays constant
    out = avg_pool2d(Tensor(np.full((1, 1, 6, 6), 3.0)), 4)
    np.testing.assert_allclose(out.data, 3.0, atol=1e-15)


@given(hnp.arrays(np.float64, (3, 5), elements=st.floats(-50, 50)))
def test_outputs_finite_on_finite_input(x):
    t = Tensor(x)
    for out in (nx.softplus(t), nx.sigmoid(t), nx.log_softmax(t, 1), nx.relu(t)):
        assert np.all(np.isfinite(out.data))


@given(hnp.arrays(np.float64, st.tuples(st.integers(1, 4), st.integers(1, 4)),
                  elements=st.floats(-5, 5)))
def test_reshape_preserves_size(x):
    t = Tensor(x).reshape(-1)
    assert t.size == x.size == int(np.prod(x.shape))


# ---------------------------------------------------------------- checkpoint file

def test_checkpoint_roundtrip(tmp_path, rng):
    named = {"a.weight": rng.standard_normal((3, 2)), "a.bias": rng.standard_normal(2), "s": np.array(4.0)}
    path = tmp_path / "w.mibw"
    save_checkpoint(path, named)
    back = load_checkpoint(path)
    assert list(back) == list(named)
    for k in named:
        assert np.array_equal(back[k], named[k])


def test_checkpoint_header_layout(tmp_path):
    path = tmp_path / "w.mibw"
    save_checkpoint(path, {"xy": np.array([[1.0, 2.0]])})
    raw = path.read_bytes()
    assert raw[:4] == b"MIBW"
    assert np.frombuffer(raw[4:12], "<u4").tolist() == [1, 1]
    assert np.frombuffer(raw[12:16], "<u4")[0] == 2 and raw[16:18] == b"xy"
    assert np.frombuffer(raw[18:22], "<u4")[0] == 2
    assert np.frombuffer(raw[22:38], "<u8").tolist() == [1, 2]
    assert np.frombuffer(raw[38:], "<f8").tolist() == [1.0, 2.0]


@pytest.mark.parametrize("mutate", [lambda b: b"XIBW" + b[4:], lambda b: b[:-3], lambda b: b + b"\0"])
def test_corrupt_checkpoint_rejected(tmp_path, mutate):
    path = tmp_path / "w.mibw"
    save_checkpoint(path, {"p": np.ones(3)})
    path.write_bytes(mutate(path.read_bytes()))
    with pytest.raises(Exception):
        load_checkpoint(path)
