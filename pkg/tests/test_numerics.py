import numpy as np
import pytest

from stage_world import numerics as nx


def _tensor(rng, *shape):
    return nx.Tensor(rng.normal(0.0, 1.0, shape))


def _naive_conv(x, kernel):
    c_in, height, width = x.shape
    c_out = kernel.shape[0]
    padded = np.pad(x.astype(np.float64), ((0, 0), (1, 1), (1, 1)))
    out = np.zeros((c_out, height, width))
    for o in range(c_out):
        for i in range(height):
            for j in range(width):
                total = 0.0
                for c in range(c_in):
                    for ki in range(3):
                        for kj in range(3):
                            total += kernel[o, c, ki, kj] * padded[c, i + ki, j + kj]
                out[o, i, j] = total
    return out


def test_matmul_identity_and_permutation():
    rng = nx.make_rng(0, "matmul")
    a = _tensor(rng, 3, 3)
    np.testing.assert_allclose(nx.matmul(nx.Tensor(np.eye(3)), a).data, a.data, atol=1e-6)

    out = nx.matmul(nx.Tensor([[1, 2], [3, 4]]), nx.Tensor([[0, 1], [1, 0]]))
    np.testing.assert_array_equal(out.data, [[2, 1], [4, 3]])


def test_matmul_matches_triple_loop():
    rng = nx.make_rng(1, "matmul")
    a, b = _tensor(rng, 5, 4), _tensor(rng, 4, 3)
    expected = np.zeros((5, 3))
    for i in range(5):
        for j in range(3):
            for k in range(4):
                expected[i, j] += float(a.data[i, k]) * float(b.data[k, j])
    np.testing.assert_allclose(nx.matmul(a, b).data, expected, rtol=1e-5, atol=1e-6)


def test_matmul_rejects_mismatched_shapes():
    rng = nx.make_rng(0, "shape")
    with pytest.raises(nx.ShapeError):
        nx.matmul(_tensor(rng, 2, 3), _tensor(rng, 2, 3))


def test_conv2d_delta_kernel_sums_channels():
    rng = nx.make_rng(2, "conv")
    x = _tensor(rng, 3, 5, 6)
    kernel = np.zeros((1, 3, 3, 3))
    kernel[0, :, 1, 1] = 1.0
    out = nx.conv2d(x, nx.Tensor(kernel))
    np.testing.assert_allclose(out.data[0], x.data.sum(axis=0), atol=1e-5)


def test_conv2d_constant_field_interior():
    x = nx.Tensor(np.full((2, 5, 5), 0.5))
    out = nx.conv2d(x, nx.Tensor(np.ones((1, 2, 3, 3))))
    np.testing.assert_allclose(out.data[0, 1:-1, 1:-1], 9 * 0.5 * 2, atol=1e-6)


def test_conv2d_matches_direct_loops():
    rng = nx.make_rng(3, "conv")
    x, kernel = _tensor(rng, 2, 4, 5), _tensor(rng, 3, 2, 3, 3)
    np.testing.assert_allclose(nx.conv2d(x, kernel).data, _naive_conv(x.data, kernel.data), atol=1e-5)


def test_group_norm_constant_input_is_zero():
    out = nx.group_norm(nx.Tensor(np.full((4, 3, 3), 2.5)), groups=2)
    np.testing.assert_allclose(out.data, 0.0, atol=1e-6)


def test_group_norm_single_group_matches_layer_statistics():
    rng = nx.make_rng(4, "norm")
    x = _tensor(rng, 4, 3, 3)
    data = x.data.astype(np.float64)
    expected = (data - data.mean()) / np.sqrt(data.var() + nx.GROUP_NORM_EPS)
    np.testing.assert_allclose(nx.group_norm(x, groups=1).data, expected, atol=1e-5)


def test_group_norm_group_means_vanish():
    rng = nx.make_rng(5, "norm")
    out = nx.group_norm(_tensor(rng, 8, 4, 4), groups=4, weight=nx.Tensor(np.ones(8)), bias=nx.Tensor(np.zeros(8)))
    means = out.data.astype(np.float64).reshape(4, -1).mean(axis=1)
    assert np.all(np.abs(means) < 1e-6)


def test_group_norm_rejects_indivisible_groups():
    with pytest.raises(nx.ShapeError):
        nx.group_norm(nx.Tensor(np.zeros((3, 2, 2))), groups=2)


def test_attention_single_key_returns_value_row():
    rng = nx.make_rng(6, "attn")
    q, kv = _tensor(rng, 4, 3), _tensor(rng, 1, 3)
    wq, wk, wv = (_tensor(rng, 3, 3) for _ in range(3))
    out, weights = nx.cross_attention(q, kv, wq, wk, wv, return_weights=True)
    value_row = kv.data.astype(np.float64) @ wv.data.astype(np.float64)
    np.testing.assert_allclose(weights.data, 1.0)
    np.testing.assert_allclose(out.data, np.repeat(value_row, 4, axis=0), atol=1e-5)


def test_attention_rows_sum_to_one():
    rng = nx.make_rng(7, "attn")
    q, kv = _tensor(rng, 6, 4), _tensor(rng, 9, 4)
    wq, wk, wv = (_tensor(rng, 4, 4) for _ in range(3))
    _, weights = nx.cross_attention(q, kv, wq, wk, wv, return_weights=True)
    np.testing.assert_allclose(weights.data.sum(axis=1), 1.0, atol=1e-6)


def test_attention_hand_sized_case():
    q = nx.Tensor([[1.0, 0.0], [0.0, 2.0]])
    kv = nx.Tensor([[1.0, 1.0], [2.0, -1.0]])
    eye = nx.Tensor(np.eye(2))
    out = nx.cross_attention(q, kv, eye, eye, eye)

    expected = []
    for qi in ([1.0, 0.0], [0.0, 2.0]):
        scores = [(qi[0] * k[0] + qi[1] * k[1]) / np.sqrt(2.0) for k in ([1.0, 1.0], [2.0, -1.0])]
        e0, e1 = np.exp(scores[0]), np.exp(scores[1])
        w0, w1 = e0 / (e0 + e1), e1 / (e0 + e1)
        expected.append([w0 * 1.0 + w1 * 2.0, w0 * 1.0 + w1 * -1.0])
    np.testing.assert_allclose(out.data, expected, atol=1e-6)


def test_dct_of_constant_is_dc_only():
    coef = nx.dct2(nx.Tensor(np.full((8, 8), 0.7))).data
    assert abs(coef[0, 0]) > 0
    coef[0, 0] = 0.0
    np.testing.assert_allclose(coef, 0.0, atol=1e-5)


def test_dct_round_trip_and_energy():
    rng = nx.make_rng(8, "dct")
    x = _tensor(rng, 16, 16)
    coef = nx.dct2(x)
    np.testing.assert_allclose(nx.idct2(coef).data, x.data, atol=1e-5)
    energy = float(np.sum(x.data.astype(np.float64) ** 2))
    assert abs(energy - float(np.sum(coef.data.astype(np.float64) ** 2))) < 1e-4 * max(energy, 1.0)


def test_backward_quadratic_and_disconnected_params():
    store = nx.ParamStore()
    p = store.add("p", np.array([1.0, -2.0, 0.5]))
    store.add("unused", np.ones(2))
    tape = nx.Tape()
    tape.watch(store)
    with tape:
        loss = nx.sum_all(nx.mul(p, p))
    grads = nx.backward(tape, loss)
    np.testing.assert_allclose(grads["p"], 2.0 * p.data)
    np.testing.assert_array_equal(grads["unused"], np.zeros(2))


def test_backward_requires_recorded_loss():
    store = nx.ParamStore()
    store.add("p", np.ones(2))
    tape = nx.Tape()
    tape.watch(store)
    with tape:
        loss = nx.sum_all(nx.Tensor(np.ones(2)))
    with pytest.raises(nx.NumericsError):
        nx.backward(tape, loss)


def test_two_layer_net_matches_finite_differences():
    rng = nx.make_rng(9, "toy")
    with nx.precision(np.float64):
        store = nx.ParamStore()
        for name, shape in (("w1", (4, 5)), ("b1", (5,)), ("w2", (5, 2)), ("b2", (2,))):
            store.add(name, rng.normal(0.0, 0.5, shape))
        x = nx.Tensor(rng.normal(0.0, 1.0, (3, 4)))
        target = rng.normal(0.0, 1.0, (3, 2))

        def loss():
            hidden = nx.silu(nx.linear(x, store["w1"], store["b1"]))
            out = nx.linear(hidden, store["w2"], store["b2"])
            return nx.mean_all(nx.mul(nx.sub(out, nx.Tensor(target)), nx.sub(out, nx.Tensor(target))))

        errors = nx.finite_difference_check(loss, store, h=1e-4)
    assert max(errors.values()) < 1e-3


def test_adam_zero_gradient_leaves_params():
    store = nx.ParamStore()
    store.add("p", np.array([1.5, -0.5]))
    nx.adam_step(store, {"p": np.zeros(2)}, nx.AdamState(), lr=0.1)
    np.testing.assert_array_equal(store["p"].data, np.array([1.5, -0.5], dtype=np.float32))


def test_adam_first_step_moves_by_lr():
    store = nx.ParamStore()
    store.add("p", np.array([0.0]))
    nx.adam_step(store, {"p": np.ones(1)}, nx.AdamState(), lr=0.01)
    assert store["p"].data[0] == pytest.approx(-0.01, rel=1e-4)


def test_adam_converges_on_quadratic():
    store = nx.ParamStore()
    store.add("p", np.array([0.0]))
    state = nx.AdamState()
    for _ in range(100):
        p = float(store["p"].data[0])
        nx.adam_step(store, {"p": np.array([2.0 * (p - 3.0)])}, state, lr=0.1)
    assert abs(float(store["p"].data[0]) - 3.0) < 0.1


def test_checkpoint_round_trip(tmp_path):
    rng = nx.make_rng(10, "ckpt")
    store = nx.ParamStore()
    store.add("a.weight", rng.normal(0.0, 1.0, (3, 2)))
    store.add("a.bias", rng.normal(0.0, 1.0, (2,)))
    nx.save_checkpoint(tmp_path / "model", store, {"stage": 1})

    loaded, meta = nx.load_checkpoint(tmp_path / "model")

    assert loaded.names() == store.names()
    for name in store.names():
        np.testing.assert_array_equal(loaded[name].data, store[name].data)
    assert meta == {"stage": 1}


def test_truncated_checkpoint_is_rejected(tmp_path):
    store = nx.ParamStore()
    store.add("w", np.ones((4, 4)))
    bin_path, _ = nx.save_checkpoint(tmp_path / "model", store)
    bin_path.write_bytes(bin_path.read_bytes()[:-8])
    with pytest.raises(nx.CheckpointError):
        nx.load_checkpoint(tmp_path / "model")


def test_missing_checkpoint_is_rejected(tmp_path):
    with pytest.raises(nx.CheckpointError):
        nx.load_checkpoint(tmp_path / "absent")


def test_named_rng_is_reproducible():
    first = nx.make_rng(5, "frame", 3).standard_normal(4)
    second = nx.make_rng(5, "frame", 3).standard_normal(4)
    other = nx.make_rng(5, "frame", 4).standard_normal(4)
    np.testing.assert_array_equal(first, second)
    assert not np.array_equal(first, other)


def test_dropout_needs_rng_in_train_mode():
    x = nx.Tensor(np.ones((2, 2)))
    assert nx.dropout(x, 0.5, None, train_mode=False) is x
    with pytest.raises(nx.NumericsError):
        nx.dropout(x, 0.5, None, train_mode=True)


def test_non_finite_values_are_rejected():
    with pytest.raises(nx.NumericsError):
        nx.Tensor([1.0, np.nan])


def test_precision_switches_dtype():
    assert nx.Tensor([1.0]).data.dtype == np.float32
    with nx.precision(np.float64):
        assert nx.Tensor([1.0]).data.dtype == np.float64
    assert nx.compute_dtype() is np.float32
