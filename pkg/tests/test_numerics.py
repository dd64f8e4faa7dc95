import math
import zlib

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from hiergeo import numerics as nx
from hiergeo.numerics import Parameter, Tensor


def naive_matmul(a, b):
    m, k = a.shape
    _, n = b.shape
    out = np.zeros((m, n))
    for i in range(m):
        for j in range(n):
            s = 0.0
            for t in range(k):
                s += a[i, t] * b[t, j]
            out[i, j] = s
    return out


class TestMatmul:
    def test_identity(self):
        a = np.random.default_rng(0).normal(size=(3, 3))
        np.testing.assert_array_equal(nx.matmul(Tensor(np.eye(3)), Tensor(a)).data, a)

    def test_scalar_case(self):
        assert nx.matmul(Tensor([[2.0]]), Tensor([[3.0]])).data.tolist() == [[6.0]]

    def test_against_triple_loop(self):
        rng = np.random.default_rng(1)
        a, b = rng.normal(size=(5, 4)), rng.normal(size=(4, 3))
        np.testing.assert_allclose(nx.matmul(Tensor(a), Tensor(b)).data, naive_matmul(a, b), atol=1e-12, rtol=0)

    def test_mismatch_names_shapes(self):
        with pytest.raises(nx.ShapeError, match=r"\(2, 3\).*\(4, 5\)"):
            nx.matmul(Tensor(np.ones((2, 3))), Tensor(np.ones((4, 5))))


class TestSoftmax:
    def test_symmetric(self):
        np.testing.assert_array_equal(nx.softmax(Tensor([0.0, 0.0]), axis=0).data, [0.5, 0.5])

    @given(st.floats(-50, 50))
    def test_shift_invariance(self, c):
        x = np.random.default_rng(2).normal(size=(4, 6))
        np.testing.assert_allclose(nx.softmax(Tensor(x + c), -1).data, nx.softmax(Tensor(x), -1).data,
                                   atol=1e-12, rtol=0)

    def test_high_precision_oracle(self):
        # mpmath, 40 digits: exp(k) / sum exp(1..3)
        expected = [0.0900305731703804579980221, 0.2447284710547976524729596, 0.6652409557748218895290183]
        np.testing.assert_allclose(nx.softmax(Tensor([1.0, 2.0, 3.0]), 0).data, expected, rtol=1e-15, atol=0)

    def test_bad_axis(self):
        with pytest.raises(nx.ShapeError):
            nx.softmax(Tensor(np.ones((2, 2))), axis=2)

    def test_rows_are_distributions(self):
        x = np.random.default_rng(3).normal(size=(20, 9)) * 10
        p = nx.softmax(Tensor(x), -1).data
        assert (p >= 0).all()
        np.testing.assert_allclose(p.sum(-1), 1.0, atol=1e-9)


class TestLayerNorm:
    ones, zeros = Tensor(np.ones(5)), Tensor(np.zeros(5))

    def test_constant_row(self):
        out = nx.layer_norm(Tensor(np.full((2, 5), 3.7)), self.ones, self.zeros)
        np.testing.assert_array_equal(out.data, 0.0)

    def test_moments(self):
        x = np.random.default_rng(4).normal(size=(10, 5)) * 3 + 1
        out = nx.layer_norm(Tensor(x), self.ones, self.zeros, eps=1e-12).data
        np.testing.assert_allclose(out.mean(-1), 0, atol=1e-9)
        np.testing.assert_allclose(out.var(-1), 1, atol=1e-9)

    def test_gamma_linearity(self):
        x = Tensor(np.random.default_rng(5).normal(size=(3, 5)))
        a = nx.layer_norm(x, self.ones, self.zeros).data
        b = nx.layer_norm(x, Tensor(np.full(5, 2.0)), self.zeros).data
        np.testing.assert_allclose(b, 2 * a, rtol=1e-15)

    def test_shape_mismatch(self):
        with pytest.raises(nx.ShapeError):
            nx.layer_norm(Tensor(np.ones((2, 4))), self.ones, self.zeros)


def _random_weights(rng, d):
    mats = [Tensor(rng.normal(size=(d, d)) / math.sqrt(d)) for _ in range(4)]
    vecs = [Tensor(rng.normal(size=d) * 0.1) for _ in range(4)]
    return nx.AttentionWeights(mats[0], vecs[0], mats[1], vecs[1], mats[2], vecs[2], mats[3], vecs[3])


class TestAttention:
    def test_single_token_closed_form(self):
        rng = np.random.default_rng(6)
        w = _random_weights(rng, 8)
        x = rng.normal(size=(1, 8))
        out, probs = nx.multi_head_self_attention(Tensor(x), w, heads=2)
        expected = (x @ w.wv.data + w.bv.data) @ w.wo.data + w.bo.data
        np.testing.assert_allclose(out.data, expected, atol=1e-12)
        np.testing.assert_array_equal(probs, 1.0)

    def test_self_attention_permutation_equivariant(self):
        rng = np.random.default_rng(7)
        w = _random_weights(rng, 8)
        x = rng.normal(size=(6, 8))
        perm = rng.permutation(6)
        a, _ = nx.multi_head_self_attention(Tensor(x), w, heads=4)
        b, _ = nx.multi_head_self_attention(Tensor(x[perm]), w, heads=4)
        np.testing.assert_allclose(b.data, a.data[perm], atol=1e-12)

    def test_rows_sum_to_one(self):
        rng = np.random.default_rng(8)
        _, probs = nx.multi_head_self_attention(Tensor(rng.normal(size=(7, 8))), _random_weights(rng, 8), heads=2)
        np.testing.assert_allclose(probs.sum(-1), 1.0, atol=1e-9)

    def test_indivisible_heads(self):
        rng = np.random.default_rng(9)
        with pytest.raises(nx.ShapeError, match="divisible"):
            nx.multi_head_self_attention(Tensor(np.ones((2, 6))), _random_weights(rng, 6), heads=4)

    def test_cross_single_memory(self):
        rng = np.random.default_rng(10)
        _, probs = nx.cross_attention(Tensor(rng.normal(size=(5, 8))), Tensor(rng.normal(size=(1, 8))),
                                      _random_weights(rng, 8), heads=2)
        np.testing.assert_array_equal(probs, 1.0)

    def test_cross_memory_permutation_invariant(self):
        rng = np.random.default_rng(11)
        w = _random_weights(rng, 8)
        q, m = rng.normal(size=(4, 8)), rng.normal(size=(6, 8))
        a, _ = nx.cross_attention(Tensor(q), Tensor(m), w, heads=2)
        b, _ = nx.cross_attention(Tensor(q), Tensor(m[rng.permutation(6)]), w, heads=2)
        np.testing.assert_allclose(a.data, b.data, atol=1e-12)

    def test_cross_identity_projection_oracle(self):
        # mpmath: e^(1/sqrt 2) / (e^(1/sqrt 2) + 1) and its complement
        expected = [[0.6697615493266569256167949, 0.3302384506733430743832051]]
        out, _ = nx.cross_attention(Tensor([[1.0, 0.0]]), Tensor(np.eye(2)), nx.AttentionWeights.identity(2))
        np.testing.assert_allclose(out.data, expected, rtol=1e-14)

    def test_values_equal_keys_mode(self):
        rng = np.random.default_rng(12)
        w = _random_weights(rng, 4)
        q, m = rng.normal(size=(2, 4)), rng.normal(size=(3, 4))
        out, probs = nx.cross_attention(Tensor(q), Tensor(m), w, values_equal_keys=True)
        k = m @ w.wk.data + w.bk.data
        np.testing.assert_allclose(out.data, (probs[0] @ k) @ w.wo.data + w.bo.data, atol=1e-12)


def _direct_ce(logits, targets):
    import mpmath as mp
    mp.mp.dps = 30
    total = mp.mpf(0)
    for row, t in zip(logits, targets):
        z = mp.fsum(mp.e ** mp.mpf(float(v)) for v in row)
        total += mp.log(z) - mp.mpf(float(row[t]))
    return float(total / len(targets))


class TestCrossEntropy:
    def test_uniform(self):
        assert nx.cross_entropy(Tensor(np.zeros((1, 4))), [2]).item() == pytest.approx(math.log(4), abs=1e-15)

    def test_one_hot_limit(self):
        losses = []
        for mag in (1, 10, 100):
            logits = np.zeros((1, 3))
            logits[0, 1] = mag
            losses.append(nx.cross_entropy(Tensor(logits), [1]).item())
        assert losses[0] > losses[1] > losses[2] >= 0
        assert losses[2] < 1e-40

    def test_direct_oracle(self):
        rng = np.random.default_rng(13)
        logits = rng.normal(size=(3, 5)) * 2
        targets = [4, 0, 2]
        assert nx.cross_entropy(Tensor(logits), targets).item() == pytest.approx(_direct_ce(logits, targets), abs=1e-10)

    def test_target_out_of_range(self):
        with pytest.raises(IndexError):
            nx.cross_entropy(Tensor(np.zeros((2, 3))), [0, 3])


class TestBackward:
    def test_sum(self):
        p = Parameter(np.random.default_rng(14).normal(size=(3, 2)))
        nx.backward(nx.tsum(p))
        np.testing.assert_array_equal(p.grad, 1.0)

    def test_square(self):
        p = Parameter(np.random.default_rng(15).normal(size=(4,)))
        nx.backward(nx.tsum(p * p))
        np.testing.assert_allclose(p.grad, 2 * p.data, rtol=1e-15)

    def test_accumulates_until_zero_grad(self):
        p = Parameter(np.ones(3))
        nx.backward(nx.tsum(p))
        nx.backward(nx.tsum(p))
        np.testing.assert_array_equal(p.grad, 2.0)
        p.zero_grad()
        np.testing.assert_array_equal(p.grad, 0.0)

    def test_non_scalar(self):
        with pytest.raises(nx.ShapeError, match="scalar"):
            nx.backward(Parameter(np.ones(3)) * 2.0)

    def test_shared_subexpression(self):
        p = Parameter(np.array([1.5, -2.0]))
        y = p * p
        nx.backward(nx.tsum(y * y + y))  # p^4 + p^2
        np.testing.assert_allclose(p.grad, 4 * p.data ** 3 + 2 * p.data)

    def test_no_grad_skips_tape(self):
        p = Parameter(np.ones(2))
        with nx.no_grad():
            y = p * 3.0
        assert not y.requires_grad


def _unary_cases():
    return {
        "exp": lambda x: nx.exp(x),
        "log": lambda x: nx.log(nx.exp(x) + 1.0),
        "tanh": nx.tanh,
        "gelu": nx.gelu,
        "softmax": lambda x: nx.softmax(x, -1),
        "log_softmax": lambda x: nx.log_softmax(x, 0),
        "swapaxes": lambda x: nx.swapaxes(x, 0, 1),
        "reshape": lambda x: nx.reshape(x, (-1,)),
        "index": lambda x: x[np.array([0, 2, 2]), 1:],
        "mean": lambda x: nx.mean(x, axis=1),
        "div": lambda x: x / (x * x + 1.0),
    }


class TestGradients:
    """Every op against central differences; relative error < 1e-4 in 64-bit."""

    @pytest.mark.parametrize("name", sorted(_unary_cases()))
    def test_unary(self, name):
        fn = _unary_cases()[name]
        rng = np.random.default_rng(zlib.crc32(name.encode()))
        p = Parameter(rng.normal(size=(3, 4)))
        probe = rng.normal(size=fn(Tensor(p.data)).shape)
        assert nx.check_gradients(lambda: nx.tsum(fn(p) * probe), [p]) < 1e-4

    def test_binary_broadcast(self):
        rng = np.random.default_rng(20)
        a, b = Parameter(rng.normal(size=(2, 3, 4))), Parameter(rng.normal(size=(3, 1)))
        probe = rng.normal(size=(2, 3, 4))
        fn = lambda: nx.tsum(((a + b) * (a - b) / (b * b + 2.0)) * probe)
        assert nx.check_gradients(fn, [a, b]) < 1e-4

    def test_matmul_batched(self):
        rng = np.random.default_rng(21)
        a, b = Parameter(rng.normal(size=(2, 3, 4))), Parameter(rng.normal(size=(4, 5)))
        probe = rng.normal(size=(2, 3, 5))
        assert nx.check_gradients(lambda: nx.tsum(nx.matmul(a, b) * probe), [a, b]) < 1e-4

    def test_concat(self):
        rng = np.random.default_rng(22)
        a, b = Parameter(rng.normal(size=(2, 3))), Parameter(rng.normal(size=(2, 2)))
        probe = rng.normal(size=(2, 5))
        assert nx.check_gradients(lambda: nx.tsum(nx.concat([a, b], axis=1) * probe), [a, b]) < 1e-4

    def test_layer_norm(self):
        rng = np.random.default_rng(23)
        x, g, b = Parameter(rng.normal(size=(3, 6))), Parameter(rng.normal(size=6)), Parameter(rng.normal(size=6))
        probe = rng.normal(size=(3, 6))
        assert nx.check_gradients(lambda: nx.tsum(nx.layer_norm(x, g, b) * probe), [x, g, b]) < 1e-4

    def test_cross_entropy(self):
        rng = np.random.default_rng(24)
        logits = Parameter(rng.normal(size=(4, 5)))
        assert nx.check_gradients(lambda: nx.cross_entropy(logits, [0, 3, 3, 1]), [logits]) < 1e-4

    @pytest.mark.parametrize("values_equal_keys", [False, True])
    def test_attention(self, values_equal_keys):
        rng = np.random.default_rng(25)
        d = 8
        ps = [Parameter(rng.normal(size=(d, d)) / 3) for _ in range(4)] + [Parameter(rng.normal(size=d) * 0.1) for _ in range(4)]
        w = nx.AttentionWeights(ps[0], ps[4], ps[1], ps[5], ps[2], ps[6], ps[3], ps[7])
        q, m = Parameter(rng.normal(size=(3, d))), Parameter(rng.normal(size=(4, d)))
        probe = rng.normal(size=(3, d))
        fn = lambda: nx.tsum(nx.cross_attention(q, m, w, heads=2, values_equal_keys=values_equal_keys)[0] * probe)
        assert nx.check_gradients(fn, [q, m] + ps) < 1e-4


class TestSGD:
    def test_plain_step(self):
        p = Parameter(np.array([1.0]), name="w")
        p.grad = np.array([1.0])
        nx.sgd_step([p], nx.OptimizerState(learning_rate=0.1, momentum=0.0, weight_decay=0.0))
        assert p.data[0] == pytest.approx(0.9, abs=1e-15)

    def test_milestones(self):
        st_ = nx.OptimizerState(learning_rate=0.01)
        assert st_.milestones == (4, 8, 12, 13, 14, 15) and st_.gamma == 0.5
        assert st_.lr_at_epoch(3) == 0.01
        assert st_.lr_at_epoch(8) == pytest.approx(0.0025, abs=1e-15)
        st_.set_epoch(15)
        assert st_.learning_rate == pytest.approx(0.01 * 0.5 ** 6)

    def test_momentum_recursion(self):
        lr, m, wd, g = 0.1, 0.9, 0.01, 0.5
        p = Parameter(np.array([2.0]), name="w")
        state = nx.OptimizerState(learning_rate=lr, momentum=m, weight_decay=wd)
        v, buf = 2.0, 0.0
        for _ in range(2):
            p.grad = np.array([g])
            nx.sgd_step([p], state)
            buf = m * buf + (g + wd * v)
            v = v - lr * buf
        assert p.data[0] == pytest.approx(v, abs=1e-15)

    def test_empty(self):
        nx.sgd_step([], nx.OptimizerState())


class TestPrecision:
    def test_float32_mode(self):
        nx.set_default_dtype("float32")
        try:
            assert Tensor([1.0]).data.dtype == np.float32
        finally:
            nx.set_default_dtype("float64")
        assert Tensor([1.0]).data.dtype == np.float64

    def test_deterministic(self):
        rng = lambda: np.random.default_rng(99)
        a = nx.softmax(Tensor(rng().normal(size=(50, 50))) @ Tensor(rng().normal(size=(50, 50))), -1).data
        b = nx.softmax(Tensor(rng().normal(size=(50, 50))) @ Tensor(rng().normal(size=(50, 50))), -1).data
        assert a.tobytes() == b.tobytes()


def test_checkpoint_roundtrip(tmp_path):
    params = {"a": np.arange(6.0).reshape(2, 3), "b.c": np.array([1.5])}
    nx.save_checkpoint(tmp_path / "x.npz", params, {"D": 8}, meta={"epoch": 3}, buffers={"a": np.ones((2, 3))})
    loaded, meta, bufs = nx.load_checkpoint(tmp_path / "x.npz")
    assert meta["format_version"] == 1 and meta["model_config"] == {"D": 8} and meta["epoch"] == 3
    for k in params:
        np.testing.assert_array_equal(loaded[k], params[k])
        assert loaded[k].dtype.byteorder in ("<", "=")
    np.testing.assert_array_equal(bufs["a"], 1.0)
