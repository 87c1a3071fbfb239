import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from contrastive_mi import diffcore as dc
from contrastive_mi.errors import ConfigError, ContractError, DimensionError, NumericError


def _scalar_fd(f, x, eps=1e-6):
    g = np.zeros_like(x)
    for idx in np.ndindex(x.shape):
        xp, xm = x.copy(), x.copy()
        xp[idx] += eps
        xm[idx] -= eps
        g[idx] = (f(xp) - f(xm)) / (2 * eps)
    return g


def _grad(build, x):
    tape = dc.Tape()
    leaf = tape.leaf(x, "x")
    out = build(leaf)
    return out.item(), dc.backward(tape, out)["x"]


class TestBuildMlp:
    def test_zero_weights_give_bias(self):
        p = dc.build_mlp([3, 1], seed=0)
        p["layer0.weight"] = np.zeros((3, 1))
        out, _ = dc.forward(p, np.random.default_rng(0).normal(size=(4, 3)))
        assert np.all(out.data == 0.0)

    def test_deterministic_for_seed(self):
        a = dc.build_mlp([10, 512, 512, 16], seed=7)
        b = dc.build_mlp([10, 512, 512, 16], seed=7)
        assert list(a) == list(b)
        for k in a:
            assert np.array_equal(a[k], b[k])

    def test_glorot_range_and_zero_bias(self):
        p = dc.build_mlp([20, 30, 1], seed=3)
        s = np.sqrt(6 / 50)
        assert np.all(np.abs(p["layer0.weight"]) <= s)
        assert np.abs(p["layer0.weight"]).max() > 0.9 * s
        assert np.all(p["layer0.bias"] == 0)

    def test_gradient_matches_finite_differences(self):
        p = dc.build_mlp([2, 4, 1], seed=0)
        x = np.random.default_rng(1).normal(size=(6, 2))

        def loss(params):
            tape = dc.Tape()
            return (dc.mlp_apply(params.attach(tape), x) ** 2).mean()

        assert dc.finite_diff_check(loss, p, eps=1e-5) < 1e-4

    @pytest.mark.parametrize("sizes", [[], [3], [3, 0], [2.5, 1]])
    def test_invalid_sizes(self, sizes):
        with pytest.raises(ConfigError):
            dc.build_mlp(sizes)

    def test_invalid_activation(self):
        with pytest.raises(ConfigError):
            dc.build_mlp([2, 1], activation="tanh")


class TestForward:
    def test_identity_network(self):
        p = dc.ParamStore()
        p["layer0.weight"] = np.eye(2)
        p["layer0.bias"] = np.zeros(2)
        out, _ = dc.forward(p, np.array([[1.0, 2.0]]))
        np.testing.assert_array_equal(out.data, [[1.0, 2.0]])

    def test_relu(self):
        np.testing.assert_array_equal(dc.relu(np.array([-1.0, 2.0])).data, [0.0, 2.0])

    def test_rows_and_finiteness(self):
        p = dc.build_mlp([3, 16, 16, 2], seed=5)
        out, tape = dc.forward(p, np.random.default_rng(0).normal(size=(5, 3)))
        assert out.shape == (5, 2)
        assert np.all(np.isfinite(out.data))
        assert len(tape) > 0

    def test_shape_mismatch(self):
        p = dc.build_mlp([3, 4, 1])
        with pytest.raises(DimensionError):
            dc.forward(p, np.zeros((2, 4)))


class TestBackward:
    def test_square(self):
        v, g = _grad(lambda x: (x * x).sum(), np.array(3.0))
        assert v == 9.0 and g == 6.0

    def test_sum_of_parameters(self):
        _, g = _grad(lambda x: x.sum(), np.arange(6.0).reshape(2, 3))
        np.testing.assert_array_equal(g, np.ones((2, 3)))

    def test_mlp_mse_against_finite_differences(self):
        rng = np.random.default_rng(2)
        p = dc.build_mlp([3, 8, 8, 1], seed=2)
        x, y = rng.normal(size=(10, 3)), rng.normal(size=(10, 1))

        def loss(params):
            tape = dc.Tape()
            return ((dc.mlp_apply(params.attach(tape), x) - y) ** 2).mean()

        assert dc.finite_diff_check(loss, p, eps=1e-5) < 1e-4

    def test_non_scalar_rejected(self):
        tape = dc.Tape()
        x = tape.leaf(np.ones(3), "x")
        with pytest.raises(ContractError):
            dc.backward(tape, x * 2.0)

    def test_foreign_tape_rejected(self):
        t1, t2 = dc.Tape(), dc.Tape()
        x = t1.leaf(np.ones(2), "x")
        t2.leaf(np.ones(2), "y")
        with pytest.raises(ContractError):
            dc.backward(t2, x.sum())

    def test_graph_released_unless_retained(self):
        tape = dc.Tape()
        x = tape.leaf(np.ones(2), "x")
        loss = (x * x).sum()
        g1 = dc.backward(tape, loss, retain_graph=True)["x"]
        g2 = dc.backward(tape, loss)["x"]
        np.testing.assert_array_equal(g1, g2)
        with pytest.raises(ContractError):
            dc.backward(tape, loss)

    def test_deterministic(self):
        p = dc.build_mlp([4, 32, 1], seed=9)
        x = np.random.default_rng(0).normal(size=(7, 4))

        def run():
            out, tape = dc.forward(p, x)
            loss = dc.logsumexp(out[:, 0], axis=0)
            return loss.item(), dc.backward(tape, loss)

        (l1, g1), (l2, g2) = run(), run()
        assert l1 == l2
        assert all(np.array_equal(g1[k], g2[k]) for k in g1)

    def test_unused_parameter_gets_zero_gradient(self):
        tape = dc.Tape()
        x = tape.leaf(np.ones(2), "x")
        tape.leaf(np.ones(3), "unused")
        g = dc.backward(tape, x.sum())
        np.testing.assert_array_equal(g["unused"], np.zeros(3))

    def test_ndarray_matmul_defers_to_tensor(self):
        tape = dc.Tape()
        w = tape.leaf(np.eye(2), "w")
        out = np.ones((1, 2)) @ w
        assert isinstance(out, dc.Tensor)
        np.testing.assert_array_equal(dc.backward(tape, out.sum())["w"], np.ones((2, 2)))


finite_arrays = arrays(np.float64, st.integers(2, 6), elements=st.floats(-3, 3))


class TestPrimitiveGradients:
    @settings(max_examples=40, deadline=None)
    @given(finite_arrays)
    def test_softplus_and_exp(self, x):
        f = lambda t: (dc.softplus(t) * dc.exp(t * 0.3)).sum()
        _, g = _grad(f, x)
        np.testing.assert_allclose(g, _scalar_fd(lambda v: f(dc.Tensor(v)).item(), x), rtol=1e-6, atol=1e-8)

    @settings(max_examples=40, deadline=None)
    @given(finite_arrays)
    def test_logsumexp(self, x):
        f = lambda t: dc.logsumexp(t * 2.0, axis=0)
        _, g = _grad(f, x)
        np.testing.assert_allclose(g, _scalar_fd(lambda v: f(dc.Tensor(v)).item(), x), rtol=1e-6, atol=1e-8)

    @settings(max_examples=40, deadline=None)
    @given(arrays(np.float64, st.integers(2, 6), elements=st.floats(0.1, 3)))
    def test_log_sqrt_pow_div(self, x):
        f = lambda t: (dc.log(t) + dc.sqrt(t) + t**1.5 + 1.0 / (t + 1.0)).sum()
        _, g = _grad(f, x)
        np.testing.assert_allclose(g, _scalar_fd(lambda v: f(dc.Tensor(v)).item(), x), rtol=1e-6, atol=1e-8)

    def test_broadcast_and_indexing(self):
        rng = np.random.default_rng(0)
        x = rng.normal(size=(3, 4))
        bias = rng.normal(size=(1, 4))
        rows, cols = np.array([0, 2, 2, 1]), np.array([1, 3, 3, 0])

        def f(t):
            return ((t + bias) * (t[rows, cols].sum())).mean() + t[1:, :2].sum() + t.T.reshape(12)[5]

        _, g = _grad(f, x)
        np.testing.assert_allclose(g, _scalar_fd(lambda v: f(dc.Tensor(v)).item(), x), rtol=1e-6, atol=1e-8)

    def test_concat_clip_stop_gradient(self):
        x = np.array([-2.0, 0.5, 3.0])

        def f(t):
            c = dc.concat([dc.clip(t, -1.0, 1.0), t * dc.stop_gradient(t)], axis=0)
            return (c * c).sum()

        _, g = _grad(f, x)
        # stop_gradient treats the second factor as constant
        expected = np.where(np.abs(x) <= 1, 2 * x, 0.0) + 2 * x * x * x
        np.testing.assert_allclose(g, expected)

    def test_logsumexp_ignores_minus_infinity(self):
        x = np.array([[0.0, -np.inf, 1.0]])
        _, g = _grad(lambda t: dc.logsumexp(t, axis=1).sum(), x)
        assert g[0, 1] == 0.0
        np.testing.assert_allclose(g[0, [0, 2]], np.exp([0, 1]) / (1 + np.e))

    def test_softplus_is_stable(self):
        out = dc.softplus(np.array([-800.0, 0.0, 800.0])).data
        np.testing.assert_allclose(out, [0.0, np.log(2), 800.0])


class TestAdam:
    def _scalar_store(self, v):
        p = dc.ParamStore()
        p["w"] = np.array([v])
        return p

    def test_zero_gradient(self):
        p = self._scalar_store(1.5)
        st_ = dc.AdamState(learning_rate=0.1)
        dc.optimizer_step(st_, p, {"w": np.zeros(1)})
        assert p["w"][0] == 1.5 and st_.step_count == 1

    @pytest.mark.parametrize("g", [1e4, -3e5])
    def test_first_step_is_lr_times_sign(self, g):
        # epsilon/|g| must be negligible for the step to equal lr exactly
        p = self._scalar_store(0.0)
        dc.optimizer_step(dc.AdamState(learning_rate=0.1), p, {"w": np.array([g])})
        assert abs(p["w"][0] + 0.1 * np.sign(g)) < 1e-12

    def test_quadratic_convergence(self):
        p = self._scalar_store(0.0)
        st_ = dc.AdamState(learning_rate=1e-2)
        target = 1.0
        for _ in range(500):
            dc.optimizer_step(st_, p, {"w": 2 * (p["w"] - target)})
        assert abs(p["w"][0] - target) < 1e-3

    def test_nan_gradient_names_parameter(self):
        p = self._scalar_store(0.0)
        with pytest.raises(NumericError, match="'w'"):
            dc.optimizer_step(dc.AdamState(), p, {"w": np.array([np.nan])})

    def test_shape_mismatch(self):
        p = self._scalar_store(0.0)
        with pytest.raises(DimensionError):
            dc.optimizer_step(dc.AdamState(), p, {"w": np.zeros(2)})

    def test_step_count_increases(self):
        p = self._scalar_store(0.0)
        st_ = dc.AdamState()
        for i in range(1, 4):
            dc.optimizer_step(st_, p, {"w": np.ones(1)})
            assert st_.step_count == i
            assert st_.first_moment["w"].shape == p["w"].shape


class TestFiniteDiffCheck:
    def test_linear_loss_exact(self):
        p = dc.build_mlp([3, 2], seed=1)
        x = np.random.default_rng(0).normal(size=(4, 3))
        err = dc.finite_diff_check(lambda q: dc.mlp_apply(q.attach(dc.Tape()), x).sum(), p)
        assert err < 1e-9

    def test_relu_mlp(self):
        p = dc.build_mlp([2, 8, 1], seed=4)
        x = np.random.default_rng(3).normal(size=(5, 2))
        err = dc.finite_diff_check(lambda q: dc.exp(dc.mlp_apply(q.attach(dc.Tape()), x)).mean(), p)
        assert err < 1e-4

    @pytest.mark.parametrize("eps", [0.0, -1e-5, 0.1])
    def test_eps_range(self, eps):
        p = dc.build_mlp([2, 1])
        with pytest.raises(ConfigError):
            dc.finite_diff_check(lambda q: dc.mlp_apply(q.attach(dc.Tape()), np.ones((1, 2))).sum(), p, eps=eps)

    def test_non_finite_loss(self):
        p = dc.build_mlp([2, 1])
        with pytest.raises(NumericError):
            dc.finite_diff_check(lambda q: dc.log(dc.mlp_apply(q.attach(dc.Tape()), np.zeros((1, 2))).sum() * 0.0), p)

    def test_detects_wrong_gradient(self):
        p = dc.build_mlp([2, 1], seed=0)
        x = np.ones((1, 2))

        def bad(q):
            out = dc.mlp_apply(q.attach(dc.Tape()), x).sum()
            # value uses out^2, gradient only sees out
            return out + dc.stop_gradient(out * out - out)

        assert dc.finite_diff_check(bad, p) > 1e-2

    def test_subsample_is_seeded(self):
        p = dc.build_mlp([30, 30, 1], seed=0)
        x = np.random.default_rng(0).normal(size=(3, 30))
        f = lambda q: dc.exp(dc.mlp_apply(q.attach(dc.Tape()), x) * 0.1).sum()
        a = dc.finite_diff_check(f, p, max_coords=50, seed=3)
        b = dc.finite_diff_check(f, p, max_coords=50, seed=3)
        assert a == b < 1e-4

    def test_zero_tol_absorbs_roundoff_on_exact_zero_gradient(self):
        p = dc.build_mlp([2, 4, 1], seed=0)
        x = np.random.default_rng(0).normal(size=(6, 2))

        def shift_invariant(q):
            c = dc.mlp_apply(q.attach(dc.Tape()), x)[:, 0]
            return dc.logsumexp(c, axis=0) - c.mean()

        assert dc.finite_diff_check(shift_invariant, p, zero_tol=1e-9) < 1e-4


class TestParamStore:
    def test_shapes_are_fixed(self):
        p = dc.build_mlp([2, 3])
        with pytest.raises(DimensionError):
            p["layer0.weight"] = np.zeros((3, 3))

    def test_copy_is_deep(self):
        p = dc.build_mlp([2, 3])
        q = p.copy()
        q.tensors["layer0.weight"][0, 0] = 99.0
        assert p["layer0.weight"][0, 0] != 99.0

    def test_num_params(self):
        assert dc.build_mlp([2, 3, 1]).num_params() == 2 * 3 + 3 + 3 + 1
