import numpy as np
import pytest

from formulanet import autograd as ag
from gradcheck import check

TOL = 1e-4


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


def _dot(tape, y, w):
    """sum(y * w) for a constant ``w``, built from tape ops only."""
    cols = []
    for j in range(y.shape[1]):
        col = ag.matmul(y, tape.constant(np.eye(y.shape[1])[:, j : j + 1]))
        cols.append(ag.scale_rows(col, w[:, j]))
    return ag.sum_all(ag.concat_cols(cols))


def _row(v):
    """(d,) -> (1, d)."""
    return v.tape._out(v.value[None, :], (v,), lambda g: (g[0],))


class TestForwardValues:
    def test_affine_identity(self, rng):
        t = ag.Tape()
        x = rng.standard_normal((3, 2))
        y = ag.affine(t.constant(x), t.param("W", np.eye(2)), t.param("b", np.zeros(2)))
        np.testing.assert_array_equal(y.value, x)

    def test_affine_zero_weights(self, rng):
        t = ag.Tape()
        b = np.array([0.5, -1.0])
        y = ag.affine(t.constant(rng.standard_normal((4, 3))), t.param("W", np.zeros((3, 2))), t.param("b", b))
        np.testing.assert_array_equal(y.value, np.tile(b, (4, 1)))

    def test_affine_scalar_loop_oracle(self, rng):
        x, w, b = rng.standard_normal((3, 2)), rng.standard_normal((2, 2)), rng.standard_normal(2)
        t = ag.Tape()
        y = ag.affine(t.constant(x), t.param("W", w), t.param("b", b)).value
        want = np.zeros((3, 2))
        for i in range(3):
            for j in range(2):
                want[i, j] = b[j] + sum(x[i, k] * w[k, j] for k in range(2))
        np.testing.assert_allclose(y, want, rtol=1e-12)

    def test_affine_shape_mismatch(self):
        t = ag.Tape()
        with pytest.raises(ag.ShapeMismatch):
            ag.affine(t.constant(np.zeros((2, 3))), t.param("W", np.zeros((2, 2))), t.param("b", np.zeros(2)))

    def test_relu(self):
        t = ag.Tape()
        np.testing.assert_array_equal(ag.relu(t.constant(-np.ones((2, 2)))).value, 0)
        np.testing.assert_array_equal(ag.relu(t.constant(np.ones((2, 2)))).value, 1)
        np.testing.assert_array_equal(ag.relu(t.constant(np.array([[-1.0, 2.0]]))).value, [[0.0, 2.0]])

    def test_max_pool(self):
        t = ag.Tape()
        row = np.array([[1.0, -2.0, 3.0]])
        np.testing.assert_array_equal(ag.max_pool_rows(t.constant(row)).value, row[0])
        x = np.array([[5.0, 0.0], [1.0, 7.0]])
        np.testing.assert_array_equal(ag.max_pool_rows(t.constant(x)).value, [5.0, 7.0])

    def test_max_pool_empty(self):
        t = ag.Tape()
        with pytest.raises(ag.EmptyInput):
            ag.max_pool_rows(t.constant(np.zeros((0, 3))))

    def test_segment_max(self, rng):
        x = rng.standard_normal((7, 3))
        seg = np.array([0, 1, 0, 2, 1, 2, 2])
        t = ag.Tape()
        got = ag.segment_max(t.constant(x), seg, 3).value
        want = np.stack([x[seg == s].max(axis=0) for s in range(3)])
        np.testing.assert_array_equal(got, want)

    def test_cross_entropy_values(self):
        t = ag.Tape()
        loss = ag.softmax_cross_entropy(t.constant(np.zeros((1, 2))), [0])
        assert loss.value == pytest.approx(np.log(2.0), abs=1e-12)
        loss = ag.softmax_cross_entropy(t.constant(np.array([[10.0, -10.0]])), [0])
        assert float(loss.value) < 1e-4

    def test_cross_entropy_gradient_is_softmax_minus_onehot(self, rng):
        z = rng.standard_normal((4, 2))
        labels = np.array([0, 1, 1, 0])
        t = ag.Tape()
        grads = t.backward(ag.softmax_cross_entropy(t.param("z", z), labels))
        want = (ag.softmax(z) - np.eye(2)[labels]) / 4
        np.testing.assert_allclose(grads["z"], want, rtol=1e-12)


class TestBatchnorm:
    def test_batch_stats_normalise(self, rng):
        t = ag.Tape()
        x = rng.standard_normal((50, 3)) * 4 + 2
        y = ag.batchnorm(t.constant(x), t.param("g", np.ones(3)), t.param("b", np.zeros(3)), running=None).value
        assert np.abs(y.mean(axis=0)).max() < 1e-5
        np.testing.assert_allclose(y.var(axis=0), 1.0, atol=1e-3)

    def test_single_row_rejected(self):
        t = ag.Tape()
        with pytest.raises(ag.BatchTooSmall):
            ag.batchnorm(t.constant(np.ones((1, 2))), t.param("g", np.ones(2)), t.param("b", np.zeros(2)))

    def test_running_stats_identity(self, rng):
        t = ag.Tape()
        x = rng.standard_normal((4, 3))
        y = ag.batchnorm(
            t.constant(x), t.param("g", np.ones(3)), t.param("b", np.zeros(3)),
            mode="running-stats", running=(np.zeros(3), np.ones(3)), eps=0.0,
        )
        np.testing.assert_allclose(y.value, x, rtol=1e-12)

    def test_running_update(self, rng):
        x = rng.standard_normal((5, 2))
        mean, var = np.zeros(2), np.ones(2)
        t = ag.Tape()
        ag.batchnorm(t.constant(x), t.param("g", np.ones(2)), t.param("b", np.zeros(2)), running=(mean, var), momentum=0.1)
        np.testing.assert_allclose(mean, 0.1 * x.mean(axis=0))
        np.testing.assert_allclose(var, 0.9 + 0.1 * x.var(axis=0, ddof=1))

    def test_segment_matches_per_segment_batchnorm(self, rng):
        x = rng.standard_normal((7, 3))
        seg = np.array([0, 0, 1, 1, 1, 2, 2])
        g, b = rng.standard_normal(3), rng.standard_normal(3)
        t = ag.Tape()
        got = ag.segment_batchnorm(t.constant(x), t.param("g", g), t.param("b", b), seg, 3, (np.zeros(3), np.ones(3))).value
        for s in range(3):
            t2 = ag.Tape()
            want = ag.batchnorm(t2.constant(x[seg == s]), t2.param("g", g), t2.param("b", b), running=None).value
            np.testing.assert_allclose(got[seg == s], want, rtol=1e-12)

    def test_segment_singleton_uses_running_stats(self, rng):
        x = rng.standard_normal((3, 2))
        seg = np.array([0, 0, 1])
        mean, var = np.array([0.5, -0.5]), np.array([2.0, 3.0])
        t = ag.Tape()
        y = ag.segment_batchnorm(
            t.constant(x), t.param("g", np.ones(2)), t.param("b", np.zeros(2)), seg, 2, (mean, var), eps=0.0
        ).value
        np.testing.assert_allclose(y[2], (x[2] - mean) / np.sqrt(var))

    def test_segment_running_update_off_by_default(self, rng):
        mean, var = np.zeros(2), np.ones(2)
        t = ag.Tape()
        ag.segment_batchnorm(
            t.constant(rng.standard_normal((4, 2))), t.param("g", np.ones(2)), t.param("b", np.zeros(2)),
            np.array([0, 0, 1, 1]), 2, (mean, var),
        )
        np.testing.assert_array_equal(mean, 0)
        np.testing.assert_array_equal(var, 1)


class TestGradients:
    def test_sum_gives_ones(self, rng):
        t = ag.Tape()
        grads = t.backward(ag.sum_all(t.param("p", rng.standard_normal((3, 4)))))
        np.testing.assert_array_equal(grads["p"], np.ones((3, 4)))

    def test_affine(self, rng):
        arrays = {"x": rng.standard_normal((3, 4)), "W": rng.standard_normal((4, 2)), "b": rng.standard_normal(2)}
        w = rng.standard_normal((3, 2))
        err = check(lambda t, p: _dot(t, ag.affine(p["x"], p["W"], p["b"]), w), arrays)
        assert err < TOL

    def test_composite_affine_relu_loss(self, rng):
        arrays = {
            "x": rng.standard_normal((5, 3)),
            "W0": rng.standard_normal((3, 4)),
            "b0": rng.standard_normal(4),
            "W1": rng.standard_normal((4, 2)),
            "b1": rng.standard_normal(2),
        }
        labels = np.array([0, 1, 1, 0, 1])

        def build(t, p):
            h = ag.relu(ag.affine(p["x"], p["W0"], p["b0"]))
            return ag.softmax_cross_entropy(ag.affine(h, p["W1"], p["b1"]), labels)

        assert check(build, arrays) < TOL

    def test_concat_gather_segment_sum(self, rng):
        arrays = {"a": rng.standard_normal((4, 2)), "b": rng.standard_normal((4, 3))}
        idx = np.array([3, 0, 0, 2, 1, 3])
        seg = np.array([0, 1, 1, 2, 0, 1])
        w = rng.standard_normal((3, 5))

        def build(t, p):
            y = ag.gather_rows(ag.concat_cols([p["a"], p["b"]]), idx)
            return _dot(t, ag.segment_sum(y, seg, 3), w)

        assert check(build, arrays) < TOL

    def test_scale_rows_add_n(self, rng):
        arrays = {"a": rng.standard_normal((3, 2)), "b": rng.standard_normal((3, 2))}
        coef = np.array([0.5, 2.0, 0.0])
        w = rng.standard_normal((3, 2))
        err = check(lambda t, p: _dot(t, ag.add_n([ag.scale_rows(p["a"], coef), p["b"], p["a"]]), w), arrays)
        assert err < TOL

    def test_max_pool(self, rng):
        arrays = {"x": rng.standard_normal((4, 3))}
        w = rng.standard_normal((1, 3))
        assert check(lambda t, p: _dot(t, _row(ag.max_pool_rows(p["x"])), w), arrays) < TOL

    def test_segment_max(self, rng):
        arrays = {"x": rng.standard_normal((6, 3))}
        seg = np.array([1, 0, 1, 0, 1, 1])
        w = rng.standard_normal((2, 3))
        assert check(lambda t, p: _dot(t, ag.segment_max(p["x"], seg, 2), w), arrays) < TOL

    def test_cross_entropy(self, rng):
        arrays = {"z": rng.standard_normal((6, 2))}
        labels = rng.integers(0, 2, 6)
        assert check(lambda t, p: ag.softmax_cross_entropy(p["z"], labels), arrays) < TOL

    @pytest.mark.parametrize("mode", ["batch-stats", "running-stats"])
    def test_batchnorm(self, rng, mode):
        arrays = {"x": rng.standard_normal((6, 3)), "g": rng.standard_normal(3), "b": rng.standard_normal(3)}
        w = rng.standard_normal((6, 3))
        running = (rng.standard_normal(3), rng.uniform(0.5, 2.0, 3))

        def build(t, p):
            y = ag.batchnorm(p["x"], p["g"], p["b"], mode=mode, running=running, update_running=False)
            return _dot(t, y, w)

        assert check(build, arrays) < TOL

    def test_segment_batchnorm(self, rng):
        arrays = {"x": rng.standard_normal((8, 3)), "g": rng.standard_normal(3), "b": rng.standard_normal(3)}
        seg = np.array([0, 0, 0, 1, 2, 2, 3, 3])  # segment 1 is a singleton
        w = rng.standard_normal((8, 3))
        running = (rng.standard_normal(3), rng.uniform(0.5, 2.0, 3))
        build = lambda t, p: _dot(t, ag.segment_batchnorm(p["x"], p["g"], p["b"], seg, 4, running), w)
        assert check(build, arrays) < TOL


class TestTape:
    def test_second_backward_is_an_error(self):
        t = ag.Tape()
        loss = ag.sum_all(t.param("p", np.ones((2, 2))))
        t.backward(loss)
        with pytest.raises(ag.TapeError):
            t.backward(loss)

    def test_backward_without_recording(self):
        t = ag.Tape(record=False)
        with pytest.raises(ag.TapeError):
            t.backward(ag.sum_all(t.param("p", np.ones(2))))

    def test_non_scalar_loss(self):
        t = ag.Tape()
        with pytest.raises(ag.ShapeMismatch):
            t.backward(t.param("p", np.ones(2)))

    def test_non_finite_detected(self):
        t = ag.Tape()
        with pytest.raises(ag.NonFiniteError):
            ag.relu(t.param("p", np.array([[np.inf]])))

    def test_unreached_parameter_gets_zero(self):
        t = ag.Tape()
        t.param("unused", np.ones(3))
        grads = t.backward(ag.sum_all(t.param("p", np.ones((1, 1)))))
        np.testing.assert_array_equal(grads["unused"], 0)

    def test_shared_parameter_accumulates(self):
        t = ag.Tape()
        p = t.param("p", np.ones((2, 2)))
        grads = t.backward(ag.sum_all(ag.add(p, t.param("p", np.ones((2, 2))))))
        np.testing.assert_array_equal(grads["p"], 2.0)
