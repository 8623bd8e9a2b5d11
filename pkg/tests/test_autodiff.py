import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from facerig import autodiff as ad


def test_elu_continuity_point():
    tape = ad.Tape()
    x = tape.leaf(np.array(0.0))
    assert float(ad.elu(x).value) == 0.0


def test_affine_identity_map():
    tape = ad.Tape()
    x = tape.leaf(np.array([1.5, -2.0, 3.0]))
    out = ad.affine(np.eye(3), x, np.zeros(3))
    np.testing.assert_array_equal(out.value, x.value)


def test_sum_of_squares_value():
    tape = ad.Tape()
    x = tape.leaf(np.array([3.0, 4.0]))
    assert float(ad.sum_of_squares(x).value) == 25.0


def test_backward_quadratic_gradient():
    tape = ad.Tape()
    x = tape.leaf(np.array([1.0, 2.0]))
    grads = tape.backward(ad.sum_of_squares(x))
    np.testing.assert_array_equal(grads[x], [2.0, 4.0])


def test_backward_unused_leaf_zero():
    tape = ad.Tape()
    x = tape.leaf(np.array([1.0, 2.0]))
    y = tape.leaf(np.ones(4))
    grads = tape.backward(ad.sum_of_squares(x))
    np.testing.assert_array_equal(grads[y], np.zeros(4))


def test_backward_rejects_nonscalar_seed():
    tape = ad.Tape()
    x = tape.leaf(np.array([1.0, 2.0]))
    with pytest.raises(ad.ShapeMismatch):
        tape.backward(x * 2.0)


def test_shape_mismatch_names_op_and_shapes():
    tape = ad.Tape()
    x = tape.leaf(np.ones(3))
    with pytest.raises(ad.ShapeMismatch, match=r"affine.*\(2, 2\).*\(3,\)"):
        ad.affine(np.eye(2), x, np.zeros(2))


def test_composite_matches_finite_differences():
    rng = np.random.default_rng(7)
    W0, x0, b0 = rng.normal(size=(4, 3)), rng.normal(size=3), rng.normal(size=4)

    def loss_fn(leaves):
        W, x, b = leaves
        return ad.sum_of_squares(ad.elu(ad.affine(W, x, b)))

    rep = ad.grad_check(loss_fn, [W0, x0, b0], step=1e-5, num_probes=200)
    assert rep.max_rel_error < 1e-4


@pytest.mark.parametrize("shapes", [
    [(2, 3, 4), (4, 5)],
    [(3, 4), (4,)],
    [(5, 2), (2, 2)],
])
def test_matmul_gradients(shapes):
    rng = np.random.default_rng(11)
    arrs = [rng.normal(size=s) for s in shapes]

    def loss_fn(leaves):
        return ad.sum_of_squares(ad.matmul(*leaves))

    rep = ad.grad_check(loss_fn, arrs, num_probes=80)
    assert rep.max_rel_error < 1e-4


def test_elementwise_and_structural_gradients():
    rng = np.random.default_rng(13)

    def loss_fn(leaves):
        a, b = leaves
        r = ad.concat([ad.sin(a), ad.cos(b)], axis=0)
        s = ad.stack([r, 2.0 * r], axis=1)
        t = ad.reshape(s, (-1,))
        u = t[2:7] / (1.5 + t[1:6] ** 2)
        v = ad.log1p(ad.exp(u)) * ad.tanh(u) - ad.sqrt(1.2 + u * u)
        return ad.sum_of_squares(v) + ad.tsum(ad.softclip(a, 0.0, 1.0, 0.1))

    rep = ad.grad_check(loss_fn, [rng.normal(size=4), rng.normal(size=4)], num_probes=16)
    assert rep.max_rel_error < 1e-4


def test_gather_with_duplicate_indices_accumulates():
    tape = ad.Tape()
    x = tape.leaf(np.array([1.0, 2.0, 3.0]))
    picked = x[np.array([0, 0, 2])]
    grads = tape.backward(ad.tsum(picked))
    np.testing.assert_array_equal(grads[x], [2.0, 0.0, 1.0])


def test_grad_check_quadratic_tight():
    # entries bounded away from zero keep every probed coordinate O(1)
    x0 = 1.0 + np.abs(np.random.default_rng(1).normal(size=50))

    def loss_fn(leaves):
        return ad.sum_of_squares(leaves[0])

    rep = ad.grad_check(loss_fn, [x0], num_probes=120)
    assert rep.num_checked == 50
    assert rep.max_rel_error < 1e-8


def test_grad_check_flags_corrupted_coordinate():
    x0 = np.array([1.0, 2.0, 3.0])
    bad = [np.array([2.0, 4.0, 12.0])]  # true grad is [2, 4, 6]; entry 2 doubled

    def loss_fn(leaves):
        return ad.sum_of_squares(leaves[0])

    rep = ad.grad_check(loss_fn, [x0], grads_override=bad)
    assert (rep.worst_param, rep.worst_coord) == (0, 2)
    assert [(p, c) for p, c, _ in rep.failures] == [(0, 2)]


def test_grad_check_reports_nonfinite_probe():
    def loss_fn(leaves):
        return ad.tsum(ad.log(leaves[0]))

    with pytest.raises(ad.GradCheckError, match="coord=0"):
        ad.grad_check(loss_fn, [np.array([0.5e-5])], step=1e-5)


def test_determinism_bit_identical():
    rng = np.random.default_rng(21)
    W0, x0 = rng.normal(size=(6, 6)), rng.normal(size=6)

    def run():
        tape = ad.Tape()
        W = tape.leaf(W0.copy())
        x = tape.leaf(x0.copy())
        loss = ad.sum_of_squares(ad.elu(ad.matvec(W, x)))
        g = tape.backward(loss)
        return float(loss.value), g[W].copy(), g[x].copy()

    l1, gw1, gx1 = run()
    l2, gw2, gx2 = run()
    assert l1 == l2
    np.testing.assert_array_equal(gw1, gw2)
    np.testing.assert_array_equal(gx1, gx2)


@settings(deadline=None, max_examples=25)
@given(st.integers(2, 8), st.integers(0, 2 ** 31 - 1))
def test_backward_linear_in_loss(n, seed):
    # backward of a sum of scalar losses equals the sum of individual passes
    rng = np.random.default_rng(seed)
    x0 = rng.normal(size=n)

    def grads_of(fn):
        tape = ad.Tape()
        x = tape.leaf(x0)
        return tape.backward(fn(x))[x]

    g_sum = grads_of(lambda x: ad.sum_of_squares(x) + ad.tsum(ad.sin(x)))
    g_a = grads_of(lambda x: ad.sum_of_squares(x))
    g_b = grads_of(lambda x: ad.tsum(ad.sin(x)))
    np.testing.assert_allclose(g_sum, g_a + g_b, rtol=0, atol=1e-15)


@settings(deadline=None, max_examples=40)
@given(st.floats(-30, 30))
def test_softclip_stays_inside_bounds(v):
    out = ad.softclip_np(np.array([v]), 0.0, 1.0, 0.1)[0]
    assert 0.0 <= out <= 1.0
    if 0.1 <= v <= 0.9:
        assert out == v  # exact identity inside the margin


class TestAdaDelta:
    def test_zero_gradient_decays_accumulator(self):
        st_ = ad.AdaDeltaState(rho=0.95)
        p = [np.array([1.0, -2.0])]
        ad.adadelta_step(st_, p, [np.array([1.0, 1.0])])
        eg_before = st_.sq_grad[0].copy()
        p_before = p[0].copy()
        ad.adadelta_step(st_, p, [np.zeros(2)])
        np.testing.assert_array_equal(p[0], p_before)
        np.testing.assert_allclose(st_.sq_grad[0], 0.95 * eg_before, rtol=1e-15)

    def test_constant_gradient_approaches_lr_g_limit(self):
        # independent oracle: simulate the recurrences directly, then check
        # the closed-form limit |update| -> lr*|g| and monotone accumulators
        lr, rho, eps, g = 0.01, 0.5, 1e-2, 0.5
        eg = ed = 0.0
        oracle_updates = []
        for _ in range(2000):
            eg = rho * eg + (1 - rho) * g * g
            delta = np.sqrt(ed + eps) / np.sqrt(eg + eps) * g
            oracle_updates.append(lr * delta)
            ed = rho * ed + (1 - rho) * delta * delta

        st_ = ad.AdaDeltaState(lr=lr, rho=rho, eps=eps)
        p = [np.array([10.0])]
        prev = p[0][0]
        updates, acc = [], []
        for _ in range(2000):
            ad.adadelta_step(st_, p, [np.array([g])])
            updates.append(prev - p[0][0])
            acc.append(st_.sq_delta[0][0])
            prev = p[0][0]
        np.testing.assert_allclose(updates, oracle_updates, rtol=1e-12)
        assert abs(updates[-1] - lr * g) < 1e-3 * lr * g
        assert np.all(np.diff(acc) >= 0)

    def test_identical_calls_identical_results(self):
        def run():
            st_ = ad.AdaDeltaState()
            p = [np.array([1.0, 2.0]), np.array([[3.0]])]
            gs = [np.array([0.1, -0.2]), np.array([[0.3]])]
            ad.adadelta_step(st_, p, gs)
            ad.adadelta_step(st_, p, gs)
            return p

        p1, p2 = run(), run()
        for a, b in zip(p1, p2):
            np.testing.assert_array_equal(a, b)

    def test_nonfinite_gradient_rejected_without_partial_update(self):
        st_ = ad.AdaDeltaState()
        p = [np.array([1.0]), np.array([2.0])]
        before = [x.copy() for x in p]
        with pytest.raises(ad.NonFiniteValue):
            ad.adadelta_step(st_, p, [np.array([0.1]), np.array([np.nan])])
        for x, b in zip(p, before):
            np.testing.assert_array_equal(x, b)

    def test_shape_mismatch_rejected(self):
        st_ = ad.AdaDeltaState()
        with pytest.raises(ad.ShapeMismatch):
            ad.adadelta_step(st_, [np.zeros(2)], [np.zeros(3)])
