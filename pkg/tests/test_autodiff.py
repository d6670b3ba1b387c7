import math

import numpy as np
import pytest

from amae import autodiff as ad
from amae.autodiff import Tensor
from amae.exceptions import EmptyMask, IndexOutOfRange, InvalidSchedule, ShapeMismatch
from helpers import check_gradients

TOL = 1e-4


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


def leaf(rng, *shape, scale=1.0):
    return Tensor(scale * rng.standard_normal(shape), requires_grad=True)


class TestElementwise:
    @pytest.mark.parametrize("kind", ["add", "sub", "mul"])
    def test_same_shape(self, rng, kind):
        a, b = leaf(rng, 3, 4), leaf(rng, 3, 4)
        assert check_gradients(lambda: ad.elementwise(a, b, kind), [a, b]) < TOL

    @pytest.mark.parametrize("kind", ["add", "sub", "mul"])
    def test_suffix_broadcast(self, rng, kind):
        a, b = leaf(rng, 2, 3, 4), leaf(rng, 4)
        assert check_gradients(lambda: ad.elementwise(a, b, kind), [a, b]) < TOL
        assert check_gradients(lambda: ad.elementwise(b, a, kind), [a, b]) < TOL

    def test_operators_match_functions(self, rng):
        a, b = leaf(rng, 2, 2), leaf(rng, 2, 2)
        np.testing.assert_array_equal((a + b).data, a.data + b.data)
        np.testing.assert_array_equal((a - b).data, a.data - b.data)
        np.testing.assert_array_equal((a * b).data, a.data * b.data)
        np.testing.assert_array_equal((-a).data, -a.data)
        np.testing.assert_array_equal((a @ b).data, a.data @ b.data)

    def test_non_suffix_broadcast_rejected(self, rng):
        with pytest.raises(ShapeMismatch):
            ad.add(leaf(rng, 3, 4), leaf(rng, 3, 1))
        with pytest.raises(ShapeMismatch):
            ad.mul(leaf(rng, 3, 4), leaf(rng, 3))

    def test_unknown_kind(self, rng):
        with pytest.raises(ValueError):
            ad.elementwise(leaf(rng, 2), leaf(rng, 2), "div")


class TestMatmul:
    def test_plain(self, rng):
        a, b = leaf(rng, 3, 5), leaf(rng, 5, 2)
        assert check_gradients(lambda: ad.matmul(a, b), [a, b]) < TOL

    def test_batched_times_weight(self, rng):
        a, w = leaf(rng, 2, 3, 5), leaf(rng, 5, 4)
        assert check_gradients(lambda: ad.matmul(a, w), [a, w]) < TOL

    def test_batched_both(self, rng):
        a, b = leaf(rng, 2, 2, 3, 4), leaf(rng, 2, 2, 4, 3)
        assert check_gradients(lambda: ad.matmul(a, b), [a, b]) < TOL

    def test_shape_errors(self, rng):
        with pytest.raises(ShapeMismatch):
            ad.matmul(leaf(rng, 3, 4), leaf(rng, 3, 4))
        with pytest.raises(ShapeMismatch):
            ad.matmul(leaf(rng, 4), leaf(rng, 4, 2))
        with pytest.raises(ShapeMismatch):
            ad.matmul(leaf(rng, 2, 3, 4), leaf(rng, 3, 4, 2))


class TestLayout:
    def test_reshape(self, rng):
        x = leaf(rng, 2, 6)
        assert check_gradients(lambda: ad.reshape(x, (3, 2, 2)), [x]) < TOL

    def test_transpose(self, rng):
        x = leaf(rng, 2, 3, 4)
        assert check_gradients(lambda: ad.transpose(x, (2, 0, 1)), [x]) < TOL


class TestNonlinearities:
    def test_softmax(self, rng):
        x = leaf(rng, 3, 5)
        assert check_gradients(lambda: ad.softmax(x, axis=-1), [x]) < TOL
        assert check_gradients(lambda: ad.softmax(x, axis=0), [x]) < TOL

    def test_softmax_rows_sum_to_one(self, rng):
        y = ad.softmax(Tensor(50 * rng.standard_normal((4, 7)))).data
        np.testing.assert_allclose(y.sum(axis=-1), 1.0, rtol=0, atol=1e-12)

    def test_layernorm(self, rng):
        x, g, b = leaf(rng, 2, 3, 6), leaf(rng, 6), leaf(rng, 6)
        assert check_gradients(lambda: ad.layernorm(x, g, b), [x, g, b]) < TOL

    def test_layernorm_normalises(self, rng):
        x = Tensor(3 + 5 * rng.standard_normal((4, 16)))
        y = ad.layernorm(x, np.ones(16), np.zeros(16)).data
        np.testing.assert_allclose(y.mean(axis=-1), 0.0, atol=1e-12)
        np.testing.assert_allclose(y.std(axis=-1), 1.0, atol=1e-6)

    def test_gelu(self, rng):
        x = leaf(rng, 4, 5, scale=2.0)
        assert check_gradients(lambda: ad.gelu(x), [x]) < TOL

    def test_gelu_values(self):
        y = ad.gelu(Tensor([-1.0, 0.0, 1.0])).data
        phi = 0.5 * (1 + math.erf(1 / math.sqrt(2)))
        np.testing.assert_allclose(y, [-(1 - phi), 0.0, phi], rtol=1e-14)


class TestTokens:
    def test_gather_shared_index(self, rng):
        x = leaf(rng, 2, 6, 3)
        assert check_gradients(lambda: ad.gather_tokens(x, [0, 2, 5]), [x]) < TOL

    def test_gather_per_row(self, rng):
        x = leaf(rng, 2, 6, 3)
        idx = np.array([[0, 1, 4], [2, 3, 5]])
        assert check_gradients(lambda: ad.gather_tokens(x, idx), [x]) < TOL

    def test_scatter(self, rng):
        x, fill = leaf(rng, 2, 3, 4), leaf(rng, 4)
        idx = np.array([[0, 2, 5], [1, 3, 4]])
        assert check_gradients(lambda: ad.scatter_tokens(x, idx, 6, fill), [x, fill]) < TOL

    def test_scatter_inverts_gather(self, rng):
        x = Tensor(rng.standard_normal((2, 6, 3)))
        idx = np.array([[0, 2, 5], [1, 3, 4]])
        back = ad.scatter_tokens(ad.gather_tokens(x, idx), idx, 6, np.zeros(3)).data
        for row, keep in enumerate(idx):
            np.testing.assert_array_equal(back[row, keep], x.data[row, keep])
            hidden = np.setdiff1d(np.arange(6), keep)
            np.testing.assert_array_equal(back[row, hidden], 0.0)

    def test_index_errors(self, rng):
        x = leaf(rng, 2, 4, 3)
        with pytest.raises(IndexOutOfRange):
            ad.gather_tokens(x, [0, 4])
        with pytest.raises(IndexOutOfRange):
            ad.scatter_tokens(x, np.array([[0, 1, 2, 9]] * 2), 6, np.zeros(3))
        with pytest.raises(ShapeMismatch):
            ad.scatter_tokens(x, np.array([[0, 1, 2, 3]] * 2), 6, np.zeros(2))

    def test_mean_pool(self, rng):
        x = leaf(rng, 2, 5, 3)
        assert check_gradients(lambda: ad.mean_pool(x), [x]) < TOL


class TestLosses:
    def test_mse(self, rng):
        a, b = leaf(rng, 3, 4), leaf(rng, 3, 4)
        mask = rng.random((3, 4)) < 0.5
        mask[0, 0] = True
        assert check_gradients(lambda: ad.mse(a, b, mask), [a, b]) < TOL

    def test_mse_ignores_unmasked(self):
        a = Tensor(np.array([[1.0, 100.0]]))
        b = Tensor(np.array([[3.0, -100.0]]))
        assert float(ad.mse(a, b, [[True, False]]).data) == 4.0

    def test_mse_empty_mask(self, rng):
        with pytest.raises(EmptyMask):
            ad.mse(leaf(rng, 2, 2), leaf(rng, 2, 2), np.zeros((2, 2), bool))

    def test_cross_entropy(self, rng):
        z = leaf(rng, 5, 2)
        labels = np.array([0, 1, 1, 0, 1])
        assert check_gradients(lambda: ad.cross_entropy(z, labels), [z]) < TOL

    def test_cross_entropy_uniform_logits(self):
        loss = ad.cross_entropy(Tensor(np.zeros((3, 2))), [0, 1, 0])
        assert float(loss.data) == pytest.approx(math.log(2), abs=1e-15)


class TestGraph:
    def test_no_graph_without_grad(self, rng):
        x = Tensor(rng.standard_normal((3, 3)))
        y = ad.gelu(ad.matmul(x, x) + x)
        assert not y.requires_grad
        assert y._parents == ()

    def test_shared_subexpression_accumulates(self):
        x = Tensor(np.array([2.0]), requires_grad=True)
        y = x * x + x
        y.backward()
        np.testing.assert_array_equal(x.grad, [5.0])

    def test_backward_accumulates_across_calls(self):
        x = Tensor(np.array([1.0, 2.0]), requires_grad=True)
        (x * 3.0).backward()
        (x * 3.0).backward()
        np.testing.assert_array_equal(x.grad, [6.0, 6.0])
        x.zero_grad()
        assert x.grad is None

    def test_frozen_leaf_gets_no_grad(self, rng):
        w = Tensor(rng.standard_normal((3, 2)))
        x = leaf(rng, 4, 3)
        ad.matmul(x, w).backward(np.ones((4, 2)))
        assert w.grad is None
        assert x.grad is not None


class TestAdamW:
    def test_first_step_is_signed_lr(self):
        p = [np.array([1.0, -2.0, 3.0])]
        g = [np.array([0.5, -0.1, 0.0])]
        state = ad.adamw_init(p)
        ad.adamw_step(p, g, state, lr=0.1, beta1=0.9, beta2=0.999, eps=1e-300)
        np.testing.assert_allclose(p[0], [0.9, -1.9, 3.0], rtol=0, atol=1e-15)

    def test_decoupled_weight_decay(self):
        p = [np.array([2.0])]
        state = ad.adamw_init(p)
        ad.adamw_step(p, [np.zeros(1)], state, lr=0.1, weight_decay=0.5)
        np.testing.assert_allclose(p[0], [2.0 - 0.1 * 0.5 * 2.0])

    def test_matches_reference_loop(self, rng):
        p = rng.standard_normal(4)
        grads = [rng.standard_normal(4) for _ in range(5)]
        mine = [p.copy()]
        state = ad.adamw_init(mine)
        m = np.zeros(4)
        v = np.zeros(4)
        ref = p.copy()
        for t, g in enumerate(grads, start=1):
            ad.adamw_step(mine, [g], state, lr=0.01, beta1=0.9, beta2=0.95, eps=1e-8, weight_decay=0.05)
            m = 0.9 * m + 0.1 * g
            v = 0.95 * v + 0.05 * g * g
            ref = ref - 0.01 * 0.05 * ref
            ref = ref - 0.01 * (m / (1 - 0.9 ** t)) / (np.sqrt(v / (1 - 0.95 ** t)) + 1e-8)
        np.testing.assert_allclose(mine[0], ref, rtol=1e-13)

    def test_optimizer_skips_decay_on_vectors(self):
        params = {"w": Tensor(np.ones((2, 2)), requires_grad=True), "b": Tensor(np.ones(2), requires_grad=True)}
        opt = ad.AdamW(params, weight_decay=0.5)
        opt.step(0.1)
        np.testing.assert_allclose(params["w"].data, 0.95)
        np.testing.assert_array_equal(params["b"].data, 1.0)

    def test_descends_quadratic(self):
        x = Tensor(np.array([3.0, -4.0]), requires_grad=True)
        opt = ad.AdamW({"x": x}, betas=(0.9, 0.999), weight_decay=0.0)
        for _ in range(300):
            opt.zero_grad()
            (x * x).backward()
            opt.step(0.05)
        assert np.abs(x.data).max() < 1e-2


class TestSchedule:
    def test_shape(self):
        lrs = [ad.lr_schedule(s, 2, 10, 5, 1.0) for s in range(51)]
        assert lrs[0] == 0.0
        assert lrs[5] == pytest.approx(0.5)
        assert lrs[10] == pytest.approx(1.0)
        assert lrs[50] == pytest.approx(0.0, abs=1e-15)
        assert all(a >= b for a, b in zip(lrs[10:], lrs[11:]))
        assert all(a <= b for a, b in zip(lrs[:10], lrs[1:11]))

    def test_midpoint_of_decay(self):
        assert ad.lr_schedule(60, 2, 10, 10, 2.0) == pytest.approx(1.0)

    def test_clamped_after_end(self):
        assert ad.lr_schedule(1000, 1, 3, 2, 1.0) == pytest.approx(0.0, abs=1e-15)

    @pytest.mark.parametrize("warmup,total,spe", [(5, 5, 1), (-1, 5, 1), (1, 5, 0)])
    def test_invalid(self, warmup, total, spe):
        with pytest.raises(InvalidSchedule):
            ad.lr_schedule(0, warmup, total, spe, 1.0)
