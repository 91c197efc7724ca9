"""Tensor-core: forward oracles and gradient checks for every primitive."""

import numpy as np
import pytest

from dbnet import tensor as T
from dbnet.tensor import Tape, TapeError, Tensor, backward

from gradcheck import check_op


def t64(arr, requires_grad=True):
    return Tensor(np.asarray(arr, dtype=np.float64), requires_grad=requires_grad)


class TestConvForward:
    def test_identity_kernel_scales(self):
        x = Tensor(np.array([1, 2, 3], dtype=np.float32).reshape(1, 1, 1, 3))
        w = Tensor(np.array([2], dtype=np.float32).reshape(1, 1, 1, 1))
        y = T.conv2d(x, w, padding="valid")
        np.testing.assert_array_equal(y.data.reshape(-1), [2, 4, 6])

    def test_causal_hand_convolution(self):
        # left zero-pad by 1: y[t] = x[t-1] + x[t]
        x = Tensor(np.ones((1, 1, 1, 4), dtype=np.float32))
        w = Tensor(np.ones((1, 1, 1, 2), dtype=np.float32))
        y = T.conv2d(x, w, padding="causal")
        np.testing.assert_array_equal(y.data.reshape(-1), [1, 2, 2, 2])

    def test_causal_dilation_2(self):
        # left pad 2: y[t] = x[t-2] + x[t]
        x = Tensor(np.array([1, 0, 0, 0, 1], dtype=np.float32).reshape(1, 1, 1, 5))
        w = Tensor(np.ones((1, 1, 1, 2), dtype=np.float32))
        y = T.conv2d(x, w, padding="causal", dilation=(1, 2))
        np.testing.assert_array_equal(y.data.reshape(-1), [1, 0, 1, 0, 1])

    def test_same_preserves_extent(self):
        rng = np.random.default_rng(0)
        x = Tensor(rng.standard_normal((2, 3, 5, 40)).astype(np.float32))
        w = Tensor(rng.standard_normal((4, 3, 1, 7)).astype(np.float32))
        assert T.conv2d(x, w, padding="same").shape == (2, 4, 5, 40)
        assert T.conv2d(x, w, padding="causal").shape == (2, 4, 5, 40)

    def test_matches_loop_oracle(self):
        rng = np.random.default_rng(1)
        x = rng.standard_normal((2, 3, 4, 9))
        w = rng.standard_normal((5, 3, 2, 3))
        y = T.conv2d(Tensor(x), Tensor(w), padding="valid").data
        # brute-force cross-correlation
        ref = np.zeros((2, 5, 3, 7))
        for b in range(2):
            for f in range(5):
                for i in range(3):
                    for j in range(7):
                        ref[b, f, i, j] = np.sum(x[b, :, i:i + 2, j:j + 3] * w[f])
        np.testing.assert_allclose(y, ref, rtol=1e-5)

    def test_grouped_matches_per_group(self):
        rng = np.random.default_rng(2)
        x = rng.standard_normal((2, 4, 1, 8))
        w = rng.standard_normal((6, 2, 1, 3))
        y = T.conv2d(Tensor(x), Tensor(w), padding="same", groups=2).data
        for g in range(2):
            ref = T.conv2d(Tensor(x[:, 2 * g:2 * g + 2]), Tensor(w[3 * g:3 * g + 3]), padding="same").data
            np.testing.assert_allclose(y[:, 3 * g:3 * g + 3], ref, rtol=1e-5)

    def test_shape_mismatch_names_both_shapes(self):
        x = Tensor(np.zeros((1, 3, 4, 8), dtype=np.float32))
        w = Tensor(np.zeros((2, 2, 1, 3), dtype=np.float32))
        with pytest.raises(ValueError, match=r"\(2, 2, 1, 3\).*\(1, 3, 4, 8\)"):
            T.conv2d(x, w)

    def test_oversized_kernel_rejected(self):
        x = Tensor(np.zeros((1, 1, 1, 4), dtype=np.float32))
        w = Tensor(np.zeros((1, 1, 1, 6), dtype=np.float32))
        with pytest.raises(ValueError, match="does not fit"):
            T.conv2d(x, w, padding="valid")


class TestCausality:
    @pytest.mark.parametrize("dilation", [1, 2, 3, 4])
    def test_perturbation_never_leaks_backwards(self, dilation):
        rng = np.random.default_rng(3)
        x = rng.standard_normal((1, 2, 1, 30)).astype(np.float32)
        w = Tensor(rng.standard_normal((2, 2, 1, 4)).astype(np.float32))
        base = T.conv2d(Tensor(x), w, padding="causal", dilation=(1, dilation)).data
        for t0 in [5, 12, 29]:
            bumped = x.copy()
            bumped[..., t0] += 10.0
            y = T.conv2d(Tensor(bumped), w, padding="causal", dilation=(1, dilation)).data
            np.testing.assert_array_equal(y[..., :t0], base[..., :t0])
            assert not np.array_equal(y[..., t0], base[..., t0])


class TestPoolForward:
    def test_average(self):
        x = Tensor(np.array([1, 2, 3, 4], dtype=np.float32).reshape(1, 1, 1, 4))
        np.testing.assert_array_equal(T.pool2d(x, 2, "average").data.reshape(-1), [1.5, 3.5])

    def test_max(self):
        x = Tensor(np.array([1, 2, 3, 4], dtype=np.float32).reshape(1, 1, 1, 4))
        np.testing.assert_array_equal(T.pool2d(x, 2, "max").data.reshape(-1), [2, 4])

    def test_floor_semantics_drops_remainder(self):
        x = Tensor(np.array([1, 2, 3, 4, 5], dtype=np.float32).reshape(1, 1, 1, 5))
        np.testing.assert_array_equal(T.pool2d(x, 2, "average").data.reshape(-1), [1.5, 3.5])

    def test_bad_width_rejected(self):
        x = Tensor(np.zeros((1, 1, 1, 4), dtype=np.float32))
        with pytest.raises(ValueError, match="pool width"):
            T.pool2d(x, 0, "average")


class TestBackwardBasics:
    def test_sum_gradient_is_ones(self):
        x = t64(np.arange(6).reshape(2, 3))
        with Tape() as tape:
            loss = T.reduce_sum(x)
        backward(loss, tape)
        np.testing.assert_array_equal(x.grad, np.ones((2, 3)))

    def test_square_gradient(self):
        x = t64([1.0, 2.0])
        with Tape() as tape:
            loss = T.reduce_sum(T.mul(x, x))
        backward(loss, tape)
        np.testing.assert_allclose(x.grad, [2.0, 4.0])

    def test_empty_tape_rejected(self):
        with pytest.raises(TapeError, match="no recorded"):
            backward(Tensor(np.float64(0.0), requires_grad=True), Tape())

    def test_loss_must_be_final_node(self):
        x = t64([1.0, 2.0])
        with Tape() as tape:
            early = T.reduce_sum(x)
            T.reduce_sum(T.mul(x, x))
        with pytest.raises(TapeError, match="final"):
            backward(early, tape)

    def test_reused_tensor_accumulates(self):
        x = t64([3.0])
        with Tape() as tape:
            y = T.add(T.mul(x, x), x)  # x^2 + x
            loss = T.reduce_sum(y)
        backward(loss, tape)
        np.testing.assert_allclose(x.grad, [7.0])

    def test_no_tape_records_nothing(self):
        x = t64([1.0])
        y = T.mul(x, x)
        assert y.grad is None
        tape = Tape()
        assert len(tape) == 0


class TestGradChecks:
    """Finite-difference oracle (64-bit, step 1e-3) for every primitive."""

    rng = np.random.default_rng(7)

    def random(self, *shape):
        return t64(self.rng.standard_normal(shape))

    def weighted_sum(self, out):
        # fixed cotangent so the check exercises non-uniform upstream grads
        r = Tensor(np.random.default_rng(99).standard_normal(out.shape))
        return T.reduce_sum(T.mul(out, r))

    def test_elementwise_and_broadcast(self):
        a = self.random(3, 4)
        b = self.random(1, 4)
        for op in (T.add, T.sub, T.mul):
            err = check_op(lambda op=op: self.weighted_sum(op(a, b)), [a, b])
            assert err < 1e-3

    def test_matmul(self):
        a, b = self.random(3, 5), self.random(5, 2)
        assert check_op(lambda: self.weighted_sum(T.matmul(a, b)), [a, b]) < 1e-3

    def test_reductions(self):
        x = self.random(3, 4, 5)
        assert check_op(lambda: self.weighted_sum(T.reduce_mean(x, axis=1)), [x]) < 1e-3
        assert check_op(lambda: self.weighted_sum(T.reduce_sum(x, axis=(0, 2))), [x]) < 1e-3
        assert check_op(lambda: self.weighted_sum(T.reduce_mean(x, axis=2, keepdims=True)), [x]) < 1e-3

    def test_shape_ops(self):
        x = self.random(2, 3, 4)
        assert check_op(lambda: self.weighted_sum(T.reshape(x, (6, 4))), [x]) < 1e-3
        assert check_op(lambda: self.weighted_sum(T.transpose(x, (2, 0, 1))), [x]) < 1e-3
        assert check_op(lambda: self.weighted_sum(T.slice_axis(x, 2, 1, 3)), [x]) < 1e-3

    def test_concat(self):
        a, b = self.random(2, 3), self.random(2, 2)
        assert check_op(lambda: self.weighted_sum(T.concat([a, b], axis=1)), [a, b]) < 1e-3

    def test_activations(self):
        x = self.random(4, 6)
        for op in (T.relu, T.elu, T.sigmoid, T.softmax):
            assert check_op(lambda op=op: self.weighted_sum(op(x)), [x]) < 1e-3

    def test_log_and_clip(self):
        x = t64(self.rng.uniform(0.5, 2.0, size=(3, 3)))
        assert check_op(lambda: self.weighted_sum(T.log(x)), [x]) < 1e-3
        assert check_op(lambda: self.weighted_sum(T.clip_min(x, 1.0)), [x]) < 1e-3

    @pytest.mark.parametrize("padding,dilation,groups", [
        ("valid", (1, 1), 1),
        ("same", (1, 1), 1),
        ("same", (1, 2), 1),
        ("causal", (1, 1), 1),
        ("causal", (1, 3), 1),
        ("valid", (1, 1), 2),
        ("same", (1, 1), 4),
    ])
    def test_conv2d(self, padding, dilation, groups):
        x = self.random(2, 4, 3, 12)
        w = self.random(4, 4 // groups, 2, 3)
        err = check_op(lambda: self.weighted_sum(T.conv2d(x, w, padding=padding, dilation=dilation, groups=groups)), [x, w])
        assert err < 1e-3

    def test_conv2d_full_height_kernel(self):
        # the depthwise-style electrode contraction: kernel spans the full height
        x = self.random(2, 2, 5, 8)
        w = self.random(4, 1, 5, 1)
        err = check_op(lambda: self.weighted_sum(T.conv2d(x, w, padding="valid", groups=2)), [x, w])
        assert err < 1e-3

    @pytest.mark.parametrize("mode", ["average", "max"])
    def test_pool2d(self, mode):
        x = self.random(2, 3, 1, 11)
        assert check_op(lambda: self.weighted_sum(T.pool2d(x, 3, mode)), [x]) < 1e-3

    def test_dropout_with_frozen_mask(self):
        x = self.random(4, 10)
        err = check_op(
            lambda: self.weighted_sum(T.dropout(x, 0.4, np.random.default_rng(11), train=True)), [x]
        )
        assert err < 1e-3

    def test_batch_norm_train(self):
        x = self.random(6, 3, 2, 4)
        gamma = t64(self.rng.uniform(0.5, 1.5, size=3))
        beta = self.random(3)
        err = check_op(
            lambda: self.weighted_sum(T.batch_norm_train(x, gamma, beta, eps=1e-3)[0]),
            [x, gamma, beta],
        )
        assert err < 1e-3

    def test_batch_norm_infer(self):
        x = self.random(5, 3, 4)
        gamma = t64(self.rng.uniform(0.5, 1.5, size=3))
        beta = self.random(3)
        rm = self.rng.standard_normal(3)
        rv = self.rng.uniform(0.5, 2.0, size=3)
        err = check_op(
            lambda: self.weighted_sum(T.batch_norm_infer(x, gamma, beta, rm, rv, eps=1e-3)),
            [x, gamma, beta],
        )
        assert err < 1e-3

    def test_random_small_network(self):
        x = self.random(3, 1, 4, 16)
        w1 = self.random(2, 1, 4, 5)
        w2 = self.random(4, 2, 1, 3)
        wd = self.random(12, 2)

        def net():
            h = T.elu(T.conv2d(x, w1, padding="valid"))
            h = T.pool2d(h, 2, "average")
            h = T.relu(T.conv2d(h, w2, padding="causal", dilation=(1, 2)))
            h = T.reshape(T.pool2d(h, 2, "max"), (3, 12))
            return self.weighted_sum(T.softmax(T.matmul(h, wd)))

        assert check_op(net, [x, w1, w2, wd]) < 1e-3


class TestDeterminism:
    def test_bit_identical_reruns(self):
        def run():
            rng = np.random.default_rng(42)
            x = Tensor(rng.standard_normal((2, 3, 4, 20)).astype(np.float32), requires_grad=True)
            w = Tensor(rng.standard_normal((3, 3, 1, 5)).astype(np.float32), requires_grad=True)
            with Tape() as tape:
                y = T.conv2d(x, w, padding="same")
                y = T.pool2d(y, 2, "average")
                loss = T.reduce_mean(T.mul(y, y))
            backward(loss, tape)
            return loss.data.copy(), x.grad.copy(), w.grad.copy()

        la, xa, wa = run()
        lb, xb, wb = run()
        assert la == lb
        np.testing.assert_array_equal(xa, xb)
        np.testing.assert_array_equal(wa, wb)
