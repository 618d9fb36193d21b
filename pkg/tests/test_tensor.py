"""Tensor engine: forward values against naive oracles, gradients against
finite differences, and the recording-tape invariants."""

import numpy as np
import pytest

from oracles import naive_conv2d, naive_maxpool2d, numeric_grad

from scaletree.tensor import (
    MacCounter,
    Tape,
    Tensor,
    add,
    affine_mix,
    backward,
    channel_concat,
    channel_split,
    clip,
    conv2d,
    count_macs,
    log,
    maxpool2d,
    mul,
    no_grad,
    pointwise,
    relu,
    same_padding,
    scalar,
    scale,
    sigmoid,
    square,
    sub,
    sum_all,
    zero_grads,
)


def rand_tensor(rng, shape, requires_grad=False):
    return Tensor(rng.standard_normal(shape), requires_grad=requires_grad)


class TestTensorBasics:
    def test_rejects_non_4d(self):
        with pytest.raises(ValueError, match="4-D"):
            Tensor(np.zeros((3, 3)))

    def test_scalar_helper(self):
        s = scalar(2.5)
        assert s.shape == (1, 1, 1, 1)
        assert s.item() == 2.5

    def test_item_rejects_non_scalar(self):
        with pytest.raises(ValueError):
            Tensor(np.zeros((1, 1, 2, 2))).item()


class TestConv2d:
    def test_hand_convolution_ones(self):
        x = Tensor(np.ones((1, 1, 3, 3)))
        w = Tensor(np.ones((1, 1, 3, 3)))
        out = conv2d(x, w, padding=1).data[0, 0]
        assert out[1, 1] == 9.0
        assert out[0, 0] == 4.0 and out[0, 2] == 4.0
        assert out[2, 0] == 4.0 and out[2, 2] == 4.0

    def test_dilation_2_center(self):
        x = Tensor(np.ones((1, 1, 5, 5)))
        w = Tensor(np.ones((1, 1, 3, 3)))
        out = conv2d(x, w, dilation=2, padding=2).data[0, 0]
        assert out[2, 2] == 9.0

    def test_grouped_dilated_matches_naive(self):
        rng = np.random.default_rng(7)
        x = rng.standard_normal((2, 6, 8, 8))
        w = rng.standard_normal((6, 2, 3, 3))  # groups=3
        b = rng.standard_normal(6)
        got = conv2d(
            Tensor(x), Tensor(w), Tensor(b.reshape(1, 6, 1, 1)),
            dilation=2, groups=3, padding=2,
        ).data
        want = naive_conv2d(x, w, b, dilation=2, groups=3, padding=2)
        assert np.max(np.abs(got - want)) < 1e-12

    @pytest.mark.parametrize("seed", range(12))
    def test_random_configs_match_naive(self, seed):
        rng = np.random.default_rng(seed)
        groups = int(rng.choice([1, 3, 9]))
        c_in = groups * int(rng.integers(1, 1 + 9 // groups))
        c_out = groups * int(rng.integers(1, 4))
        k = int(rng.choice([1, 3]))
        n = int(rng.integers(1, 3))
        h = int(rng.integers(6, 11))
        w = int(rng.integers(6, 11))
        dilation = int(rng.integers(1, 3)) if k > 1 else 1
        padding = int(rng.integers(0, dilation * (k - 1) + 1))
        x = rng.standard_normal((n, c_in, h, w))
        wt = rng.standard_normal((c_out, c_in // groups, k, k))
        got = conv2d(Tensor(x), Tensor(wt), dilation=dilation, groups=groups,
                     padding=padding).data
        want = naive_conv2d(x, wt, dilation=dilation, groups=groups, padding=padding)
        assert np.max(np.abs(got - want)) < 1e-12

    def test_gradients_match_finite_difference(self):
        rng = np.random.default_rng(3)
        x = rand_tensor(rng, (1, 3, 5, 5), requires_grad=True)
        w = rand_tensor(rng, (3, 1, 3, 3), requires_grad=True)
        b = Tensor(rng.standard_normal((1, 3, 1, 1)), requires_grad=True)
        coeff = rng.standard_normal((1, 3, 5, 5))  # random smooth functional

        def loss_tensor():
            out = conv2d(x, w, b, dilation=1, groups=3, padding=1)
            return sum_all(mul(out, Tensor(coeff)))

        loss = loss_tensor()
        backward(loss)
        for t in (x, w, b):
            num = numeric_grad(lambda: loss_tensor().item(), t.data)
            rel = np.abs(t.grad - num) / np.maximum(np.abs(num), 1e-6)
            assert rel.max() < 1e-6

    def test_shape_errors(self):
        x = Tensor(np.zeros((1, 4, 5, 5)))
        with pytest.raises(ValueError, match="divisible"):
            conv2d(x, Tensor(np.zeros((3, 1, 3, 3))), groups=3)
        with pytest.raises(ValueError, match="channels per group"):
            conv2d(x, Tensor(np.zeros((4, 3, 3, 3))), groups=1)
        with pytest.raises(ValueError, match="does not fit"):
            conv2d(Tensor(np.zeros((1, 1, 2, 2))), Tensor(np.zeros((1, 1, 3, 3))))
        with pytest.raises(ValueError, match="odd kernel"):
            same_padding(4, 1)

    def test_mac_counter(self):
        x = Tensor(np.zeros((2, 6, 8, 8)))
        w = Tensor(np.zeros((6, 2, 3, 3)))
        with count_macs() as macs:
            conv2d(x, w, dilation=1, groups=3, padding=1)
        assert macs.total == 2 * 6 * 2 * 3 * 3 * 8 * 8


class TestMaxPool:
    def test_two_by_two(self):
        x = Tensor(np.array([[1.0, 2.0], [3.0, 4.0]]).reshape(1, 1, 2, 2))
        assert maxpool2d(x, 2, 2).data.reshape(()) == 4.0

    def test_constant_input(self):
        x = Tensor(np.full((1, 2, 4, 4), 3.25))
        out = maxpool2d(x, 2, 2)
        assert np.all(out.data == 3.25)

    def test_matches_naive(self):
        rng = np.random.default_rng(11)
        x = rng.standard_normal((1, 2, 8, 8))
        got = maxpool2d(Tensor(x), 2, 2).data
        assert np.array_equal(got, naive_maxpool2d(x, 2, 2))

    def test_kernel_too_large_rejected(self):
        with pytest.raises(ValueError, match="larger than input"):
            maxpool2d(Tensor(np.zeros((1, 1, 2, 2))), 3, 1)

    def test_gradient_routes_to_first_max_on_ties(self):
        x = Tensor(np.full((1, 1, 2, 2), 5.0), requires_grad=True)
        out = maxpool2d(x, 2, 2)
        backward(sum_all(out))
        # row-major window order: top-left element wins the tie
        assert x.grad[0, 0, 0, 0] == 1.0
        assert x.grad.sum() == 1.0

    def test_gradient_matches_finite_difference(self):
        rng = np.random.default_rng(5)
        x = Tensor(rng.standard_normal((1, 2, 6, 6)), requires_grad=True)
        coeff = rng.standard_normal((1, 2, 3, 3))

        def loss_tensor():
            return sum_all(mul(maxpool2d(x, 2, 2), Tensor(coeff)))

        backward(loss_tensor())
        num = numeric_grad(lambda: loss_tensor().item(), x.data)
        assert np.max(np.abs(x.grad - num)) < 1e-6


class TestPointwise:
    def test_sigmoid_at_zero(self):
        assert sigmoid(scalar(0.0)).item() == 0.5

    def test_relu_values(self):
        assert relu(scalar(-3.0)).item() == 0.0
        assert relu(scalar(3.0)).item() == 3.0

    def test_sigmoid_gradient_at_zero(self):
        x = scalar(0.0, requires_grad=True)
        backward(sigmoid(x))
        num = numeric_grad(lambda: sigmoid(x).item(), x.data)
        assert abs(x.grad.reshape(()) - 0.25) < 1e-12
        assert abs(num.reshape(()) - 0.25) < 1e-6

    def test_sigmoid_extreme_inputs_no_overflow(self):
        x = Tensor(np.array([-700.0, 700.0]).reshape(1, 1, 1, 2))
        out = sigmoid(x).data
        assert out[0, 0, 0, 0] >= 0.0 and out[0, 0, 0, 1] <= 1.0

    def test_pointwise_dispatch(self):
        assert pointwise(scalar(1.0), "relu").item() == 1.0
        with pytest.raises(ValueError, match="pointwise"):
            pointwise(scalar(1.0), "tanh")


class TestConcatSplit:
    def test_split_concat_round_trip_bit_exact(self):
        rng = np.random.default_rng(2)
        x = Tensor(rng.standard_normal((2, 9, 4, 4)))
        parts = channel_split(x, [3, 3, 3])
        back = channel_concat(parts)
        assert np.array_equal(back.data, x.data)

    def test_concat_single_part_identity(self):
        x = Tensor(np.arange(16.0).reshape(1, 1, 4, 4))
        assert np.array_equal(channel_concat([x]).data, x.data)

    def test_concat_then_split_recovers_parts(self):
        rng = np.random.default_rng(4)
        parts = [Tensor(rng.standard_normal((1, s, 3, 3))) for s in (2, 3, 4)]
        joined = channel_concat(parts)
        again = channel_split(joined, [2, 3, 4])
        for orig, got in zip(parts, again):
            assert np.array_equal(orig.data, got.data)

    def test_errors(self):
        a = Tensor(np.zeros((1, 2, 3, 3)))
        b = Tensor(np.zeros((1, 2, 4, 4)))
        with pytest.raises(ValueError, match="disagree"):
            channel_concat([a, b])
        with pytest.raises(ValueError, match="sum"):
            channel_split(a, [1, 2])

    def test_gradients_match_finite_difference(self):
        rng = np.random.default_rng(6)
        x = Tensor(rng.standard_normal((1, 6, 3, 3)), requires_grad=True)
        coeff = rng.standard_normal((1, 6, 3, 3))

        def loss_tensor():
            parts = channel_split(x, [2, 4])
            rejoined = channel_concat(list(reversed(parts)))
            return sum_all(mul(rejoined, Tensor(coeff)))

        backward(loss_tensor())
        num = numeric_grad(lambda: loss_tensor().item(), x.data)
        assert np.max(np.abs(x.grad - num)) < 1e-6


class TestAffineMix:
    def test_gate_zero_returns_b_exactly(self):
        rng = np.random.default_rng(8)
        a = Tensor(rng.standard_normal((1, 2, 3, 3)))
        b = Tensor(rng.standard_normal((1, 2, 3, 3)))
        assert np.array_equal(affine_mix(a, b, 0.0).data, b.data)

    def test_gate_one_returns_a_exactly(self):
        rng = np.random.default_rng(9)
        a = Tensor(rng.standard_normal((1, 2, 3, 3)))
        b = Tensor(rng.standard_normal((1, 2, 3, 3)))
        assert np.array_equal(affine_mix(a, b, 1.0).data, a.data)

    def test_halfway_scalar(self):
        assert affine_mix(scalar(2.0), scalar(4.0), 0.5).item() == 3.0

    def test_shape_and_gate_validation(self):
        with pytest.raises(ValueError, match="mismatch"):
            affine_mix(scalar(1.0), Tensor(np.zeros((1, 1, 2, 2))), 0.5)
        with pytest.raises(ValueError, match="gate"):
            affine_mix(scalar(1.0), scalar(2.0), 1.5)

    def test_gradients_scaled_by_gate(self):
        a = scalar(2.0, requires_grad=True)
        b = scalar(4.0, requires_grad=True)
        backward(affine_mix(a, b, 0.25))
        assert a.grad.reshape(()) == 0.25
        assert b.grad.reshape(()) == 0.75


class TestBackward:
    def test_linear_grad_is_input(self):
        rng = np.random.default_rng(10)
        x = Tensor(rng.standard_normal((1, 1, 3, 3)))
        w = Tensor(rng.standard_normal((1, 1, 3, 3)), requires_grad=True)
        backward(sum_all(mul(w, x)))
        assert np.allclose(w.grad, x.data)

    def test_disconnected_parameter_gets_no_gradient(self):
        w = scalar(1.0, requires_grad=True)
        unused = scalar(2.0, requires_grad=True)
        backward(square(w))
        assert unused.grad is None

    def test_non_scalar_loss_rejected(self):
        with pytest.raises(ValueError, match="scalar"):
            backward(Tensor(np.zeros((1, 1, 2, 2)), requires_grad=True))

    def test_repeated_backward_accumulates(self):
        w = scalar(3.0, requires_grad=True)
        loss = square(w)
        backward(loss)
        backward(loss)
        assert w.grad.reshape(()) == 2 * (2.0 * 3.0)

    def test_backward_is_linear_in_the_loss(self):
        rng = np.random.default_rng(12)
        w = Tensor(rng.standard_normal((1, 2, 3, 3)), requires_grad=True)
        c1 = Tensor(rng.standard_normal((1, 2, 3, 3)))
        c2 = Tensor(rng.standard_normal((1, 2, 3, 3)))

        def l1():
            return sum_all(mul(square(w), c1))

        def l2():
            return sum_all(mul(relu(w), c2))

        a, b = 2.5, -1.25
        zero_grads([w])
        backward(add(scale(l1(), a), scale(l2(), b)))
        combined = w.grad.copy()
        zero_grads([w])
        backward(l1())
        g1 = w.grad.copy()
        zero_grads([w])
        backward(l2())
        g2 = w.grad.copy()
        assert np.allclose(combined, a * g1 + b * g2, atol=1e-12)

    def test_backward_on_leaf_scalar(self):
        w = scalar(5.0, requires_grad=True)
        backward(w)
        assert w.grad.reshape(()) == 1.0

    def test_no_grad_suppresses_recording(self):
        w = scalar(2.0, requires_grad=True)
        with no_grad():
            out = square(w)
        assert out.is_leaf() and not out.requires_grad

    def test_untracked_tensor_never_accumulates(self):
        x = scalar(2.0)  # requires_grad False
        w = scalar(3.0, requires_grad=True)
        backward(mul(x, w))
        assert x.grad is None


class TestTape:
    def test_entries_are_topologically_ordered(self):
        rng = np.random.default_rng(13)
        w = Tensor(rng.standard_normal((1, 1, 4, 4)), requires_grad=True)
        h = relu(w)
        loss = sum_all(add(mul(h, h), square(h)))
        tape = Tape.from_root(loss)
        assert len(tape) > 0
        for entry in tape.entries:
            assert all(i < entry.output_id for i in entry.input_ids)

    def test_all_ops_share_one_tape(self):
        w = scalar(1.0, requires_grad=True)
        loss = sum_all(square(relu(w)))
        assert len(Tape.from_root(loss)) == 3


class TestArithmetic:
    def test_add_sub_mul_scale(self):
        a, b = scalar(3.0), scalar(2.0)
        assert add(a, b).item() == 5.0
        assert sub(a, b).item() == 1.0
        assert mul(a, b).item() == 6.0
        assert scale(a, -2.0).item() == -6.0

    def test_log_rejects_non_positive(self):
        with pytest.raises(ValueError, match="positive"):
            log(scalar(0.0))

    def test_clip_gradient_masks_clamped_values(self):
        x = Tensor(np.array([0.5, 2.0]).reshape(1, 1, 1, 2), requires_grad=True)
        backward(sum_all(clip(x, 0.0, 1.0)))
        assert x.grad[0, 0, 0, 0] == 1.0
        assert x.grad[0, 0, 0, 1] == 0.0

    def test_elementwise_grads_match_finite_difference(self):
        rng = np.random.default_rng(14)
        x = Tensor(rng.uniform(0.1, 2.0, (1, 1, 3, 3)), requires_grad=True)
        coeff = rng.standard_normal((1, 1, 3, 3))

        def loss_tensor():
            return sum_all(mul(log(square(x)), Tensor(coeff)))

        backward(loss_tensor())
        num = numeric_grad(lambda: loss_tensor().item(), x.data)
        rel = np.abs(x.grad - num) / np.maximum(np.abs(num), 1e-6)
        assert rel.max() < 1e-6
