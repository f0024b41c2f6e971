"""Autodiff core: primitive semantics, broadcasting, tape, serialization."""

import io
import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from changecap import ops
from changecap.gradcheck import finite_difference_check
from changecap.rng import stream
from changecap.tensor import (ShapeError, Tape, Tensor, read_array,
                              write_array)

from oracles import tile_broadcast


def t64(arr):
    return Tensor(np.asarray(arr), dtype=np.float64)


class TestElementwise:
    def test_silu_at_zero(self):
        assert ops.silu(t64([0.0])).item() == 0.0

    def test_exp_at_zero(self):
        assert ops.exp(t64([0.0])).item() == 1.0

    def test_sub_self_cancels(self):
        a = t64(np.random.randn(3, 4))
        assert np.array_equal(ops.sub(a, a).data, np.zeros((3, 4)))

    def test_dispatcher_rejects_arity_mismatch(self):
        a = t64([1.0])
        with pytest.raises(ValueError):
            ops.elementwise("add", a)
        with pytest.raises(ValueError):
            ops.elementwise("exp", a, a)
        with pytest.raises(ValueError):
            ops.elementwise("nope", a)

    def test_shape_mismatch_reports_both_shapes(self):
        with pytest.raises(ShapeError, match=r"\(3, 4\).*\(2, 4\)"):
            ops.add(t64(np.zeros((3, 4))), t64(np.zeros((2, 4))))

    def test_softplus_large_inputs_stable(self):
        out = ops.softplus(t64([-800.0, 0.0, 800.0])).data
        assert np.allclose(out, [0.0, math.log(2.0), 800.0])
        assert np.isfinite(out).all()


class TestMatmul:
    def test_identity(self):
        v = np.random.randn(3, 1)
        out = ops.matmul(t64(np.eye(3)), t64(v))
        assert np.allclose(out.data, v)

    def test_hand_product(self):
        out = ops.matmul(t64([[1.0, 2.0], [3.0, 4.0]]), t64([[1.0], [1.0]]))
        assert np.array_equal(out.data, [[3.0], [7.0]])

    def test_inner_mismatch(self):
        with pytest.raises(ShapeError):
            ops.matmul(t64(np.zeros((2, 3))), t64(np.zeros((4, 2))))

    def test_grad_of_sum_is_column_sums(self):
        # d sum(A @ B) / dA = broadcast of column sums of B
        b = np.random.randn(4, 5)
        a = Tensor(np.random.randn(3, 4), dtype=np.float64, requires_grad=True)
        with Tape() as tape:
            tape.backward(ops.matmul(a, t64(b)).sum())
        assert np.allclose(a.grad, np.tile(b.sum(axis=1), (3, 1)))


class TestLayerNorm:
    def test_constant_input_zeros(self):
        x = t64(np.full((2, 5), 3.7))
        out = ops.layer_norm(x, t64(np.ones(5)), t64(np.zeros(5)))
        assert np.allclose(out.data, 0.0)

    def test_row_mean_is_beta_mean(self):
        x = t64(np.random.randn(4, 6))
        beta = np.random.randn(6)
        out = ops.layer_norm(x, t64(np.ones(6)), t64(beta))
        assert np.allclose(out.data.mean(axis=-1), beta.mean(), atol=1e-12)


class TestDepthwiseConv:
    def test_impulse_kernel_is_identity(self):
        x = np.random.randn(7, 3)
        k = np.zeros((3, 3))
        k[1] = 1.0  # center tap
        out = ops.depthwise_conv1d(t64(x), t64(k), "same")
        assert np.allclose(out.data, x)

    def test_hand_convolution_with_zero_pad(self):
        out = ops.depthwise_conv1d(t64([[1.0], [1.0], [1.0]]),
                                   t64(np.ones((3, 1))), "same")
        assert np.allclose(out.data[:, 0], [2.0, 3.0, 2.0])

    def test_channels_independent(self):
        x = np.random.randn(6, 4)
        k = np.random.randn(3, 4)
        base = ops.depthwise_conv1d(t64(x), t64(k), "same").data
        x2 = x.copy()
        x2[:, 1] += 1.0
        bumped = ops.depthwise_conv1d(t64(x2), t64(k), "same").data
        assert np.allclose(bumped[:, [0, 2, 3]], base[:, [0, 2, 3]])
        assert not np.allclose(bumped[:, 1], base[:, 1])

    def test_causal_padding_sees_no_future(self):
        x = np.random.randn(6, 2)
        k = np.random.randn(3, 2)
        base = ops.depthwise_conv1d(t64(x), t64(k), "causal").data
        x2 = x.copy()
        x2[4] += 1.0
        bumped = ops.depthwise_conv1d(t64(x2), t64(k), "causal").data
        assert np.allclose(bumped[:4], base[:4])

    def test_oversized_kernel_rejected(self):
        from changecap.tensor import ConfigError
        with pytest.raises(ConfigError):
            ops.depthwise_conv1d(t64(np.zeros((2, 1))), t64(np.zeros((7, 1))), "same")

    def test_even_kernel_rejected_for_same(self):
        from changecap.tensor import ConfigError
        with pytest.raises(ConfigError):
            ops.depthwise_conv1d(t64(np.zeros((5, 1))), t64(np.zeros((4, 1))), "same")


class TestFlip:
    def test_involution(self):
        x = np.random.randn(5, 3)
        assert np.array_equal(ops.flip_seq(ops.flip_seq(t64(x))).data, x)

    def test_single_row_identity(self):
        x = np.random.randn(1, 4)
        assert np.array_equal(ops.flip_seq(t64(x)).data, x)

    def test_row_order(self):
        x = np.arange(6.0).reshape(3, 2)
        assert np.array_equal(ops.flip_seq(t64(x)).data, x[::-1])


class TestCrossEntropy:
    def test_uniform_logits(self):
        loss = ops.softmax_cross_entropy(t64(np.zeros((2, 16))), np.array([3, 9]))
        assert abs(loss.item() - math.log(16)) < 1e-12

    def test_margin_drives_loss_to_zero(self):
        logits = np.zeros((1, 5))
        prev = None
        for margin in (5.0, 20.0, 80.0):
            logits[0, 2] = margin
            loss = ops.softmax_cross_entropy(t64(logits), np.array([2])).item()
            if prev is not None:
                assert loss < prev
            prev = loss
        assert prev < 1e-12

    def test_gradient_is_softmax_minus_onehot(self):
        logits = Tensor(np.random.randn(3, 7), dtype=np.float64, requires_grad=True)
        targets = np.array([1, 6, 0])
        with Tape() as tape:
            tape.backward(ops.softmax_cross_entropy(logits, targets))
        z = logits.data - logits.data.max(-1, keepdims=True)
        p = np.exp(z) / np.exp(z).sum(-1, keepdims=True)
        onehot = np.eye(7)[targets]
        assert np.allclose(logits.grad, (p - onehot) / 3, atol=1e-12)

    def test_out_of_range_target_identifies_position(self):
        with pytest.raises(IndexError, match="1,"):
            ops.softmax_cross_entropy(t64(np.zeros((3, 4))), np.array([0, 9, 1]))

    def test_shift_invariance(self):
        logits = np.random.randn(4, 9)
        targets = np.random.randint(0, 9, size=4)
        a = ops.softmax_cross_entropy(t64(logits), targets).item()
        b = ops.softmax_cross_entropy(t64(logits + 123.456), targets).item()
        assert abs(a - b) <= 1e-12


class TestBackwardContract:
    def test_sum_gradient_is_ones(self):
        x = Tensor(np.random.randn(3), dtype=np.float64, requires_grad=True)
        with Tape() as tape:
            tape.backward(x.sum())
        assert np.array_equal(x.grad, np.ones(3))

    def test_square_sum_gradient(self):
        x = Tensor(np.array([1.0, 2.0]), requires_grad=True)
        with Tape() as tape:
            tape.backward((x * x).sum())
        assert np.allclose(x.grad, [2.0, 4.0])

    def test_fanout_accumulates(self):
        x = Tensor(np.random.randn(4), dtype=np.float64, requires_grad=True)
        with Tape() as tape:
            tape.backward(x.sum() + x.sum())
        assert np.allclose(x.grad, 2.0)

    def test_non_scalar_loss_rejected(self):
        from changecap.tensor import TapeError
        x = Tensor(np.random.randn(3), requires_grad=True)
        with Tape() as tape:
            y = x * x
            with pytest.raises(TapeError):
                tape.backward(y)

    def test_detached_tensor_never_receives_gradient(self):
        x = Tensor(np.random.randn(3), requires_grad=True)
        frozen = Tensor(np.random.randn(3))
        with Tape() as tape:
            tape.backward((x * frozen).sum())
        assert x.grad is not None
        assert frozen.grad is None

    def test_no_tape_records_nothing(self):
        x = Tensor(np.random.randn(3), requires_grad=True)
        y = (x * x).sum()
        assert y.node is None

    def test_module_level_backward_uses_active_tape(self):
        from changecap.tensor import TapeError, backward
        x = Tensor(np.random.randn(3), dtype=np.float64, requires_grad=True)
        with Tape():
            backward((x * x).sum())
        assert np.allclose(x.grad, 2 * x.data)
        with pytest.raises(TapeError):
            backward(x.sum())


def test_gradcheck_reports_nonfinite_coordinate():
    from changecap.gradcheck import GradCheckError

    def exploding(t):
        return ops.exp(t * 1000.0).sum()

    with np.errstate(over="ignore"):  # the overflow-to-inf is the point
        with pytest.raises(GradCheckError, match="coordinate"):
            finite_difference_check(exploding, Tensor(np.full(3, 0.8), dtype=np.float64))


@settings(max_examples=60, deadline=None)
@given(st.data())
def test_broadcasting_matches_explicit_tiling(data):
    rng = np.random.default_rng(data.draw(st.integers(0, 2 ** 31)))
    base = data.draw(st.lists(st.integers(1, 4), min_size=1, max_size=3))
    # drop leading dims and/or squash axes to 1 to get a broadcast partner
    keep = data.draw(st.integers(0, len(base) - 1))
    other = [d if data.draw(st.booleans()) else 1 for d in base[keep:]]
    a = rng.normal(size=tuple(base))
    b = rng.normal(size=tuple(other)) if other else rng.normal(size=(1,))
    for op, nop in ((ops.add, np.add), (ops.mul, np.multiply), (ops.sub, np.subtract)):
        got = op(t64(a), t64(b)).data
        want = tile_broadcast(nop, a, b)
        assert np.allclose(got, want, atol=1e-12)


_PRIMITIVE_CASES = [
    ("add", lambda t, aux: (t + aux["b"]).sum()),
    ("mul", lambda t, aux: (t * aux["b"]).sum()),
    ("exp", lambda t, aux: ops.exp(t * 0.3).sum()),
    ("sigmoid", lambda t, aux: ops.sigmoid(t).sum()),
    ("softplus", lambda t, aux: ops.softplus(t).sum()),
    ("silu", lambda t, aux: ops.silu(t).sum()),
    ("matmul", lambda t, aux: ops.matmul(t, aux["w"]).sum()),
    ("layer_norm", lambda t, aux: ops.layer_norm(t, aux["g"], aux["be"]).sum()),
    ("conv", lambda t, aux: ops.depthwise_conv1d(t, aux["k"], "same").sum()),
    ("softmax", lambda t, aux: (ops.softmax(t) * aux["p"]).sum()),
]


@pytest.mark.parametrize("seed", range(5))
@pytest.mark.parametrize("name,fn", _PRIMITIVE_CASES)
def test_primitive_gradients_50_trials(name, fn, seed):
    rng = stream(seed, f"fd-{name}")
    aux = {
        "b": t64(rng.normal(size=(4,))),
        "w": t64(rng.normal(size=(4, 3))),
        "g": t64(rng.normal(size=4) + 1.0),
        "be": t64(rng.normal(size=4)),
        "k": t64(rng.normal(size=(3, 4))),
        "p": t64(rng.normal(size=(3, 4))),
    }
    x = Tensor(rng.normal(size=(3, 4)), dtype=np.float64)
    err = finite_difference_check(lambda t: fn(t, aux), x)
    assert err <= 1e-6, f"{name} seed {seed}: rel err {err:.3e}"


class TestSerialization:
    def test_roundtrip_f32_bitwise(self):
        arr = np.random.randn(4, 5, 2).astype(np.float32)
        buf = io.BytesIO()
        write_array(buf, arr)
        buf.seek(0)
        back = read_array(buf)
        assert back.dtype == np.float32
        assert np.array_equal(back, arr)

    def test_roundtrip_f64_and_scalar(self):
        buf = io.BytesIO()
        write_array(buf, np.float64(3.25).reshape(()))
        write_array(buf, np.arange(6.0).reshape(2, 3))
        buf.seek(0)
        assert read_array(buf).item() == 3.25
        assert np.array_equal(read_array(buf), np.arange(6.0).reshape(2, 3))

    def test_bad_magic_rejected(self):
        with pytest.raises(ValueError, match="magic"):
            read_array(io.BytesIO(b"NOPE" + b"\x00" * 16))
