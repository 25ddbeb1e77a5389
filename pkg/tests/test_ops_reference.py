import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from actmem.errors import ParameterError, ShapeError
from actmem.ops import reference as ref
from actmem.ops.common import linear_backward, linear_forward, weighted_sum
from actmem.tape import Tape
from actmem.tensor import BoolMask, Role, Tensor

from oracles import gelu, gelu_prime, layernorm_loops, numeric_grad, softmax_loops

# GELU(-0.75179) from math.erf; GELU'(0) = Phi(0) = 1/2.
GELU_AT_X_MIN = -0.16997120747
X_MIN_5DP = -0.75179


class TestGelu:
    def test_zero(self):
        assert ref.gelu_ref_forward(Tensor([0.0])).data[0] == 0.0

    def test_minimum_value(self):
        y = ref.gelu_ref_forward(Tensor([X_MIN_5DP])).data[0]
        assert y == pytest.approx(GELU_AT_X_MIN, abs=1e-10)

    def test_asymptote(self):
        assert ref.gelu_ref_forward(Tensor([10.0])).data[0] == pytest.approx(10.0, abs=1e-12)

    def test_matches_erf_oracle(self, rng):
        x = rng.standard_normal(200) * 4
        np.testing.assert_allclose(ref.gelu_ref_forward(Tensor(x)).data, gelu(x), rtol=1e-14, atol=1e-15)

    def test_backward_at_zero(self):
        assert ref.gelu_ref_backward(Tensor([1.0]), Tensor([0.0])).data[0] == 0.5

    def test_backward_at_minimum(self):
        assert abs(ref.gelu_ref_backward(Tensor([1.0]), Tensor([X_MIN_5DP])).data[0]) < 1e-5

    def test_backward_matches_finite_differences(self, rng):
        x = rng.standard_normal(100) * 3
        h = 1e-5
        fd = (gelu(x + h) - gelu(x - h)) / (2 * h)
        np.testing.assert_allclose(ref.gelu_ref_backward(Tensor(np.ones(100)), Tensor(x)).data, fd,
                                   atol=1e-6)
        np.testing.assert_allclose(gelu_prime(x), fd, atol=1e-6)

    def test_float32_stays_float32(self):
        x = Tensor(np.linspace(-3, 3, 7), np.float32)
        assert ref.gelu_ref_forward(x).dtype == np.float32
        assert ref.gelu_ref_backward(np.ones(7, np.float32), x).dtype == np.float32

    def test_stashes_input_op_own(self):
        tape = Tape()
        x = tape.leaf(Tensor(np.ones(5), np.float32), name="x")
        ref.gelu_ref(tape, x)
        (entry,) = tape.ledger.entries
        assert (entry.tag, entry.role, entry.bytes) == ("x", Role.OP_OWN, 20)


def _ln(gamma, beta, eps=1e-5):
    return ref.LayerNormParams(Tensor(gamma), Tensor(beta), eps)


class TestLayerNorm:
    def test_hand_example(self):
        y = ref.layernorm_ref_forward(Tensor([[1.0, 3.0]]), _ln([1.0, 1.0], [0.0, 0.0])).data
        r = 1 / math.sqrt(1 + 1e-5)
        np.testing.assert_allclose(y, [[-r, r]], rtol=1e-15)
        np.testing.assert_allclose(y, [[-0.999995, 0.999995]], atol=1e-6)

    def test_constant_row(self):
        y = ref.layernorm_ref_forward(Tensor([[5.0, 5.0, 5.0]]), _ln(np.ones(3), np.zeros(3))).data
        np.testing.assert_array_equal(y, np.zeros((1, 3)))

    def test_affine(self):
        y = ref.layernorm_ref_forward(Tensor([[1.0, 3.0]]), _ln([2.0, 2.0], [1.0, 1.0])).data
        np.testing.assert_allclose(y, [[-0.99999, 2.99999]], atol=1e-5)

    def test_matches_loop_oracle(self, rng):
        x, g, b = rng.standard_normal((4, 7)), rng.standard_normal(7), rng.standard_normal(7)
        np.testing.assert_allclose(ref.layernorm_ref_forward(Tensor(x), _ln(g, b)).data,
                                   layernorm_loops(x, g, b, 1e-5), rtol=1e-12, atol=1e-12)

    def test_bad_params(self):
        with pytest.raises(ShapeError):
            _ln(np.ones(3), np.zeros(2))
        with pytest.raises(ParameterError):
            _ln(np.ones(3), np.zeros(3), eps=0.0)
        with pytest.raises(ShapeError):
            ref.layernorm_ref_forward(Tensor(np.ones((2, 4))), _ln(np.ones(3), np.zeros(3)))

    def test_zero_gradient(self, rng):
        x = Tensor(rng.standard_normal((3, 5)))
        for g in ref.layernorm_ref_backward(np.zeros((3, 5)), x, _ln(np.ones(5), np.zeros(5))):
            np.testing.assert_array_equal(g.data, 0.0)

    def test_dx_rows_sum_to_zero(self, rng):
        x = Tensor(rng.standard_normal((6, 9)))
        dx, _, _ = ref.layernorm_ref_backward(rng.standard_normal((6, 9)), x, _ln(np.ones(9), np.zeros(9)))
        np.testing.assert_allclose(dx.data.sum(axis=1), 0.0, atol=1e-10)

    def test_matches_finite_differences(self, rng):
        x0, g0, b0 = rng.standard_normal((3, 6)), 1 + 0.3 * rng.standard_normal(6), rng.standard_normal(6)
        w = rng.standard_normal((3, 6))

        def f(x, g, b):
            return float(np.sum(layernorm_loops(x, g, b, 1e-5) * w))

        dx, dg, db = ref.layernorm_ref_backward(w, Tensor(x0), _ln(g0, b0))
        np.testing.assert_allclose(dx.data, numeric_grad(lambda v: f(v, g0, b0), x0), rtol=1e-4, atol=1e-8)
        np.testing.assert_allclose(dg.data, numeric_grad(lambda v: f(x0, v, b0), g0), rtol=1e-4, atol=1e-8)
        np.testing.assert_allclose(db.data, numeric_grad(lambda v: f(x0, g0, v), b0), rtol=1e-4, atol=1e-8)

    def test_explicit_moments_agree(self, rng):
        x = rng.standard_normal((3, 4))
        g = rng.standard_normal((3, 4))
        params = _ln(np.ones(4), np.zeros(4))
        a = ref.layernorm_ref_backward(g, Tensor(x), params)
        b = ref.layernorm_ref_backward(g, Tensor(x), params, Tensor(x.mean(1)), Tensor(x.var(1)))
        for u, v in zip(a, b):
            np.testing.assert_allclose(u.data, v.data, rtol=1e-12)

    def test_stashes_only_the_input(self):
        tape = Tape()
        x = tape.leaf(Tensor(np.ones((2, 4)), np.float32), name="x")
        g = tape.leaf(Tensor(np.ones(4), np.float32))
        b = tape.leaf(Tensor(np.zeros(4), np.float32))
        ref.layernorm_ref(tape, x, g, b)
        assert tape.ledger.bytes_by_tag() == {"x": 32}

    @settings(max_examples=30, deadline=None)
    @given(st.floats(-3, 3), st.floats(0.1, 3), st.integers(0, 2**31))
    def test_constant_affine_row_statistics(self, beta, gamma, seed):
        x = np.random.default_rng(seed).standard_normal((3, 16)) * 5
        y = ref.layernorm_ref_forward(Tensor(x), _ln(np.full(16, gamma), np.full(16, beta))).data
        np.testing.assert_allclose(y.mean(axis=1), beta, atol=1e-10)
        np.testing.assert_allclose(y.std(axis=1), gamma, rtol=1e-3)


class TestSoftmax:
    def test_symmetric(self):
        np.testing.assert_array_equal(ref.softmax_ref_forward(Tensor([0.0, 0.0])).data, [0.5, 0.5])

    def test_hand_example(self):
        y = ref.softmax_ref_forward(Tensor([math.log(1), math.log(3)])).data
        np.testing.assert_allclose(y, [0.25, 0.75], rtol=1e-15)

    @settings(max_examples=40, deadline=None)
    @given(st.integers(1, 4), st.integers(1, 10), st.floats(0.1, 50), st.integers(0, 2**31))
    def test_rows_sum_to_one(self, n, m, spread, seed):
        z = np.random.default_rng(seed).standard_normal((n, m)) * spread
        y = ref.softmax_ref_forward(Tensor(z)).data
        np.testing.assert_allclose(y.sum(axis=-1), 1.0, atol=1e-12)
        np.testing.assert_allclose(y, softmax_loops(z), rtol=1e-12, atol=1e-300)

    def test_backward_matches_finite_differences(self, rng):
        z0, w = rng.standard_normal((2, 5)), rng.standard_normal((2, 5))
        y = ref.softmax_ref_forward(Tensor(z0))
        dz = ref.softmax_backward(w, y).data
        fd = numeric_grad(lambda z: float(np.sum(softmax_loops(z) * w)), z0)
        np.testing.assert_allclose(dz, fd, rtol=1e-4, atol=1e-9)

    def test_stashes_input_and_output(self):
        tape = Tape()
        z = tape.leaf(Tensor(np.zeros((2, 3)), np.float32), name="z")
        ref.softmax_ref(tape, z, name="y")
        assert tape.ledger.bytes_by_tag() == {"z": 24, "y": 24}


class TestDropout:
    def test_p_zero_is_identity(self, rng):
        x = Tensor(rng.standard_normal(10))
        y, m = ref.dropout_ref_forward(x, ref.DropoutSpec(0.0, seed=3))
        np.testing.assert_array_equal(y.data, x.data)
        assert m.bits.all()

    def test_injected_mask(self):
        spec = ref.DropoutSpec(0.5, injected_mask=BoolMask(np.array([1, 0, 1, 0])))
        y, _ = ref.dropout_ref_forward(Tensor([1.0, 2.0, 3.0, 4.0]), spec)
        np.testing.assert_array_equal(y.data, [2.0, 0.0, 6.0, 0.0])

    def test_seed_determinism(self):
        a = ref.make_dropout_mask(ref.DropoutSpec(0.3, seed=11), (50,))
        b = ref.make_dropout_mask(ref.DropoutSpec(0.3, seed=11), (50,))
        np.testing.assert_array_equal(a.bits, b.bits)

    def test_drop_rate(self):
        bits = ref.make_dropout_mask(ref.DropoutSpec(0.25, seed=0), (200_000,)).bits
        assert abs(1 - bits.mean() - 0.25) < 0.005

    @pytest.mark.parametrize("p", [1.0, -0.1, 1.5])
    def test_bad_p(self, p):
        with pytest.raises(ParameterError):
            ref.DropoutSpec(p)

    def test_injected_mask_shape_checked(self):
        spec = ref.DropoutSpec(0.5, injected_mask=BoolMask(np.ones(3, dtype=bool)))
        with pytest.raises(ShapeError):
            ref.dropout_ref_forward(Tensor(np.ones(4)), spec)

    def test_mask_plus_consumer_is_five_bytes_per_element(self, rng):
        from actmem.ops.common import matmul
        tape = Tape()
        x = tape.leaf(Tensor(rng.standard_normal((4, 4)), np.float32))
        v = tape.leaf(Tensor(rng.standard_normal((4, 2)), np.float32), name="v")
        d = ref.dropout_ref(tape, x, ref.DropoutSpec(0.1), name="d")
        matmul(tape, d, v)
        by_tag = tape.ledger.bytes_by_tag()
        assert by_tag["d"] + by_tag["d.mask"] == 5 * 16


class TestLinear:
    def test_forward_backward(self, rng):
        x0, w0, b0 = rng.standard_normal((2, 3, 4)), rng.standard_normal((4, 5)), rng.standard_normal(5)
        y = linear_forward(Tensor(x0), Tensor(w0), Tensor(b0)).data
        np.testing.assert_allclose(y, x0 @ w0 + b0)
        g = rng.standard_normal((2, 3, 5))
        dx, dw, db = linear_backward(g, Tensor(x0), Tensor(w0))
        f = lambda x, w, b: float(np.sum((x @ w + b) * g))  # noqa: E731
        np.testing.assert_allclose(dx.data, numeric_grad(lambda v: f(v, w0, b0), x0), rtol=1e-6)
        np.testing.assert_allclose(dw.data, numeric_grad(lambda v: f(x0, v, b0), w0), rtol=1e-6)
        np.testing.assert_allclose(db.data, numeric_grad(lambda v: f(x0, w0, v), b0), rtol=1e-6)

    def test_shape_errors(self):
        with pytest.raises(ShapeError):
            linear_forward(Tensor(np.ones((2, 3))), Tensor(np.ones((4, 5))))
        with pytest.raises(ShapeError):
            linear_forward(Tensor(np.ones((2, 4))), Tensor(np.ones((4, 5))), Tensor(np.ones(4)))


class TestSdpa:
    def _run(self, q, k, v, spec, w=None):
        tape = Tape()
        Q, K, V = (tape.leaf(Tensor(a)) for a in (q, k, v))
        out = ref.sdpa_ref(tape, Q, K, V, spec)
        return tape, out, (Q, K, V)

    def test_uniform_scores_average_values(self):
        S = 4
        q = np.zeros((1, S, 3))
        k = np.ones((1, S, 3))
        v = np.eye(S)[None]
        _, out, _ = self._run(q, k, v, ref.DropoutSpec(0.0))
        np.testing.assert_allclose(out.value.data, np.full((1, S, S), 1 / S))

    def test_single_key(self, rng):
        q, k, v = rng.standard_normal((2, 1, 3)), rng.standard_normal((2, 1, 3)), rng.standard_normal((2, 1, 5))
        _, out, _ = self._run(q, k, v, ref.DropoutSpec(0.0))
        np.testing.assert_allclose(out.value.data, v, rtol=1e-15)

    def test_head_dim_mismatch(self, rng):
        with pytest.raises(ShapeError):
            self._run(rng.standard_normal((1, 2, 3)), rng.standard_normal((1, 2, 4)),
                      rng.standard_normal((1, 2, 3)), ref.DropoutSpec(0.0))

    def test_gradients_match_finite_differences(self, rng):
        q0, k0, v0 = (rng.standard_normal((2, 4, 3)) for _ in range(3))
        w = rng.standard_normal((2, 4, 3))
        mask = BoolMask(rng.random((2, 4, 4)) >= 0.2)
        spec = ref.DropoutSpec(0.2, injected_mask=mask)

        def f(q, k, v):
            s = q @ np.swapaxes(k, -1, -2) / math.sqrt(3)
            p = softmax_loops(s) * mask.bits / 0.8
            return float(np.sum(p @ v * w))

        tape, out, (Q, K, V) = self._run(q0, k0, v0, spec)
        g = tape.backward(weighted_sum(tape, out, w))
        np.testing.assert_allclose(g[Q].data, numeric_grad(lambda a: f(a, k0, v0), q0), rtol=1e-4, atol=1e-9)
        np.testing.assert_allclose(g[K].data, numeric_grad(lambda a: f(q0, a, v0), k0), rtol=1e-4, atol=1e-9)
        np.testing.assert_allclose(g[V].data, numeric_grad(lambda a: f(q0, k0, a), v0), rtol=1e-4, atol=1e-9)

    def test_three_maps_and_a_mask(self, rng):
        tape = Tape()
        B, S = 2, 5
        Q, K, V = (tape.leaf(Tensor(rng.standard_normal((B, S, 4)), np.float32)) for _ in range(3))
        ref.sdpa_ref(tape, Q, K, V, ref.DropoutSpec(0.1))
        by_tag = tape.ledger.bytes_by_tag()
        n = B * S * S
        assert by_tag["attn.scores"] == by_tag["attn.probs"] == by_tag["attn.dropout.out"] == 4 * n
        assert by_tag["attn.dropout.mask"] == n
