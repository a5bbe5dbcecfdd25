"""Dense kernel tests: attention vs a naive oracle, bias structure, jacobians, init."""
import numpy as np
import pytest

from remogen.errors import DimensionError, NumericError
from remogen.tensorcore import (
    AttentionParams,
    RelBiasParams,
    Rng,
    finite_diff_jacobian,
    identity_attention,
    layer_norm,
    mha_forward,
    relative_bias,
    seeded_init,
)

F32 = np.float32


def naive_attention(q_in, kv_in, p, bias=None):
    """Independent O(T^2) re-implementation: per-head, per-query python loops."""
    t_q, t_kv = q_in.shape[0], kv_in.shape[0]
    dh = p.width // p.heads
    q = q_in.astype(np.float64) @ p.w_q.astype(np.float64)
    k = kv_in.astype(np.float64) @ p.w_k.astype(np.float64)
    v = kv_in.astype(np.float64) @ p.w_v.astype(np.float64)
    out = np.zeros((t_q, p.width))
    for h in range(p.heads):
        qs, ks, vs = (m[:, h * dh:(h + 1) * dh] for m in (q, k, v))
        for i in range(t_q):
            logits = np.array([qs[i] @ ks[j] / np.sqrt(dh) for j in range(t_kv)])
            if bias is not None:
                logits = logits + bias[h, i]
            w = np.exp(logits - logits.max())
            w = w / w.sum()
            out[i, h * dh:(h + 1) * dh] = sum(w[j] * vs[j] for j in range(t_kv))
    return (out @ p.w_o.astype(np.float64)).astype(F32)


def random_attention_params(gen, heads, width):
    mats = [gen.standard_normal((width, width)).astype(F32) for _ in range(4)]
    return AttentionParams(heads, width, *mats,
                           ln_gain=np.ones(width, dtype=F32),
                           ln_offset=np.zeros(width, dtype=F32))


class TestMhaForward:
    def test_single_key_returns_value_row(self):
        p = identity_attention(4)
        q = np.ones((1, 4), dtype=F32)
        v = np.array([[2.0, -1.0, 0.5, 7.0]], dtype=F32)
        out = mha_forward(q, v, p)
        np.testing.assert_allclose(out, v, atol=1e-6)

    def test_masked_key_is_ignored(self):
        p = identity_attention(4)
        q = np.zeros((1, 4), dtype=F32)
        kv = np.array([[1.0, 2.0, 3.0, 4.0], [9.0, 9.0, 9.0, 9.0]], dtype=F32)
        bias = np.array([[[0.0, -1e9]]], dtype=F32)
        out = mha_forward(q, kv, p, bias)
        np.testing.assert_allclose(out, kv[:1], atol=1e-6)

    def test_matches_oracle_seed7(self):
        gen = Rng(7).generator("mha")
        q = gen.standard_normal((4, 8)).astype(F32)
        kv = gen.standard_normal((4, 8)).astype(F32)
        p = random_attention_params(gen, heads=2, width=8)
        np.testing.assert_allclose(mha_forward(q, kv, p), naive_attention(q, kv, p),
                                   atol=1e-6)

    @pytest.mark.parametrize("seed", range(12))
    def test_matches_oracle_small_shapes(self, seed):
        gen = Rng(seed).generator("sweep")
        heads = int(gen.choice([1, 2, 4]))
        width = heads * int(gen.integers(1, 16 // heads + 1))
        t_q, t_kv = int(gen.integers(1, 9)), int(gen.integers(1, 9))
        q = gen.standard_normal((t_q, width)).astype(F32)
        kv = gen.standard_normal((t_kv, width)).astype(F32)
        p = random_attention_params(gen, heads, width)
        bias = gen.standard_normal((heads, t_q, t_kv)).astype(F32)
        np.testing.assert_allclose(mha_forward(q, kv, p, bias),
                                   naive_attention(q, kv, p, bias), atol=1e-6)

    def test_bias_row_shift_invariance(self):
        gen = Rng(3).generator("shift")
        q = gen.standard_normal((3, 8)).astype(F32)
        kv = gen.standard_normal((5, 8)).astype(F32)
        p = random_attention_params(gen, 2, 8)
        bias = gen.standard_normal((2, 3, 5)).astype(F32)
        shifted = bias + 17.5
        np.testing.assert_allclose(mha_forward(q, kv, p, bias),
                                   mha_forward(q, kv, p, shifted), atol=1e-5)

    def test_shape_and_finiteness_errors(self):
        p = identity_attention(4)
        with pytest.raises(DimensionError):
            mha_forward(np.ones((2, 3), dtype=F32), np.ones((2, 4), dtype=F32), p)
        with pytest.raises(DimensionError):
            mha_forward(np.ones((2, 4), dtype=F32), np.ones((2, 4), dtype=F32), p,
                        bias=np.ones((1, 3, 3), dtype=F32))
        bad = np.full((2, 4), np.nan, dtype=F32)
        with pytest.raises(NumericError):
            mha_forward(bad, np.ones((2, 4), dtype=F32), p)

    def test_deterministic(self):
        gen = Rng(9).generator("det")
        q = gen.standard_normal((4, 8)).astype(F32)
        kv = gen.standard_normal((6, 8)).astype(F32)
        p = random_attention_params(gen, 2, 8)
        assert np.array_equal(mha_forward(q, kv, p), mha_forward(q, kv, p))


class TestRelativeBias:
    def test_zero_offset_hits_cosine_axis(self):
        p = RelBiasParams(omega=0.25, w_b=np.eye(2, dtype=F32))
        b = relative_bias(1, 1, p)
        # dt = 0: features are [sin 0, cos 0] = [0, 1]
        np.testing.assert_allclose(b[:, 0, 0], np.eye(2, dtype=F32) @ np.array([0.0, 1.0]),
                                   atol=1e-7)

    def test_known_scalar_value(self):
        p = RelBiasParams(omega=0.25, w_b=np.eye(2, dtype=F32))
        b = relative_bias(3, 1, p)
        # dt = 2 with identity map: [sin 0.5, cos 0.5]
        np.testing.assert_allclose(b[:, 2, 0], [0.4794, 0.8776], atol=1e-4)

    def test_shift_invariance(self):
        p = RelBiasParams(omega=0.25, w_b=np.array([[0.3, -1.1], [0.7, 0.2]], dtype=F32))
        b = relative_bias(5, 5, p)
        np.testing.assert_array_equal(b[:, 1:, 1:], b[:, :-1, :-1])

    @pytest.mark.parametrize("t", [1, 2, 7, 16])
    def test_function_of_offset_only(self, t):
        p = RelBiasParams(omega=0.25, w_b=np.array([[1.0, 0.5], [-0.25, 2.0]], dtype=F32))
        b = relative_bias(t, t, p)
        for i in range(t):
            for j in range(t):
                ref = b[:, max(i - j, 0), max(j - i, 0)]
                np.testing.assert_allclose(b[:, i, j], ref, atol=0)

    def test_rejects_bad_params(self):
        with pytest.raises(DimensionError):
            RelBiasParams(omega=-1.0, w_b=np.eye(2, dtype=F32))
        with pytest.raises(DimensionError):
            relative_bias(0, 3, RelBiasParams(w_b=np.eye(2, dtype=F32)))


class TestFiniteDiffJacobian:
    def test_linear_map_is_exact(self):
        gen = Rng(1).generator("lin")
        a = gen.standard_normal((5, 3))
        jac = finite_diff_jacobian(lambda x: a @ x, np.array([0.2, -0.4, 1.1]), h=1e-3)
        np.testing.assert_allclose(jac, a, atol=1e-9)

    @pytest.mark.parametrize("h", [1e-5, 1e-4, 1e-3, 1e-2])
    def test_affine_map_any_step(self, h):
        gen = Rng(2).generator("aff")
        a = gen.standard_normal((4, 4))
        b = gen.standard_normal(4)
        jac = finite_diff_jacobian(lambda x: a @ x + b, gen.standard_normal(4), h=h)
        np.testing.assert_allclose(jac, a, atol=1e-8)

    def test_square_scalar(self):
        jac = finite_diff_jacobian(lambda x: x ** 2, np.array([3.0]), h=1e-3)
        np.testing.assert_allclose(jac, [[6.0]], atol=1e-5)

    def test_constant_map(self):
        jac = finite_diff_jacobian(lambda x: np.array([4.2, -1.0]), np.zeros(3))
        assert np.all(jac == 0)

    def test_nonfinite_output_raises(self):
        with pytest.raises(NumericError):
            finite_diff_jacobian(lambda x: np.array([np.inf]), np.zeros(2))


class TestSeededInit:
    def test_zeros_scheme(self):
        assert np.all(seeded_init((3, 5), "zeros", Rng(1)) == 0)

    def test_same_seed_bit_identical(self):
        a = seeded_init((4, 4), "uniform-fan", Rng(42))
        b = seeded_init((4, 4), "uniform-fan", Rng(42))
        assert np.array_equal(a, b)

    def test_different_seeds_differ(self):
        a = seeded_init((4, 4), "uniform-fan", Rng(1))
        b = seeded_init((4, 4), "uniform-fan", Rng(2))
        assert not np.array_equal(a, b)

    def test_child_streams_differ(self):
        rng = Rng(7)
        a = seeded_init((4, 4), "uniform-fan", rng.child("a"))
        b = seeded_init((4, 4), "uniform-fan", rng.child("b"))
        assert not np.array_equal(a, b)

    def test_unknown_scheme(self):
        with pytest.raises(DimensionError):
            seeded_init((2, 2), "orthogonal", Rng(0))


def test_layer_norm_normalizes_rows():
    gen = Rng(4).generator("ln")
    x = gen.standard_normal((6, 16)).astype(F32) * 3 + 1
    out = layer_norm(x, np.ones(16, dtype=F32), np.zeros(16, dtype=F32))
    np.testing.assert_allclose(out.mean(axis=1), 0, atol=1e-6)
    np.testing.assert_allclose(out.std(axis=1), 1, atol=1e-3)
