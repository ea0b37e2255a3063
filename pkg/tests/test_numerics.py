import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from quality_fusion.errors import ContractViolation, DegenerateInputError
from quality_fusion.numerics import (
    TwoLayerMlp,
    dump_tensor,
    load_tensor,
    logistic,
    logit,
    matmul,
    normalize_rows,
    qr_orthonormalize,
    row_l2_norms,
    softmax,
    softmax_backward,
    softmax_rows,
    sym_eig,
)


def test_matmul_examples():
    a = np.arange(12.0).reshape(3, 4)
    np.testing.assert_array_equal(matmul(np.eye(3), a), a)
    np.testing.assert_array_equal(matmul(a, np.zeros((4, 2))), np.zeros((3, 2)))
    np.testing.assert_array_equal(matmul([[1, 2], [3, 4]], [[5], [6]]), [[17.0], [39.0]])


@settings(max_examples=100, deadline=None)
@given(
    st.integers(min_value=0, max_value=2**32 - 1),
    st.integers(min_value=1, max_value=12),
    st.integers(min_value=1, max_value=12),
    st.integers(min_value=1, max_value=12),
    st.integers(min_value=1, max_value=12),
)
def test_matmul_is_associative(seed, m, k, n, p):
    rng = np.random.default_rng(seed)
    a, b, c = rng.standard_normal((m, k)), rng.standard_normal((k, n)), rng.standard_normal((n, p))
    left = matmul(matmul(a, b), c)
    right = matmul(a, matmul(b, c))
    # relative to the norm product, which bounds both sides
    scale = np.linalg.norm(a) * np.linalg.norm(b) * np.linalg.norm(c)
    assert np.linalg.norm(left - right) <= 1e-9 * scale


def test_matmul_dimension_mismatch():
    with pytest.raises(ContractViolation):
        matmul(np.ones((2, 3)), np.ones((2, 3)))


def test_softmax_examples():
    np.testing.assert_allclose(softmax_rows(np.full((1, 5), 2.5)), np.full((1, 5), 0.2))
    np.testing.assert_array_equal(softmax_rows([[0.0]]), [[1.0]])
    np.testing.assert_allclose(softmax_rows([[math.log(3.0), 0.0]]), [[0.75, 0.25]], atol=1e-15)


def test_softmax_large_logits_stay_finite():
    out = softmax(np.array([[1000.0, 999.0, -1000.0]]))
    assert np.all(np.isfinite(out))
    assert out[0, 0] > out[0, 1] > out[0, 2]


@settings(max_examples=200, deadline=None)
@given(
    st.integers(min_value=0, max_value=2**32 - 1),
    st.integers(min_value=1, max_value=6),
    st.integers(min_value=1, max_value=9),
    st.floats(min_value=1e-3, max_value=50.0),
)
def test_softmax_rows_sum_to_one(seed, rows, cols, scale):
    x = scale * np.random.default_rng(seed).standard_normal((rows, cols))
    y = softmax_rows(x)
    assert np.all(y >= 0.0)
    np.testing.assert_allclose(y.sum(axis=1), 1.0, atol=1e-12)


def test_softmax_backward_matches_finite_differences(rng):
    x = rng.standard_normal(5)
    dy = rng.standard_normal(5)
    analytic = softmax_backward(softmax(x), dy)
    h = 1e-6
    numeric = np.array(
        [(dy @ softmax(x + h * e) - dy @ softmax(x - h * e)) / (2 * h) for e in np.eye(5)]
    )
    np.testing.assert_allclose(analytic, numeric, atol=1e-8)


def test_row_norm_examples():
    np.testing.assert_array_equal(row_l2_norms(np.array([[3.0, 4.0], [0.0, 0.0], [1.0, 1.0]])), [5.0, 0.0, 1.4142135623730951])
    assert row_l2_norms(np.array([1.0, 1.0, 1.0, 1.0])) == 2.0


def test_normalize_rows_keeps_zero_rows():
    unit, norms = normalize_rows(np.array([[3.0, 4.0], [0.0, 0.0]]))
    np.testing.assert_allclose(unit, [[0.6, 0.8], [0.0, 0.0]])
    np.testing.assert_array_equal(norms, [5.0, 0.0])


def test_logistic_and_logit_are_inverse():
    for p in (0.1, 0.5, 0.73):
        assert float(logistic(logit(p))) == pytest.approx(p, abs=1e-15)
    with pytest.raises(ContractViolation):
        logit(1.0)


def test_sym_eig_examples():
    values, vectors = sym_eig(np.diag([4.0, 1.0]))
    np.testing.assert_allclose(values, [4.0, 1.0])
    np.testing.assert_allclose(np.abs(vectors), np.eye(2))
    np.testing.assert_allclose(sym_eig(np.eye(3))[0], np.ones(3))
    np.testing.assert_allclose(sym_eig([[2.0, 1.0], [1.0, 2.0]])[0], [3.0, 1.0])


def test_sym_eig_rejects_asymmetric():
    with pytest.raises(ContractViolation, match="not symmetric"):
        sym_eig([[1.0, 2.0], [0.0, 1.0]])


@settings(max_examples=50, deadline=None)
@given(st.integers(min_value=0, max_value=2**32 - 1), st.integers(min_value=1, max_value=8))
def test_sym_eig_reconstructs(seed, n):
    a = np.random.default_rng(seed).standard_normal((n, n))
    a = a + a.T
    values, vectors = sym_eig(a)
    assert np.all(np.diff(values) <= 0.0)
    np.testing.assert_allclose(vectors @ np.diag(values) @ vectors.T, a, atol=1e-10)
    np.testing.assert_allclose(vectors.T @ vectors, np.eye(n), atol=1e-10)


@settings(max_examples=25, deadline=None)
@given(st.integers(min_value=0, max_value=2**32 - 1), st.integers(min_value=9, max_value=64))
def test_sym_eig_reconstructs_up_to_64(seed, n):
    a = np.random.default_rng(seed).standard_normal((n, n))
    a = a + a.T
    values, vectors = sym_eig(a)
    assert np.all(np.diff(values) <= 0.0)
    assert np.linalg.norm(vectors @ np.diag(values) @ vectors.T - a) <= 1e-8


def test_qr_orthonormalize_examples(rng):
    q0 = qr_orthonormalize(rng.standard_normal((4, 4)))
    np.testing.assert_allclose(qr_orthonormalize(q0), q0, atol=1e-12)
    np.testing.assert_allclose(qr_orthonormalize([[2.0, 0.0], [0.0, 3.0]]), np.eye(2))
    np.testing.assert_allclose(q0.T @ q0, np.eye(4), atol=1e-10)


def test_qr_orthonormalize_is_deterministic(rng):
    a = rng.standard_normal((6, 3))
    assert qr_orthonormalize(a).tobytes() == qr_orthonormalize(a.copy()).tobytes()


def test_qr_orthonormalize_rank_deficient():
    a = np.array([[1.0, 2.0], [2.0, 4.0]])
    with pytest.raises(DegenerateInputError) as info:
        qr_orthonormalize(a)
    assert info.value.value < 1e-12


def test_mlp_zero_output_layer_is_constant(rng):
    mlp = TwoLayerMlp.init(3, 6, 2, rng)
    out = mlp(rng.standard_normal((5, 3)))
    np.testing.assert_array_equal(out, np.zeros((5, 2)))


def test_mlp_backward_matches_finite_differences(rng):
    mlp = TwoLayerMlp.init(3, 4, 2, rng, output_scale=1.0)
    x = rng.standard_normal((2, 3))
    d_out = rng.standard_normal((2, 2))
    out, hidden = mlp.forward(x)
    dx, grads = mlp.backward(x, hidden, d_out)
    h = 1e-6
    for name in ("w1", "b1", "w2", "b2"):
        base = getattr(mlp, name)
        numeric = np.zeros_like(base)
        for idx in np.ndindex(base.shape):
            plus, minus = base.copy(), base.copy()
            plus[idx] += h
            minus[idx] -= h
            f_plus = np.sum(d_out * TwoLayerMlp(**{**mlp.__dict__, name: plus})(x))
            f_minus = np.sum(d_out * TwoLayerMlp(**{**mlp.__dict__, name: minus})(x))
            numeric[idx] = (f_plus - f_minus) / (2 * h)
        np.testing.assert_allclose(grads[name], numeric, atol=1e-7)
    numeric_x = np.zeros_like(x)
    for idx in np.ndindex(x.shape):
        plus, minus = x.copy(), x.copy()
        plus[idx] += h
        minus[idx] -= h
        numeric_x[idx] = (np.sum(d_out * mlp(plus)) - np.sum(d_out * mlp(minus))) / (2 * h)
    np.testing.assert_allclose(dx, numeric_x, atol=1e-7)


def test_dump_tensor_format(tmp_path):
    values = np.arange(6.0).reshape(2, 3)
    path = dump_tensor(tmp_path / "block", values, extra={"C": 3})
    assert path.name == "block.f64"
    assert path.read_bytes() == values.astype("<f8").tobytes()
    loaded, sidecar = load_tensor(tmp_path / "block")
    np.testing.assert_array_equal(loaded, values)
    assert sidecar == {"shape": [2, 3], "order": "row-major", "dtype": "f64le", "C": 3}


def test_dump_tensor_keeps_scalar_shape(tmp_path):
    dump_tensor(tmp_path / "alpha", np.array(0.25))
    loaded, sidecar = load_tensor(tmp_path / "alpha")
    assert sidecar["shape"] == []
    assert loaded.shape == ()
    assert float(loaded) == 0.25


def test_load_tensor_rejects_size_mismatch(tmp_path):
    dump_tensor(tmp_path / "block", np.ones(4))
    (tmp_path / "block.f64").write_bytes(np.ones(3).tobytes())
    with pytest.raises(ContractViolation):
        load_tensor(tmp_path / "block")
