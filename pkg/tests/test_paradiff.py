import numpy as np
import pytest
from hypothesis import given, strategies as st

from paranls import paradiff as pd
from paranls import symbols as sym
from paranls.symbols import CutoffSpec, MatrixSymbol
from paranls.torus import Field, Grid, PairField, multiply_dealiased

G1 = Grid(1, 12)


def real_field(f):
    return Field(f.grid, 0.5 * (f.coeffs + f.conj().coeffs))


def test_identity_and_derivative_2d():
    g = Grid(2, 5)
    I = pd.quantize_matrix(sym.ONE, g).toarray()
    assert np.max(np.abs(I - np.eye(g.size))) < 1e-13
    for j in (1, 2):
        D = pd.quantize_matrix(1j * sym.xi(j, 2), g).toarray()
        assert np.allclose(D, np.diag(1j * g.freq_list[:, j - 1]), atol=1e-13)


def test_fourier_multiplier_is_diagonal():
    A = pd.quantize_matrix(sym.japanese(1, 1.5), G1).toarray()
    k = G1.freq_list[:, 0].astype(float)
    assert np.allclose(A, np.diag((1 + k**2) ** 0.75), atol=1e-12)


def test_single_mode_coefficient():
    # a = e^{ix}: T_a e^{ikx} keeps only the band |1| < (8 eps/5)<2k+1>
    g = Grid(1, 16)
    a = sym.coeff(Field.from_modes(g, {1: 1.0}))
    A = pd.quantize_matrix(a, g).toarray()
    F = g.freq_list[:, 0]
    for col, k in enumerate(F):
        out = A[:, col]
        nz = np.flatnonzero(np.abs(out) > 1e-12)
        if len(nz):
            assert list(F[nz]) == [k + 1]
            assert 1 < 0.2 * np.sqrt(1 + (2 * k + 1) ** 2)
    # far from the origin the multiplier acts as multiplication by e^{ix}
    i = list(F).index(10)
    assert abs(A[i + 1, i] - 1.0) < 1e-12


@given(st.integers(0, 10_000))
def test_real_symbols_give_hermitian_operators(seed):
    rng = np.random.default_rng(seed)
    c0 = sym.coeff(real_field(Field.random(G1, rng, decay=3.0)))
    c1 = sym.coeff(real_field(Field.random(G1, rng, decay=3.0)))
    A = pd.materialize(pd.ParaOperator(c0 * sym.norm2(1) + c1 * sym.xi(1, 1), G1))
    assert A.hermitian_residual() < 1e-11


@given(st.integers(0, 10_000))
def test_adjoint_pairing(seed):
    rng = np.random.default_rng(seed)
    a = sym.coeff(Field.random(G1, rng, decay=3.0)) * sym.japanese(1, 1.0)
    T = pd.ParaOperator(a, G1)
    u, v = Field.random(G1, rng), Field.random(G1, rng)
    lhs = np.vdot(v.vector(), T.apply(u).vector())
    rhs = np.vdot(pd.adjoint(T).apply(v).vector(), u.vector())
    assert abs(lhs - rhs) < 1e-10 * (1 + abs(lhs))


@given(st.integers(0, 10_000))
def test_conjugate_operator(seed):
    rng = np.random.default_rng(seed)
    a = sym.coeff(Field.random(G1, rng, decay=3.0)) * (sym.xi(1, 1) + 2.0)
    T = pd.ParaOperator(a, G1)
    h = Field.random(G1, rng)
    lhs = pd.conjugate_op(T).apply(h)
    rhs = T.apply(h.conj()).conj()
    assert np.allclose(lhs.coeffs, rhs.coeffs, atol=1e-11)


def test_band_sparsity():
    g = Grid(1, 24)
    rng = np.random.default_rng(0)
    a = sym.coeff(Field.random(g, rng)) * sym.norm2(1)
    A = pd.quantize_matrix(a, g, CutoffSpec(1 / 8)).tocoo()
    F = g.freq_list[:, 0]
    j, k = F[A.row], F[A.col]
    assert np.all(np.abs(j - k) < 0.2 * np.sqrt(1 + (j + k) ** 2) + 1e-12)
    assert A.nnz < 0.5 * g.size**2


def test_cutoff_validation():
    with pytest.raises(ValueError, match=r"\(0, 1/4\)"):
        CutoffSpec(0.3)


def test_expansion_exact_for_constant_coefficients():
    ex, probe = pd.compose_expansion(sym.xi(1, 1), sym.norm2(1))
    D = probe.dense(G1)
    assert np.max(np.abs(D.matrix)) < 1e-11


def test_composition_remainder_smoothing_order():
    # measured H^4 -> H^5: the order-2 remainder (order -1) stays bounded as N
    # doubles, the order-0 remainder (order 1) grows like N^2
    n0, n2 = [], []
    for N in (24, 48):
        g = Grid(1, N)
        a = sym.coeff(Field.from_modes(g, {1: 0.3, -1: 0.3})) * sym.xi(1, 1)
        b = sym.coeff(Field.from_modes(g, {2: 0.2j, -2: -0.2j})) * sym.xi(1, 1)
        n0.append(pd.operator_norm_estimate(pd.compose_expansion(a, b, 0)[1].dense(g), 4, 5))
        n2.append(pd.operator_norm_estimate(pd.compose_expansion(a, b, 2)[1].dense(g), 4, 5))
    assert n2[1] / n2[0] < 1.05
    assert n0[1] / n0[0] > 2.0


def test_two_cutoffs_agree_on_constant_symbols():
    h = Field.random(G1, np.random.default_rng(3))
    r = pd.remainder_two_cutoffs(sym.norm2(1), 0.2, 0.1, h)
    assert np.max(np.abs(r.coeffs)) < 1e-12
    assert np.max(np.abs(pd.remainder_two_cutoffs(sym.xi(1, 1), 0.1, 0.1, h).coeffs)) == 0
    with pytest.raises(ValueError):
        pd.two_cutoff_dense(sym.ONE, 0.1, 0.2, G1)


@given(st.integers(0, 10_000))
def test_paraproduct_sums_to_product(seed):
    rng = np.random.default_rng(seed)
    g = Grid(1, 10)
    f = Field.random(g, rng, decay=3.0)
    h = Field.random(g, rng, decay=3.0)
    a, b, r = pd.paraproduct_decompose(f, h)
    prod = multiply_dealiased(f, h)
    assert np.allclose((a + b + r).coeffs, prod.coeffs, atol=1e-11)


def test_materialize_callable_matches_sparse():
    rng = np.random.default_rng(5)
    T = pd.ParaOperator(sym.coeff(Field.random(G1, rng)) * sym.xi(1, 1), G1)
    D1 = pd.materialize(T)
    D2 = pd.materialize(T.apply, grid=G1)
    assert np.allclose(D1.matrix, D2.matrix, atol=1e-13)
    with pytest.raises(ValueError):
        pd.materialize(T, cap=10)


def test_dense_dump_roundtrip(tmp_path):
    rng = np.random.default_rng(6)
    D = pd.materialize(pd.ParaOperator(sym.coeff(Field.random(G1, rng)), G1))
    D.dump(tmp_path / "op.bin")
    E = pd.DenseOperator.load(tmp_path / "op.bin")
    assert np.array_equal(D.matrix, E.matrix) and E.grid == D.grid
    with pytest.raises(ValueError):
        pd.DenseOperator.from_bytes(b"x" * 40)


def test_operator_norm_examples():
    D = pd.materialize(pd.ParaOperator(sym.ONE, G1))
    assert abs(pd.operator_norm_estimate(D, 3, 3) - 1) < 1e-12
    # |xi|^2 from H^2 to L^2 has norm sup |k|^2 / <k>^2 < 1
    L = pd.materialize(pd.ParaOperator(sym.norm2(1), G1))
    k = 12.0
    assert abs(pd.operator_norm_estimate(L, 2, 0) - k**2 / (1 + k**2)) < 1e-12
    assert pd.operator_norm_estimate(np.zeros((G1.size, G1.size)), 0, 0, grid=G1) == 0.0


@given(st.integers(0, 10_000))
def test_matrix_operator_preserves_pairs(seed):
    rng = np.random.default_rng(seed)
    a = sym.coeff(real_field(Field.random(G1, rng, decay=3.0))) * sym.norm2(1)
    b = sym.coeff(Field.random(G1, rng, decay=3.0)) * sym.norm2(1)
    T = pd.MatrixParaOperator(MatrixSymbol.real_to_real(a, b), G1)
    U = PairField.from_field(Field.random(G1, rng))
    assert T.apply(U).on_subspace(1e-10)
