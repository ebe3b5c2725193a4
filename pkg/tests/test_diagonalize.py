import numpy as np
import pytest
from hypothesis import given, strategies as st

from paranls import diagonalize as dg
from paranls import model
from paranls import symbols as sym
from paranls.model import ParalinearizedSystem
from paranls.symbols import MatrixSymbol
from paranls.torus import Field, Grid, PairField, sobolev_norm

G = Grid(1, 12)
FAR = np.array([[40.0], [-55.0], [100.0]])  # where X_R = 1


def constant_system(a, b, dim=1):
    g = Grid(dim, 8)
    n2 = sym.norm2(dim)
    return ParalinearizedSystem(a * n2, b * n2, sym.ZERO, PairField.zeros(g), model.quartic(dim))


def test_constant_a_example():
    st1 = dg.build_stage1(constant_system(0.25, 0.0), R_cut=4.0)
    g = st1.grid
    assert np.allclose(st1.lambda2.sample(g, FAR), 1.25, atol=1e-12)
    assert np.allclose(st1.s1.sample(g, FAR), 1.0, atol=1e-12)
    assert np.allclose(st1.s2.sample(g, FAR), 0.0, atol=1e-12)


def test_constant_b_example():
    st1 = dg.build_stage1(constant_system(0.0, 0.6), R_cut=4.0)
    g = st1.grid
    assert np.allclose(st1.lambda2.sample(g, FAR), 0.8, atol=1e-12)
    assert np.allclose(st1.s1.sample(g, FAR), 1.06066017, atol=1e-8)
    assert np.allclose(st1.s2.sample(g, FAR), -0.35355339, atol=1e-8)


def test_non_elliptic_constant_is_rejected():
    with pytest.raises(sym.EllipticityError):
        dg.build_stage1(constant_system(0.0, 1.2), R_cut=4.0)


def _coupled_state(seed, dim=1, amp=0.3):
    rng = np.random.default_rng(seed)
    g = Grid(dim, 8 if dim == 1 else 5)
    u = Field.random(g, rng, decay=3.0, amplitude=amp)
    return model.build_symbols(model.coupled(dim, 0.8), PairField.from_field(u))


@given(st.integers(0, 10_000))
def test_eigenvector_normalization_and_matrix_identity(seed):
    sys_ = _coupled_state(seed)
    st1 = dg.build_stage1(sys_, quantize=False)
    g = sys_.grid
    pts = np.random.default_rng(seed).uniform(-40, 40, size=(30, 1))
    s1, s2 = st1.s1.sample(g, pts), st1.s2.sample(g, pts)
    assert np.max(np.abs(np.abs(s1) ** 2 - np.abs(s2) ** 2 - 1)) < 1e-10
    one = sym.ONE + st1.a2_tilde
    E = MatrixSymbol(one, st1.b2_tilde, -st1.b2_tilde.tilde(), -one.tilde())
    M = (st1.S_inv @ E @ st1.S).sample(g, pts)
    lam = st1.lambda2.sample(g, pts)
    assert np.allclose(M[0, 0], lam, atol=1e-10) and np.allclose(M[1, 1], -lam, atol=1e-10)
    assert np.max(np.abs(M[0, 1])) < 1e-10 and np.max(np.abs(M[1, 0])) < 1e-10
    # S^{-1} S = 1 pointwise
    Id = (st1.S_inv @ st1.S).sample(g, pts)
    assert np.allclose(Id[0, 0], 1, atol=1e-10) and np.max(np.abs(Id[0, 1])) < 1e-10


def test_stage2_cancellation_2d():
    sys_ = _coupled_state(3, dim=2, amp=0.5)
    st1 = dg.build_stage1(sys_, R_cut=2.0, quantize=False)
    st2 = dg.build_stage2(st1, sys_, quantize=False)
    pts = np.random.default_rng(0).uniform(-20, 20, size=(50, 2))
    b1 = st1.b1_1.sample(sys_.grid, pts)
    assert np.max(np.abs(b1)) > 1e-6  # the pairing term gives a genuine order-1 coupling
    XR = sym.make_cutoff_XR(st1.R_cut, 2)
    res = (st2.d_symbol() + XR * st1.b1_1).sample(sys_.grid, pts)
    assert np.max(np.abs(res)) < 1e-11


def test_first_bracket_offdiagonal_term_vanishes():
    # the order-1 bracket term of S (|xi|^2 + X_R A2) S off the diagonal is zero
    # because S holds eigenvectors; only the S_1 product feeds b1
    sys_ = _coupled_state(5, dim=2, amp=0.5)
    st1 = dg.build_stage1(sys_, R_cut=2.0, quantize=False)
    XR = sym.make_cutoff_XR(2.0, 2)
    L = sym.norm2(2) + XR * sys_.a2
    b = XR * sys_.b2
    bb = b.conj()
    s1, s2 = st1.s1, st1.s2
    pb = dg._pb
    d1 = (pb(s1, L * s2) + s1 * pb(L, s2) + pb(s1, b * s1) + s1 * pb(b, s1)
          + pb(s2, bb * s2) + s2 * pb(bb, s2) + pb(s2, L * s1) + s2 * pb(L, s1))
    pts = np.array([[10.0, 3.0], [-4.0, 9.0], [7.0, -7.0], [20.0, 1.0]])
    assert np.max(np.abs(d1.sample(sys_.grid, pts))) < 1e-10
    assert np.max(np.abs(st1.b1_1.sample(sys_.grid, pts))) > 1e-6


@given(st.integers(0, 10_000))
def test_stage_symbols_parity(seed):
    sys_ = _coupled_state(seed)
    st1 = dg.build_stage1(sys_, quantize=False)
    g = sys_.grid
    pts = np.random.default_rng(seed).uniform(-30, 30, size=(10, 1))
    lam, lam_m = st1.lambda2.sample(g, pts), st1.lambda2.sample(g, -pts)
    assert np.max(np.abs(lam.imag)) < 1e-12 and np.allclose(lam, lam_m, atol=1e-12)
    a1, a1m = st1.a1_1.sample(g, pts), st1.a1_1.sample(g, -pts)
    assert np.max(np.abs(a1.imag)) < 1e-10 and np.allclose(a1, -a1m, atol=1e-10)


def test_neumann_inverse_residual():
    sys_ = _coupled_state(1)
    st1 = dg.build_stage1(sys_)
    inv = dg.invert_phi(st1, max_terms=30)
    assert inv.factor < 0.5
    U = PairField.from_field(Field.random(sys_.grid, np.random.default_rng(1)))
    back = inv.apply(st1.Phi.apply(U))
    assert np.linalg.norm((back - U).vector()) < 1e-10 * np.linalg.norm(U.vector())
    D = inv.dense() @ st1.Phi.to_sparse().toarray()
    assert np.allclose(D, np.eye(D.shape[0]), atol=1e-10)


def test_maps_preserve_pairs():
    sys_ = _coupled_state(2)
    st1 = dg.build_stage1(sys_)
    st2 = dg.build_stage2(st1, sys_)
    U = PairField.from_field(Field.random(sys_.grid, np.random.default_rng(2)))
    assert st1.Phi.apply(U).on_subspace(1e-10)
    assert st2.Phi2.apply(st1.Phi.apply(U)).on_subspace(1e-10)


def test_energy_norm_without_coefficients_is_sobolev():
    g = Grid(1, 10)
    sys_ = model.build_symbols(model.quartic(1), PairField.zeros(g))
    D = dg.diagonalize(sys_, s=3.0)
    V = PairField.from_field(Field.random(g, np.random.default_rng(0)))
    assert abs(D.energy_of(V) - sobolev_norm(V.plus, 3.0)) < 1e-12 * sobolev_norm(V.plus, 3.0)


def test_energy_norm_equivalent_for_small_data():
    F = model.flagship(1)
    u = Field.from_modes(G, {1: 0.2, -2: 0.1j})
    D = dg.diagonalize(model.build_symbols(F, PairField.from_field(u)), s=4.0)
    V = PairField.from_field(Field.random(G, np.random.default_rng(4)))
    r = D.energy_of(V) / sobolev_norm(V.plus, 4.0)
    assert 0.5 <= r <= 2.0
    assert D.energy.left_inverse_residual(V.plus) < 1e-10
    with pytest.raises(ValueError):
        dg.build_energy_norm(D.stage2, -1.0)


def test_shell_tail_and_profile():
    assert dg.shell_tail(np.array([5.0, 1.0, 3.0, 2.0]), tail=3) == 3.0
    g = Grid(1, 6)
    prof = dg.shell_profile(np.eye(g.size), g, 0.0, (1, 2))
    assert np.allclose(prof, 1.0)
