
import numpy as np
import pytest
from hypothesis import given, strategies as st

from paranls import symbols as sym
from paranls.symbols import (
    CHI_INNER,
    CHI_OUTER,
    CutoffSpec,
    EllipticityError,
    MatrixSymbol,
    SeminormCapWarning,
    chi,
    make_cutoff_XR,
    make_cutoff_chi,
    poisson_bracket,
    seminorm,
    sigma_bracket,
)
from paranls.torus import Field, Grid, to_physical, to_spectral

G1 = Grid(1, 8)
G2 = Grid(2, 4)
seeds = st.integers(0, 2**31 - 1)


def smooth_field(g, rng, decay=5.0):
    return Field.random(g, rng, decay=decay, amplitude=0.3)


def real_field(g, rng, decay=5.0):
    f = smooth_field(g, rng, decay)
    return Field(g, 0.5 * (f.coeffs + f.conj().coeffs))


def random_tree(g, rng):
    """A random non-separable expression built from the catalog."""
    d = g.dim
    c1 = sym.coeff(real_field(g, rng))
    c2 = sym.coeff(smooth_field(g, rng))
    X = [sym.xi(j, d) for j in range(1, d + 1)]
    base = 1 + c1 * c1 + sym.norm2(d) * (1 + c1 * c1) / 50
    a = sym.power(base, 0.5) + c2 * X[0] * sym.japanese(d, -1.0)
    return a * (2 + c1) + make_cutoff_XR(2.0, d) * c2 * X[-1] ** 2 / (3 + sym.norm2(d))


def test_eval_examples():
    x1 = np.asarray(G1.points).reshape(-1)
    f = sym.norm2(1).eval(G1, [3.0], dxi=[2])
    assert np.allclose(f.coeffs, Field.from_modes(G1, {0: 2.0}).coeffs, atol=1e-13)
    c = to_spectral(G1, np.sin(x1))
    a = sym.coeff(c) * sym.xi(1, 1)
    out = a.eval(G1, [1.7], dx=[1], dxi=[1])
    assert np.allclose(to_physical(out), np.cos(x1), atol=1e-13)
    R = 2.0
    b = sym.power(1 + sym.coeff(c) ** 2 * make_cutoff_XR(R, 1), 0.5)
    assert np.max(np.abs(b.sample(G1, [[1.0], [2.4]], dxi=[1]))) == 0.0


def test_dxi_capped():
    with pytest.raises(ValueError):
        sym.norm2(1).eval(G1, [1.0], dxi=[3])


@given(seeds)
def test_xi_derivatives_match_finite_differences(seed):
    rng = np.random.default_rng(seed)
    a = random_tree(G2, rng)
    xi0 = rng.uniform(3, 9, size=2) * rng.choice([-1, 1], size=2)
    h = 1e-4
    for beta in ([1, 0], [0, 1]):
        e = np.array(beta, float)
        fd = (a.sample(G2, [xi0 + h * e])[0] - a.sample(G2, [xi0 - h * e])[0]) / (2 * h)
        ex = a.sample(G2, [xi0], dxi=beta)[0]
        assert np.max(np.abs(fd - ex)) <= 1e-6 * max(1.0, np.max(np.abs(ex)))
    for i, j in ((0, 0), (0, 1)):
        ei, ej = np.eye(2)[i], np.eye(2)[j]
        fd = (a.sample(G2, [xi0 + h * ei], dxi=list(ej.astype(int)))[0]
              - a.sample(G2, [xi0 - h * ei], dxi=list(ej.astype(int)))[0]) / (2 * h)
        beta = (ei + ej).astype(int)
        ex = a.sample(G2, [xi0], dxi=list(beta))[0]
        assert np.max(np.abs(fd - ex)) <= 1e-6 * max(1.0, np.max(np.abs(ex)))


def test_seminorm_examples(rng):
    assert seminorm(sym.ONE, 2, 0.0, G1) == pytest.approx(1.0)
    c = real_field(G1, rng)
    assert seminorm(sym.coeff(c), 0, 0.0, G1) == pytest.approx(np.max(np.abs(to_physical(c))), rel=1e-12)
    vals = [seminorm(sym.norm2(1), 0, 2.0, G1, [[r]]) for r in (4.0, 16.0, 64.0)]
    assert vals[0] < vals[1] < vals[2] < 1.0 and vals[2] > 0.999
    with pytest.warns(SeminormCapWarning):
        seminorm(sym.norm2(1), 3, 2.0, G1)


@given(seeds)
def test_seminorm_product(seed):
    rng = np.random.default_rng(seed)
    a = sym.coeff(real_field(G1, rng)) * sym.japanese(1, 1.0)
    b = (1 + sym.coeff(real_field(G1, rng))) * sym.xi(1, 1)
    s = 2
    lhs = seminorm(a * b, s, 2.0, G1)
    rhs = seminorm(a, s, 1.0, G1) * seminorm(b, s, 1.0, G1)
    assert lhs <= 4 * rhs


def test_poisson_examples(rng):
    c = smooth_field(G1, rng)
    cs = sym.coeff(c)
    x = sym.xi(1, 1)
    pts = np.array([[2.0], [-3.5]])
    pb = poisson_bracket(x * x, cs).sample(G1, pts)
    cx = cs.dx(1).sample(G1, pts)
    assert np.allclose(pb, 2 * pts[:, :1] * cx, atol=1e-12)
    a = random_tree(G2, rng)
    assert np.max(np.abs(poisson_bracket(a, a).sample(G2, [[3.0, 1.0]]))) < 1e-11
    e = Field.from_modes(G1, {1: 1.0})
    assert np.allclose(poisson_bracket(x, sym.coeff(e)).sample(G1, pts),
                       sym.coeff(e).dx(1).sample(G1, pts), atol=1e-13)


def test_sigma_examples(rng):
    c = smooth_field(G1, rng)
    cs = sym.coeff(c)
    x = sym.xi(1, 1)
    pts = np.array([[2.0], [5.0]])
    sg = sigma_bracket(x * x, cs).sample(G1, pts)
    assert np.allclose(sg, 2 * cs.dx(1).dx(1).sample(G1, pts), atol=1e-12)
    d = sym.coeff(smooth_field(G1, rng))
    assert np.max(np.abs(sigma_bracket(cs, d).sample(G1, pts))) == 0.0


@given(seeds)
def test_sigma_symmetric(seed):
    rng = np.random.default_rng(seed)
    a, b = random_tree(G2, rng), random_tree(G2, rng)
    pts = [[4.0, -2.0], [1.5, 7.0]]
    assert np.allclose(sigma_bracket(a, b).sample(G2, pts), sigma_bracket(b, a).sample(G2, pts),
                       atol=1e-10)


@given(seeds)
def test_poisson_leibniz(seed):
    rng = np.random.default_rng(seed)
    a, b, c = (random_tree(G2, rng) for _ in range(3))
    pts = [[4.0, -2.0], [6.5, 3.0]]
    lhs = poisson_bracket(a, b * c).sample(G2, pts)
    rhs = (poisson_bracket(a, b) * c + b * poisson_bracket(a, c)).sample(G2, pts)
    assert np.max(np.abs(lhs - rhs)) <= 1e-11 * max(1.0, np.max(np.abs(lhs)))


@given(seeds)
def test_parity_propagation(seed):
    rng = np.random.default_rng(seed)
    c1, c2 = sym.coeff(real_field(G2, rng)), sym.coeff(real_field(G2, rng))
    a = sym.power(1 + c1 * c1 * sym.norm2(2) / (1 + sym.norm2(2)), 0.5)
    b = c2 * sym.xi(1, 2) * sym.xi(2, 2) + c1 * sym.norm2(2)
    p = np.array([[3.0, 1.0], [2.0, -5.0]])
    pb, sg = poisson_bracket(a, b), sigma_bracket(a, b)
    assert np.allclose(pb.sample(G2, p), -pb.sample(G2, -p), atol=1e-11)
    assert np.allclose(sg.sample(G2, p), sg.sample(G2, -p), atol=1e-11)


def test_chi_profile():
    t = np.linspace(0, 3, 3001)
    v = chi(t)
    assert v[0] == 1.0 and np.all(v[t <= CHI_INNER] == 1.0) and np.all(v[t >= CHI_OUTER] == 0.0)
    assert np.all(np.diff(v) <= 1e-15) and np.all((v >= 0) & (v <= 1))
    spec = CutoffSpec(0.125)
    f = make_cutoff_chi(spec)
    assert f(0.0) == 1.0 and f(2 * 0.125) == 0.0
    for bad in (0.0, 0.25, 0.5, -0.1):
        with pytest.raises(ValueError, match=r"\(0, 1/4\)"):
            CutoffSpec(bad)


def test_XR_support():
    R = 3.0
    X = make_cutoff_XR(R, 2)
    assert np.max(np.abs(X.sample(G2, [[R, 0.0], [0.0, 5 * R / 4 - 1e-9]]))) == 0.0
    assert np.allclose(X.sample(G2, [[2 * R, 0.0], [8 * R / 5 + 1e-9, 0.0]]), 1.0)


def test_low_frequency_part_band_limited():
    from paranls.paradiff import quantize_matrix

    g = Grid(1, 16)
    R = 2.0
    c = Field.from_modes(g, {0: 1.0, 1: 0.2, -1: 0.2})
    a = sym.coeff(c) * sym.norm2(1)
    low = (1 - make_cutoff_XR(R, 1)) * a
    A = quantize_matrix(low, g).toarray()
    j = g.freq_list[:, 0]
    rows = np.abs(j) > 2 * (8 / 5) * R + 2
    cols = np.abs(j) > 2 * (8 / 5) * R + 2
    assert np.max(np.abs(A[np.ix_(rows, cols)])) == 0.0


def test_power_domain_error():
    with pytest.raises(EllipticityError):
        sym.power(sym.const(-1.0), 0.5)
    c = Field.from_modes(G1, {0: -1.0, 1: 0.05, -1: 0.05})
    a = sym.power(sym.coeff(c) + 0.5 * sym.norm2(1) * make_cutoff_XR(2.0, 1), 0.5, 1e-12)
    assert np.all(np.isfinite(a.sample(G1, [[10.0]])))
    with pytest.raises(EllipticityError):
        a.sample(G1, [[1.0]])


def test_matrix_symbol_self_adjoint_criterion(rng):
    c = sym.coeff(real_field(G1, rng))
    cz = sym.coeff(smooth_field(G1, rng))
    pts = np.array([[2.0], [-3.0], [7.0]])
    assert MatrixSymbol.real_to_real(c * sym.norm2(1), cz * sym.norm2(1)).is_self_adjoint(G1, pts)
    assert not MatrixSymbol.real_to_real(1j * c * sym.norm2(1), cz).is_self_adjoint(G1, pts)
    assert not MatrixSymbol.real_to_real(c, cz * sym.xi(1, 1)).is_self_adjoint(G1, pts)
