"""The quasilinear Hamiltonian Schrodinger equation

    i u_t - Delta u + P(u) = 0,
    P(u) = (d_{ubar} F)(u, grad u) - sum_j d_{x_j} (d_{ubar_{x_j}} F)(u, grad u),

its Hamiltonian, the global ellipticity check, and the para-differential
form  U' = iE Op(|xi|^2 + A2 + A1) U + R(U)U  with U = (u, conj u).

A Hamiltonian density is a real function F(y_0, ..., y_d) of the jet
``y = (u, u_{x_1}, ..., u_{x_d})``; it is supplied together with its
Wirtinger partials.  Arrays of jets have shape ``(d+1, ...)``.
"""
from __future__ import annotations

import itertools
from dataclasses import dataclass, field
from typing import Callable

import numpy as np
import scipy.sparse as sp

from . import symbols as sym
from .paradiff import MatrixParaOperator
from .symbols import CutoffSpec, MatrixSymbol, Symbol
from .torus import (
    Field,
    Grid,
    PairField,
    coeffs_from_samples,
    gradient,
    to_physical,
)

ArrayFn = Callable[[np.ndarray], np.ndarray]


class DensityValidationError(ValueError):
    pass


@dataclass(frozen=True, eq=False)
class HamiltonianDensity:
    """F(y_0, ..., y_d) with its Wirtinger derivatives.

    Parameters
    ----------
    evaluate
        y -> F(y), real.
    grad_bar
        y -> (d_{ybar_a} F)_a, shape ``(d+1, ...)``.
    hess_mixed
        y -> (d_{y_a} d_{ybar_b} F)_{ab}, shape ``(d+1, d+1, ...)``.
    hess_bar
        y -> (d_{ybar_a} d_{ybar_b} F)_{ab}, shape ``(d+1, d+1, ...)``.

    The holomorphic partials follow from reality of F:
    ``d_y F = conj(d_ybar F)`` and ``d_y d_y F = conj(d_ybar d_ybar F)``.
    Construction checks the supplied partials against finite differences.
    """

    name: str
    dim: int
    evaluate: ArrayFn
    grad_bar: ArrayFn
    hess_mixed: ArrayFn
    hess_bar: ArrayFn
    validate: bool = field(default=True, repr=False)

    def __post_init__(self):
        if self.validate:
            validate_density(self)

    def grad(self, y):
        return np.conj(self.grad_bar(y))

    def hess_hol(self, y):
        return np.conj(self.hess_bar(y))


def validate_density(F: HamiltonianDensity, samples: int = 8, seed: int = 1234,
                     rtol: float = 1e-6) -> None:
    """Finite-difference audit of the supplied partials; raises on mismatch."""
    rng = np.random.default_rng(seed)
    n = F.dim + 1
    y = 0.6 * (rng.standard_normal((n, samples)) + 1j * rng.standard_normal((n, samples)))
    f0 = F.evaluate(y)
    if np.max(np.abs(np.imag(f0))) > 1e-12 * (1 + np.max(np.abs(f0))):
        raise DensityValidationError(f"{F.name}: F is not real-valued")
    h = 1e-5

    def wirt(fun, a, bar):
        e = np.zeros((n, 1))
        e[a] = 1.0
        dre = (fun(y + h * e) - fun(y - h * e)) / (2 * h)
        dim = (fun(y + 1j * h * e) - fun(y - 1j * h * e)) / (2 * h)
        return 0.5 * (dre + 1j * dim) if bar else 0.5 * (dre - 1j * dim)

    gb = F.grad_bar(y)
    hm = F.hess_mixed(y)
    hb = F.hess_bar(y)
    for a in range(n):
        fd = wirt(F.evaluate, a, True)
        _close(gb[a], fd, rtol, f"{F.name}: d_ybar{a} F")
        for b in range(n):
            gfun = lambda yy, b=b: F.grad_bar(yy)[b]
            _close(hm[a, b], wirt(gfun, a, False), rtol, f"{F.name}: d_y{a} d_ybar{b} F")
            _close(hb[a, b], wirt(gfun, a, True), rtol, f"{F.name}: d_ybar{a} d_ybar{b} F")
    # F must vanish to third order at the origin
    vals = [np.max(np.abs(F.evaluate(t * y))) / t**3 for t in (1e-1, 1e-2, 1e-3)]
    if not vals[-1] <= 10 * vals[0] + 1e-12:
        raise DensityValidationError(f"{F.name}: F does not vanish to third order at 0")


def _close(a, b, rtol, what):
    scale = 1.0 + np.max(np.abs(b))
    if np.max(np.abs(a - b)) > rtol * scale:
        raise DensityValidationError(f"{what} disagrees with finite differences")


# ---------------------------------------------------------------------------
# Bundled densities
# ---------------------------------------------------------------------------


def _zeros2(y):
    n = y.shape[0]
    return np.zeros((n, n) + y.shape[1:], complex)


def quartic(dim: int) -> HamiltonianDensity:
    """F = |u|^4, the semilinear control case: P(u) = 2|u|^2 u."""

    def ev(y):
        return np.abs(y[0]) ** 4

    def gb(y):
        out = np.zeros_like(y, dtype=complex)
        out[0] = 2 * np.abs(y[0]) ** 2 * y[0]
        return out

    def hm(y):
        out = _zeros2(y)
        out[0, 0] = 4 * np.abs(y[0]) ** 2
        return out

    def hb(y):
        out = _zeros2(y)
        out[0, 0] = 2 * y[0] ** 2
        return out

    return HamiltonianDensity("quartic", dim, ev, gb, hm, hb)


def _grad_sq(y):
    return np.sum(np.abs(y[1:]) ** 2, axis=0)


def flagship(dim: int, sign: float = 1.0) -> HamiltonianDensity:
    """F = sign * |u|^2 |grad u|^2 (globally elliptic for sign = +1)."""
    s = float(sign)

    def ev(y):
        return s * np.abs(y[0]) ** 2 * _grad_sq(y)

    def gb(y):
        out = np.empty_like(y, dtype=complex)
        out[0] = y[0] * _grad_sq(y)
        out[1:] = np.abs(y[0]) ** 2 * y[1:]
        return s * out

    def hm(y):
        out = _zeros2(y)
        out[0, 0] = _grad_sq(y)
        for a in range(1, dim + 1):
            out[a, 0] = y[0] * np.conj(y[a])
            out[0, a] = np.conj(y[0]) * y[a]
            out[a, a] = np.abs(y[0]) ** 2
        return s * out

    def hb(y):
        out = _zeros2(y)
        for a in range(1, dim + 1):
            out[a, 0] = out[0, a] = y[0] * y[a]
        return s * out

    name = "flagship" if s == 1 else f"flagship[{s:g}]"
    return HamiltonianDensity(name, dim, ev, gb, hm, hb)


def adversarial(dim: int) -> HamiltonianDensity:
    """F = -|u|^2 |grad u|^2, elliptic only while |u| < 1."""
    return flagship(dim, -1.0)


def coupled(dim: int, kappa: float = 0.4) -> HamiltonianDensity:
    """Flagship plus the pairing term (kappa/2)(conj(u)^2 u_{x_1}^2 + c.c.).

    The pairing produces a nonzero off-diagonal symbol b_2 = kappa u^2 xi_1^2,
    so both diagonalization stages are exercised; in d >= 2 it is also
    anisotropic.  Globally elliptic for |kappa| <= 1.
    """
    base = flagship(dim)
    k = float(kappa)

    def ev(y):
        return base.evaluate(y) + k * np.real(np.conj(y[0]) ** 2 * y[1] ** 2)

    def gb(y):
        out = base.grad_bar(y)
        out[0] = out[0] + k * np.conj(y[0]) * y[1] ** 2
        out[1] = out[1] + k * y[0] ** 2 * np.conj(y[1])
        return out

    def hm(y):
        out = base.hess_mixed(y)
        out[1, 0] = out[1, 0] + 2 * k * np.conj(y[0]) * y[1]
        out[0, 1] = out[0, 1] + 2 * k * y[0] * np.conj(y[1])
        return out

    def hb(y):
        out = base.hess_bar(y)
        out[0, 0] = out[0, 0] + k * y[1] ** 2
        out[1, 1] = out[1, 1] + k * y[0] ** 2
        return out

    return HamiltonianDensity(f"coupled[{k:g}]", dim, ev, gb, hm, hb)


DENSITIES: dict[str, Callable[..., HamiltonianDensity]] = {
    "quartic": quartic,
    "flagship": flagship,
    "coupled": coupled,
    "adversarial": adversarial,
}


def get_density(name: str, dim: int, **kwargs) -> HamiltonianDensity:
    try:
        factory = DENSITIES[name]
    except KeyError:
        raise ValueError(f"unknown density {name!r}; known: {sorted(DENSITIES)}") from None
    return factory(dim, **kwargs)


def register_density(name: str, factory: Callable[..., HamiltonianDensity]) -> None:
    """Plug-in hook: make ``factory(dim, **kw)`` available by name."""
    DENSITIES[name] = factory


# ---------------------------------------------------------------------------
# Nonlinearity and Hamiltonian
# ---------------------------------------------------------------------------


def jet_samples(u: Field) -> np.ndarray:
    """(u, u_{x_1}, ..., u_{x_d}) on the physical grid, shape (d+1, *phys)."""
    return np.array([to_physical(u)] + [to_physical(g) for g in gradient(u)])


def nonlinearity_P(F: HamiltonianDensity, u: Field) -> Field:
    grid = u.grid
    gb = F.grad_bar(jet_samples(u))
    if not np.all(np.isfinite(gb)):
        raise FloatingPointError("non-finite values in the nonlinearity")
    c = coeffs_from_samples(gb, grid.dim, grid.cutoff)
    out = c[0].copy()
    for j in range(grid.dim):
        out -= 1j * grid.freqs[j] * c[j + 1]
    return Field(grid, out)


def hamiltonian(F: HamiltonianDensity, u: Field) -> float:
    """H(u) = int |grad u|^2 + F(u, grad u) dx."""
    grid = u.grid
    k2 = np.sum(grid.freqs.astype(float) ** 2, axis=0)
    kinetic = float(np.sum(k2 * np.abs(u.coeffs) ** 2))
    dens = F.evaluate(jet_samples(u))
    vol = (2 * np.pi) ** grid.dim / grid.points_per_axis**grid.dim
    return kinetic + float(np.real(np.sum(dens))) * vol


def hamiltonian_gradient(F: HamiltonianDensity, u: Field) -> Field:
    """-Delta u + P(u): dH(u)[h] = 2 Re (-Delta u + P(u), h)_{L^2}."""
    k2 = np.sum(u.grid.freqs.astype(float) ** 2, axis=0)
    return Field(u.grid, k2 * u.coeffs) + nonlinearity_P(F, u)


def full_rhs(F: HamiltonianDensity, U: PairField) -> PairField:
    """Right side of U' for the original equation, i.e. iE(|xi|^2 U + (P, conj P))."""
    g = hamiltonian_gradient(F, U.plus)
    plus = 1j * g
    return PairField(plus, plus.conj())


# ---------------------------------------------------------------------------
# Ellipticity
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class EllipticityReport:
    c1_min: float
    c2_min: float
    samples: int
    tol: float

    @property
    def passed(self) -> bool:
        return self.c1_min > self.tol and self.c2_min > self.tol

    # ``pass`` is a keyword; keep a dictionary view with the plain name
    def as_dict(self) -> dict:
        return {"c1_min": self.c1_min, "c2_min": self.c2_min,
                "samples": self.samples, "pass": self.passed}


def unit_directions(dim: int, n: int) -> np.ndarray:
    """Quasi-uniform unit vectors covering the half sphere (symbols are even)."""
    if dim == 1:
        return np.array([[1.0]])
    if dim == 2:
        th = np.pi * np.arange(n) / n
        return np.stack([np.cos(th), np.sin(th)], axis=1)
    # axes plus deterministic Gaussian directions, folded to a half space
    rng = np.random.default_rng(7)
    pts = rng.standard_normal((n, dim))
    pts /= np.linalg.norm(pts, axis=1, keepdims=True)
    return np.vstack([np.eye(dim), pts])


def check_ellipticity(F: HamiltonianDensity, u: Field, n_dirs: int = 16,
                      tol: float = 1e-8) -> EllipticityReport:
    """Minima over grid points and directions of the two ellipticity quotients.

    c1 = 1 + sum_jk d_{y_j} d_{ybar_k} F xi_j xi_k / |xi|^2,
    c2 = c1^2 - |sum_jk d_{ybar_j} d_{ybar_k} F xi_j xi_k / |xi|^2|^2.
    """
    d = u.grid.dim
    if n_dirs < 2 * d:
        raise ValueError(f"n_dirs must be >= 2d = {2 * d}")
    y = jet_samples(u)
    hm = F.hess_mixed(y)[1:, 1:]
    hb = F.hess_bar(y)[1:, 1:]
    dirs = unit_directions(d, n_dirs)
    c1 = []
    c2 = []
    for v in dirs:
        q1 = np.real(np.einsum("j,k,jk...->...", v, v, hm))
        q2 = np.einsum("j,k,jk...->...", v, v, hb)
        c1.append(np.min(1 + q1))
        c2.append(np.min((1 + q1) ** 2 - np.abs(q2) ** 2))
    return EllipticityReport(float(min(c1)), float(min(c2)), len(dirs) * y[0].size, tol)


# ---------------------------------------------------------------------------
# Paralinearization
# ---------------------------------------------------------------------------


def _coef_field(samples: np.ndarray, grid: Grid) -> Field:
    # resolved spectrum of the sampled coefficient (band 2N for quadratic ones)
    K = (grid.points_per_axis - 2) // 2
    cg = Grid(grid.dim, K)
    return Field(cg, coeffs_from_samples(samples, grid.dim, K))


@dataclass(frozen=True, eq=False)
class ParalinearizedSystem:
    """Symbols of U' = iE Op(|xi|^2 + A2 + A1) U + R(U)U at a frozen state."""

    a2: Symbol
    b2: Symbol
    a1: Symbol
    source_state: PairField
    density: HamiltonianDensity
    cutoff: CutoffSpec = CutoffSpec()

    @property
    def grid(self) -> Grid:
        return self.source_state.grid

    @property
    def A2(self) -> MatrixSymbol:
        return MatrixSymbol.real_to_real(self.a2, self.b2)

    @property
    def A1(self) -> MatrixSymbol:
        return MatrixSymbol.real_to_real(self.a1, sym.ZERO)

    def para_operator(self) -> MatrixParaOperator:
        """Op(A2 + A1) as a pair operator."""
        return MatrixParaOperator(MatrixSymbol.real_to_real(self.a2 + self.a1, self.b2),
                                  self.grid, self.cutoff)

    def generator(self) -> sp.csr_matrix:
        """Sparse matrix of iE Op(A2 + A1) (the |xi|^2 part excluded)."""
        A, B, C, D = self.para_operator().blocks
        return sp.bmat([[1j * A, 1j * B], [-1j * C, -1j * D]], format="csr")


def build_symbols(F: HamiltonianDensity, U: PairField,
                  cutoff: CutoffSpec = CutoffSpec()) -> ParalinearizedSystem:
    """a2 = sum d_{y_j}d_{ybar_k}F xi_j xi_k, b2 = sum d_{ybar_j}d_{ybar_k}F xi_j xi_k,
    and the first-order symbol a1 (real, odd)."""
    grid = U.grid
    d = grid.dim
    if F.dim != d:
        raise ValueError("density and grid dimensions differ")
    y = jet_samples(U.plus)
    hm = F.hess_mixed(y)
    hb = F.hess_bar(y)
    if not (np.all(np.isfinite(hm)) and np.all(np.isfinite(hb))):
        raise FloatingPointError("non-finite second derivatives of F")
    X = [sym.xi(j, d) for j in range(1, d + 1)]

    def cf(s):
        if not np.any(s):
            return sym.ZERO
        return sym.coeff(_coef_field(s, grid))

    a2_terms, b2_terms, a1_terms = [], [], []
    for j, k in itertools.combinations_with_replacement(range(1, d + 1), 2):
        mono = X[j - 1] * X[k - 1]
        if j == k:
            a2_terms.append(cf(np.real(hm[j, j])) * mono)
            b2_terms.append(cf(hb[j, j]) * mono)
        else:
            a2_terms.append(cf(np.real(hm[j, k] + hm[k, j])) * mono)
            b2_terms.append(cf(hb[j, k] + hb[k, j]) * mono)
    for b in range(1, d + 1):
        # i (d_{y_b}d_{ybar_0} F - d_{y_0}d_{ybar_b} F) = -2 Im d_{y_b}d_{ybar_0} F
        c = cf(-2.0 * np.imag(hm[b, 0]))
        # Weyl correction from a non-symmetric gradient block (zero if symmetric)
        for k in range(1, d + 1):
            c = c - cf(np.imag(hm[k, b])).dx(k)
        a1_terms.append(c * X[b - 1])
    return ParalinearizedSystem(sym.add(*a2_terms), sym.add(*b2_terms), sym.add(*a1_terms),
                                U, F, cutoff)


def remainder_forcing(F: HamiltonianDensity, U: PairField, system: ParalinearizedSystem,
                      generator: sp.spmatrix | None = None) -> PairField:
    """R(U)U = i E (P(u), conj P(u)) - iE Op(A2 + A1) U (the |xi|^2 parts cancel)."""
    if system.grid != U.grid:
        raise ValueError("system built on a different grid")
    G = system.generator() if generator is None else generator
    para = G @ U.vector()
    n = U.grid.size
    plus = 1j * nonlinearity_P(F, U.plus).vector() - para[:n]
    pf = Field(U.grid, plus.reshape(U.grid.shape))
    return PairField(pf, pf.conj())
