"""Block-diagonalization of the para-differential system and the energy norm.

Stage 1 conjugates by Phi = Op(S^{-1}), where S holds the normalized
eigenvectors of E(1 + A2~) and A2~ = X_R A2 / |xi|^2; the off-diagonal
coupling drops from order 2 to order 1.  Stage 2 removes the remaining
order-1 coupling with Phi_2 = 1 + Op(B).  The energy norm is
||T_{(1+L)^{s/2}} w||_{L^2} with L = |xi|^2 + a2^(1) the diagonal principal
symbol.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
import scipy.sparse as sp

from . import symbols as sym
from .model import ParalinearizedSystem
from .paradiff import MatrixParaOperator, ParaOperator, sobolev_weights
from .symbols import EllipticityError, MatrixSymbol, Symbol, poisson_bracket, sigma_bracket
from .torus import Field, Grid, PairField

R0_DEFAULT = 8.0
RADICAND_TOL = 1e-12


class NeumannDivergence(ArithmeticError):
    """A Neumann series failed to contract; carries the measured factor."""

    def __init__(self, msg: str, factor: float):
        super().__init__(f"{msg} (measured contraction factor {factor:.3g})")
        self.factor = factor


def _pb(a: Symbol, b: Symbol) -> Symbol:
    # (1/2i){a, b}
    return poisson_bracket(a, b) * (-0.5j)


# ---------------------------------------------------------------------------
# Neumann inverses
# ---------------------------------------------------------------------------


def _weighted_norm(grid: Grid, s: float, v: np.ndarray) -> float:
    return float(np.linalg.norm(sobolev_weights(grid, s, v.size // grid.size) * v))


def contraction_factor(Q: sp.spmatrix, grid: Grid, s: float = 0.0, iters: int = 30,
                       seed: int = 0) -> float:
    """Power-iteration estimate of ||Q||_{H^s -> H^s}."""
    w = sobolev_weights(grid, s, Q.shape[0] // grid.size)
    rng = np.random.default_rng(seed)
    v = rng.standard_normal(Q.shape[0]) + 1j * rng.standard_normal(Q.shape[0])
    v /= np.linalg.norm(v)
    QH = Q.conj().T.tocsr()
    est = 0.0
    for _ in range(iters):
        y = w * (Q @ (v / w))
        est = float(np.linalg.norm(y))
        if est == 0.0:
            return 0.0
        z = (1 / w) * (QH @ (w * y))
        v = z / np.linalg.norm(z)
    return est


@dataclass
class NeumannInverse:
    """Left inverse (1 + Q)^{-1} P of an operator A with P A = 1 + Q.

    Applied by the fixed point x <- P y - Q x; at most ``max_terms`` terms,
    stopping once the update falls below ``tol`` relative to the result.
    """

    P: sp.csr_matrix
    Q: sp.csr_matrix
    grid: Grid
    max_terms: int = 8
    tol: float = 1e-13
    factor: float = field(default=float("nan"))

    def apply_vector(self, y: np.ndarray) -> np.ndarray:
        b = self.P @ y
        x = b.copy()
        bn = np.linalg.norm(b)
        if bn == 0:
            return x
        prev = None
        for _ in range(self.max_terms):
            corr = self.Q @ x
            step = np.linalg.norm(b - corr - x)
            x = b - corr
            if step <= self.tol * bn:
                return x
            if prev is not None and step > prev:
                raise NeumannDivergence("Neumann series diverges", step / prev)
            prev = step
        return x

    def apply(self, U):
        if isinstance(U, PairField):
            return PairField.from_vector(self.grid, self.apply_vector(U.vector()))
        return Field(self.grid, self.apply_vector(U.vector()).reshape(self.grid.shape))

    __call__ = apply

    def dense(self) -> np.ndarray:
        """Exact (1 + Q)^{-1} P, the limit of the series."""
        n = self.Q.shape[0]
        return np.linalg.solve(np.eye(n) + self.Q.toarray(), self.P.toarray())


def _neumann(P: sp.spmatrix, A: sp.spmatrix, grid: Grid, max_terms: int,
             tol: float, s: float = 0.0) -> NeumannInverse:
    n = A.shape[0]
    Q = (P @ A - sp.identity(n, format="csr")).tocsr()
    Q.eliminate_zeros()
    fac = contraction_factor(Q, grid, s) if Q.nnz else 0.0
    if fac >= 1.0:
        raise NeumannDivergence("left-inverse remainder is not a contraction", fac)
    return NeumannInverse(P.tocsr(), Q, grid, max_terms, tol, fac)


# ---------------------------------------------------------------------------
# Stage 1
# ---------------------------------------------------------------------------


@dataclass(eq=False)
class DiagonalizationStage1:
    R_cut: float
    lambda2: Symbol
    a2_tilde: Symbol
    b2_tilde: Symbol
    S: MatrixSymbol
    S_inv: MatrixSymbol
    S1: MatrixSymbol
    S2: MatrixSymbol
    Phi: MatrixParaOperator
    Psi: MatrixParaOperator
    system: ParalinearizedSystem
    # symbols of the conjugated system
    a2_1: Symbol = None
    a1_1: Symbol = None
    b1_1: Symbol = None
    _inverse: NeumannInverse | None = None

    @property
    def s1(self) -> Symbol:
        return self.S.a

    @property
    def s2(self) -> Symbol:
        return self.S.b

    @property
    def grid(self) -> Grid:
        return self.system.grid

    def radicand(self) -> Symbol:
        one = sym.ONE
        return (one + self.a2_tilde) ** 2 - self.b2_tilde * self.b2_tilde.conj()


def build_stage1(sys: ParalinearizedSystem, R_cut: float = R0_DEFAULT,
                 quantize: bool = True) -> DiagonalizationStage1:
    """Symbols lambda_2, S, S^{-1}, S_1, S_2 and the maps Phi, Psi."""
    d = sys.grid.dim
    XRq = sym.cutoff_XR_over_norm2(R_cut, d)
    XR = sym.make_cutoff_XR(R_cut, d)
    n2 = sym.norm2(d)
    at = XRq * sys.a2
    bt = XRq * sys.b2
    one = sym.ONE
    rad = (one + at) ** 2 - bt * bt.conj()
    _check_positive(rad, sys.grid, "lambda_2 radicand")
    lam = sym.power(rad, 0.5, RADICAND_TOL)
    den = sym.power(2.0 * lam * (one + at + lam), 0.5, RADICAND_TOL)
    s1 = (one + at + lam) / den
    s2 = -bt / den
    s2b = s2.conj()
    S = MatrixSymbol.real_to_real(s1, s2)
    S_inv = MatrixSymbol.real_to_real(s1, -s2)

    p = _pb(s2, s2b)
    q = poisson_bracket(s1, s2) * (-1j)
    S1 = MatrixSymbol.real_to_real(p, q) @ S
    s11, s21 = S1.a, S1.b
    g1 = _pb(s11, s1) - _pb(s21, s2b) + 0.125 * sigma_bracket(s2, s2b)
    g2 = -_pb(s11, s2) + _pb(s21, s1)
    S2 = -(MatrixSymbol.real_to_real(g1, g2) @ S)

    # order-2 and order-1 symbols after conjugation
    a2R = XR * sys.a2
    b2R = XR * sys.b2
    b2Rb = b2R.conj()
    Lr = n2 + a2R
    a2_1 = n2 * (lam - one)
    c1 = (_pb(s1, Lr * s1) + s1 * _pb(Lr, s1)
          + _pb(s1, b2R * s2b) + s1 * _pb(b2R, s2b)
          + _pb(s2, b2Rb * s1) + s2 * _pb(b2Rb, s1)
          + _pb(s2, Lr * s2b) + s2 * _pb(Lr, s2b))
    # order-1 part of S (|xi|^2 + X_R A_2) S_1; the second row of S_1 is
    # conj(s(x,-xi)) = -conj(s) for its odd entries, so take it from the matrix
    SAS1 = S @ MatrixSymbol.real_to_real(Lr, b2R) @ S1
    r1, r2 = SAS1.a, SAS1.b
    a1_1 = sys.a1 + c1 + r1
    b1_1 = r2

    st = DiagonalizationStage1(R_cut, lam, at, bt, S, S_inv, S1, S2, None, None, sys,
                               a2_1, a1_1, b1_1)
    if quantize:
        st.Phi = MatrixParaOperator(S_inv, sys.grid, sys.cutoff)
        st.Psi = MatrixParaOperator(_rr_sum(_rr_sum(S, S1), S2), sys.grid, sys.cutoff)
    return st


def _check_positive(rad: Symbol, grid: Grid, what: str, n_dirs: int = 16) -> float:
    from .model import unit_directions

    if rad.kind == "const":
        v = float(np.real(rad.params[0]))
    else:
        # the X_R cut-off varies radially: scan radii through its transition
        dirs = unit_directions(grid.dim, n_dirs)
        radii = np.linspace(0.0, 4.0 * grid.cutoff + 8.0, 48)
        pts = (radii[:, None, None] * dirs[None]).reshape(-1, grid.dim)
        v = float(np.min(np.real(rad.sample(grid, pts))))
    if not v > RADICAND_TOL:
        raise EllipticityError(f"{what} is not positive (min {v:.3g})")
    return v


def invert_phi(st: DiagonalizationStage1, max_terms: int = 8,
               tol: float = 1e-13) -> NeumannInverse:
    """Phi^{-1} = (1 + Q)^{-1} Psi with Psi Phi = 1 + Q."""
    if st._inverse is None or st._inverse.max_terms != max_terms:
        st._inverse = _neumann(st.Psi.to_sparse(), st.Phi.to_sparse(), st.grid,
                               max_terms, tol)
    return st._inverse


def full_generator(sys: ParalinearizedSystem) -> sp.csr_matrix:
    """Sparse iE Op(|xi|^2 + A2 + A1)."""
    g = sys.grid
    k2 = np.sum(g.freqs.astype(float) ** 2, axis=0).reshape(-1)
    free = sp.diags(np.concatenate([1j * k2, -1j * k2]))
    return (free + sys.generator()).tocsr()


def _diag_generator(grid: Grid, a: Symbol, b: Symbol, cutoff) -> sp.csr_matrix:
    A, B, C, D = MatrixParaOperator(MatrixSymbol.real_to_real(a, b), grid, cutoff).blocks
    return sp.bmat([[1j * A, 1j * B], [-1j * C, -1j * D]], format="csr")


def stage1_generator(st: DiagonalizationStage1) -> sp.csr_matrix:
    """iE Op of the stage-1 target system."""
    d = st.grid.dim
    return _diag_generator(st.grid, sym.norm2(d) + st.a2_1 + st.a1_1, st.b1_1,
                           st.system.cutoff)


def conjugation_residual_stage1(st: DiagonalizationStage1, sys: ParalinearizedSystem,
                                V: PairField) -> PairField:
    """Phi G Phi^{-1} V minus the stage-1 system applied to V."""
    inv = invert_phi(st)
    G = full_generator(sys)
    z = st.Phi.to_sparse() @ (G @ inv.apply_vector(V.vector()))
    return PairField.from_vector(V.grid, z - stage1_generator(st) @ V.vector())


# ---------------------------------------------------------------------------
# Stage 2
# ---------------------------------------------------------------------------


@dataclass(eq=False)
class DiagonalizationStage2:
    c_sym: Symbol
    B: MatrixSymbol
    Phi2: MatrixParaOperator
    Psi2: MatrixParaOperator
    a2_1: Symbol
    a1_1: Symbol
    b1_1: Symbol
    R_cut: float
    _inverse: NeumannInverse | None = None

    @property
    def grid(self) -> Grid:
        return self.Phi2.grid

    def d_symbol(self) -> Symbol:
        """Off-diagonal order-1 symbol produced by the conjugation, -2c(|xi|^2 + a2^(1))."""
        d = self.c_sym.dim or self.a2_1.dim or self.grid.dim
        return -2.0 * self.c_sym * (sym.norm2(d) + self.a2_1)


def build_stage2(st1: DiagonalizationStage1, sys: ParalinearizedSystem | None = None,
                 quantize: bool = True) -> DiagonalizationStage2:
    sys = st1.system if sys is None else sys
    d = sys.grid.dim
    if st1.b1_1.is_zero:
        c = sym.ZERO
    else:
        # X_R/(|xi|^2 lambda_2) with the 1/|xi|^2 taken from the safe radial node
        c = st1.b1_1 * sym.cutoff_XR_over_norm2(st1.R_cut, d) / (2.0 * st1.lambda2)
    B = MatrixSymbol.real_to_real(sym.ZERO, c)
    B2 = MatrixSymbol.real_to_real(-(c * c.tilde()), c)
    I = MatrixSymbol.identity()
    st2 = DiagonalizationStage2(c, B, None, None, st1.a2_1, st1.a1_1, st1.b1_1, st1.R_cut)
    if quantize:
        st2.Phi2 = MatrixParaOperator(_rr_sum(I, B), sys.grid, sys.cutoff)
        st2.Psi2 = MatrixParaOperator(_rr_sum(I, -B2), sys.grid, sys.cutoff)
    return st2


def _rr_sum(a: MatrixSymbol, b: MatrixSymbol) -> MatrixSymbol:
    # keep the real-to-real structure recognizable after addition
    return MatrixSymbol.real_to_real(a.a + b.a, a.b + b.b)


def invert_phi2(st2: DiagonalizationStage2, max_terms: int = 8,
                tol: float = 1e-13) -> NeumannInverse:
    if st2._inverse is None or st2._inverse.max_terms != max_terms:
        st2._inverse = _neumann(st2.Psi2.to_sparse(), st2.Phi2.to_sparse(), st2.grid,
                                max_terms, tol)
    return st2._inverse


# ---------------------------------------------------------------------------
# Adaptive cut-off radius
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class RcutChoice:
    R_cut: float
    q_factor: float
    r2_factor: float
    radicand_margin: float
    doublings: int


def choose_R_cut(sys: ParalinearizedSystem, R0: float = R0_DEFAULT, max_doublings: int = 6,
                 c2_min: float | None = None) -> tuple[DiagonalizationStage1,
                                                      DiagonalizationStage2, RcutChoice]:
    """Double R from R0 until both Neumann factors are < 1/2 and the
    lambda_2 radicand keeps half of its ellipticity margin."""
    from .model import check_ellipticity

    if c2_min is None:
        c2_min = check_ellipticity(sys.density, sys.source_state.plus).c2_min
    need = 0.5 * min(1.0, c2_min)
    R = float(R0)
    last = None
    for k in range(max_doublings + 1):
        try:
            st1 = build_stage1(sys, R)
            st2 = build_stage2(st1, sys)
            q = invert_phi(st1).factor
            r2 = invert_phi2(st2).factor
            margin = _check_positive(st1.radicand(), sys.grid, "lambda_2 radicand")
        except NeumannDivergence as exc:
            last = exc
            R *= 2
            continue
        if q < 0.5 and r2 < 0.5 and margin >= need:
            return st1, st2, RcutChoice(R, q, r2, margin, k)
        last = NeumannDivergence("cut-off adaptation failed", max(q, r2))
        R *= 2
    raise last


# ---------------------------------------------------------------------------
# Energy norm
# ---------------------------------------------------------------------------


@dataclass(eq=False)
class EnergyNormOp:
    L_sym: Symbol
    gamma: float
    T_pow: ParaOperator
    T_pow_neg: ParaOperator
    neumann_terms: int
    _inverse: NeumannInverse | None = None

    @property
    def grid(self) -> Grid:
        return self.T_pow.grid

    def apply(self, w: Field) -> Field:
        return self.T_pow.apply(w)

    def left_inverse(self) -> NeumannInverse:
        if self._inverse is None:
            self._inverse = _neumann(self.T_pow_neg.to_sparse(), self.T_pow.to_sparse(),
                                     self.grid, self.neumann_terms, 1e-14)
        return self._inverse

    def left_inverse_residual(self, h: Field) -> float:
        back = self.left_inverse().apply(self.apply(h))
        return float(np.linalg.norm((back - h).vector()) / np.linalg.norm(h.vector()))


def build_energy_norm(st2: DiagonalizationStage2, s: float, K: int = 8,
                      grid: Grid | None = None) -> EnergyNormOp:
    if s < 0:
        raise ValueError("s must be nonnegative")
    grid = st2.grid if grid is None else grid
    d = grid.dim
    L = sym.norm2(d) + st2.a2_1
    gamma = s / 2.0
    base = sym.ONE + L
    Tp = ParaOperator(sym.power(base, gamma, RADICAND_TOL), grid)
    Tn = ParaOperator(sym.power(base, -gamma, RADICAND_TOL), grid)
    return EnergyNormOp(L, gamma, Tp, Tn, K)


def energy_functional(en: EnergyNormOp, st1: DiagonalizationStage1,
                      st2: DiagonalizationStage2, V: PairField) -> float:
    """||T_{(1+L)^gamma} (Phi_2 Phi V)_+||_{L^2}."""
    W = st2.Phi2.to_sparse() @ (st1.Phi.to_sparse() @ V.vector())
    n = V.grid.size
    w = Field(V.grid, W[:n].reshape(V.grid.shape))
    return float(np.linalg.norm(en.apply(w).vector()))


@dataclass(frozen=True)
class Diagonalization:
    """Both stages and the energy norm at one state, built together."""

    stage1: DiagonalizationStage1
    stage2: DiagonalizationStage2
    energy: EnergyNormOp
    choice: RcutChoice

    def energy_of(self, V: PairField) -> float:
        return energy_functional(self.energy, self.stage1, self.stage2, V)


def diagonalize(sys: ParalinearizedSystem, s: float, R0: float = R0_DEFAULT,
                K: int = 8) -> Diagonalization:
    st1, st2, choice = choose_R_cut(sys, R0)
    return Diagonalization(st1, st2, build_energy_norm(st2, s, K), choice)


# ---------------------------------------------------------------------------
# Dense off-diagonal measurements
# ---------------------------------------------------------------------------


def shell_profile(offdiag: np.ndarray, grid: Grid, order: float, shells) -> np.ndarray:
    """||rows of offdiag in the shell K <= |j| < K+1|| / K^order for each K."""
    r = np.sqrt(np.sum(grid.freq_list.astype(float) ** 2, axis=1))
    out = []
    for K in shells:
        rows = (r >= K) & (r < K + 1)
        blk = offdiag[rows]
        out.append(np.linalg.norm(blk, 2) / K**order if blk.size else 0.0)
    return np.array(out)


def shell_tail(values: np.ndarray, tail: int = 3) -> float:
    """Largest of the last ``tail`` profile values.

    Lower-order content decays along a profile divided by K^m, so the top
    shells bound the order-m content from above.
    """
    return float(np.max(np.abs(np.asarray(values)[-tail:])))


def _projection(O: np.ndarray, P: np.ndarray) -> float:
    pp = np.vdot(P, P).real
    return float(np.real(np.vdot(P, O)) / pp) if pp > 0 else 0.0


@dataclass(frozen=True)
class SuppressionReport:
    shells: tuple
    order2_before: float
    order2_after1: float
    order1_after1: float
    order1_after2: float
    # component along i Op(b_1^{(1)}), the coupling stage 2 targets
    b1_along_after1: float = float("nan")
    b1_along_after2: float = float("nan")

    @property
    def stage1_factor(self) -> float:
        return self.order2_before / max(abs(self.order2_after1), 1e-300)

    @property
    def stage2_factor(self) -> float:
        return self.order1_after1 / max(abs(self.order1_after2), 1e-300)


def offdiagonal_suppression(sys: ParalinearizedSystem, R_cut: float,
                            margin: int = 2, tail: int = 3) -> SuppressionReport:
    """Dense conjugation of the generator by both stages.

    The upper-right block of each generator is profiled over spherical
    shells 2R <= K <= N - margin; the order-m content is the largest of the
    top ``tail`` values of the shell norm divided by K^m.
    """
    grid = sys.grid
    n = grid.size
    st1 = build_stage1(sys, R_cut)
    st2 = build_stage2(st1, sys)
    G = full_generator(sys).toarray()
    Phi = st1.Phi.to_sparse().toarray()
    G1 = Phi @ G @ invert_phi(st1).dense()
    del Phi
    Phi2 = st2.Phi2.to_sparse().toarray()
    G2 = Phi2 @ G1 @ invert_phi2(st2).dense()
    del Phi2
    lo = int(math.ceil(2 * R_cut))
    hi = grid.cutoff - margin
    if hi - lo + 1 < tail:
        raise ValueError("grid too small for a shell profile at this R_cut")
    shells = tuple(range(lo, hi + 1))
    est = lambda M, m: shell_tail(shell_profile(M[:n, n:], grid, m, shells), tail)
    P = _diag_generator(grid, sym.ZERO, st1.b1_1, sys.cutoff)[:n, n:].toarray()
    r = np.sqrt(np.sum(grid.freq_list.astype(float) ** 2, axis=1))
    rows = r >= lo
    return SuppressionReport(shells, est(G, 2), est(G1, 2), est(G1, 1), est(G2, 1),
                             _projection(G1[:n, n:][rows], P[rows]),
                             _projection(G2[:n, n:][rows], P[rows]))
