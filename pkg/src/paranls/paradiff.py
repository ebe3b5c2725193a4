"""Weyl para-differential quantization on the truncated lattice.

With the symmetric Fourier convention of :mod:`paranls.torus` the
quantization of a symbol ``a`` acts as

    (T_a h)^(j) = (2 pi)^{-d/2} sum_k chi_eps(|j-k| / <j+k>) a^(j-k, (j+k)/2) h^(k),

where ``a^(eta, xi)`` is the x-Fourier coefficient of ``a(., xi)``.  The
prefactor makes ``T_1`` the identity.  Entries vanish outside the band
``|j-k| < (8 eps / 5) <j+k>``, so operators are stored as sparse matrices
over the flattened cube (row-major order of ``Grid.freq_list``).
"""
from __future__ import annotations

import math
import struct
from dataclasses import dataclass, field
from functools import lru_cache
from pathlib import Path

import numpy as np
import scipy.sparse as sp

from .symbols import (
    CutoffSpec,
    MatrixSymbol,
    Symbol,
    coeff,
    evaluate,
    evaluate_x_only,
    evaluate_xi_only,
    poisson_bracket,
    sigma_bracket,
)
from .torus import Field, Grid, PairField

DENSE_CAP = 6000
DUMP_MAGIC = b"PDOPv1\x00\x00"


@dataclass(frozen=True)
class _Band:
    rows: np.ndarray
    cols: np.ndarray
    weight: np.ndarray      # chi_eps(|j-k|/<j+k>)
    m_inv: np.ndarray       # pair -> index into m_points
    m_points: np.ndarray    # distinct (j+k)/2, shape (n_m, d)
    eta_flat: np.ndarray    # flat index of j-k inside an M^d fft array
    eta: np.ndarray         # j-k, shape (pairs, d)
    order: np.ndarray       # pair permutation sorting by m_inv
    m_start: np.ndarray     # start offsets per m in the sorted order


@lru_cache(maxsize=32)
def _band(grid: Grid, cutoff: CutoffSpec) -> _Band:
    F = grid.freq_list
    n, d = F.shape
    M = grid.points_per_axis
    rows, cols = [], []
    block = max(1, 2_000_000 // n)
    for start in range(0, n, block):
        J = F[start:start + block, None, :]
        diff = J - F[None, :, :]
        ssum = J + F[None, :, :]
        t = np.sqrt(np.sum(diff**2, axis=-1)) / np.sqrt(1.0 + np.sum(ssum**2, axis=-1))
        r, c = np.nonzero(t < cutoff.band)
        rows.append(r + start)
        cols.append(c)
    rows = np.concatenate(rows)
    cols = np.concatenate(cols)
    diff = F[rows] - F[cols]
    ssum = F[rows] + F[cols]
    t = np.sqrt(np.sum(diff**2, axis=1)) / np.sqrt(1.0 + np.sum(ssum**2, axis=1))
    weight = cutoff(t)
    L = 4 * grid.cutoff + 1
    key = np.zeros(len(rows), np.int64)
    for i in range(d):
        key = key * L + (ssum[:, i] + 2 * grid.cutoff)
    uniq, m_inv = np.unique(key, return_inverse=True)
    m_points = np.zeros((len(uniq), d))
    rem = uniq.copy()
    for i in range(d - 1, -1, -1):
        m_points[:, i] = (rem % L - 2 * grid.cutoff) / 2.0
        rem //= L
    eta_flat = np.zeros(len(rows), np.int64)
    for i in range(d):
        eta_flat = eta_flat * M + (diff[:, i] % M)
    order = np.argsort(m_inv, kind="stable")
    m_start = np.searchsorted(m_inv[order], np.arange(len(uniq) + 1))
    return _Band(rows, cols, weight, m_inv, m_points, eta_flat, diff, order, m_start)


def _flat_index(eta: np.ndarray, M: int) -> np.ndarray:
    flat = np.zeros(len(eta), np.int64)
    for i in range(eta.shape[1]):
        flat = flat * M + (eta[:, i] % M)
    return flat


X_ALIAS_TOL = 1e-14


def _x_resolution(symbol: Symbol, grid: Grid, band: _Band, probes: int = 6) -> int:
    """Points per axis needed to read the band's x-Fourier modes without aliasing.

    The x-spectrum of the symbol is probed on the full grid at a few xi;
    modes below ``X_ALIAS_TOL`` relative to the largest are treated as absent.
    """
    M = grid.points_per_axis
    if len(band.eta) == 0:
        return M
    em = int(np.max(np.abs(band.eta)))
    if 2 * em + 2 >= M:
        return M
    r = np.linalg.norm(band.m_points, axis=1)
    rank = np.argsort(r)
    pick = np.unique(rank[np.linspace(0, len(rank) - 1, probes).astype(int)])
    samp = evaluate(symbol, grid, band.m_points[pick], 0)[0]
    axes = tuple(range(-grid.dim, 0))
    spec = np.max(np.abs(np.fft.fftn(samp, axes=axes)), axis=0)
    top = spec.max()
    if top == 0:
        return M
    k = np.abs(np.fft.fftfreq(M, 1.0 / M)).astype(int)
    kinf = k
    for _ in range(grid.dim - 1):
        kinf = np.maximum.outer(kinf, k)
    keff = int(np.max(kinf[spec > X_ALIAS_TOL * top]))
    Mx = max(2 * em + 2, em + keff + 1)
    Mx += Mx % 2
    return min(M, Mx)


def _x_fourier(samples: np.ndarray, grid: Grid) -> np.ndarray:
    """Flattened FFT over the trailing d axes, scaled by M^{-d}."""
    d = grid.dim
    axes = tuple(range(-d, 0))
    out = np.fft.fftn(samples, axes=axes) / grid.points_per_axis**d
    return out.reshape(samples.shape[: samples.ndim - d] + (-1,))


def quantize_matrix(symbol: Symbol, grid: Grid, cutoff: CutoffSpec = CutoffSpec(),
                    max_terms: int = 64) -> sp.csr_matrix:
    """Sparse matrix of T_a on the cube of ``grid``."""
    band = _band(grid, cutoff)
    n = grid.size
    if symbol.is_zero:
        return sp.csr_matrix((n, n), dtype=complex)
    if symbol.dim is not None and symbol.dim != grid.dim:
        raise ValueError("symbol and grid dimensions differ")
    # (2pi)^{-d/2} * a^(eta) = chi * fft(a)[eta] / M^d
    terms = symbol.separable_terms()
    if terms is not None and len(terms) <= max_terms:
        vals = np.zeros(len(band.rows), complex)
        for cx, kx in terms:
            if cx.x_dep:
                chat = _x_fourier(evaluate_x_only(cx, grid), grid)
                cpart = chat[band.eta_flat]
            else:
                cval = evaluate_xi_only(cx, grid.dim, np.zeros((1, grid.dim)))[0]
                cpart = np.where(band.eta_flat == 0, cval, 0)
            if kx.xi_dep:
                kvals = evaluate_xi_only(kx, grid.dim, band.m_points)[band.m_inv]
            else:
                kvals = evaluate_xi_only(kx, grid.dim, np.zeros((1, grid.dim)))[0]
            vals += cpart * kvals
    else:
        vals = np.zeros(len(band.rows), complex)
        nm = len(band.m_points)
        Mx = _x_resolution(symbol, grid, band)
        eta_flat = band.eta_flat if Mx == grid.points_per_axis else _flat_index(band.eta, Mx)
        chunk = max(1, int(4e6 // Mx**grid.dim))
        for s0 in range(0, nm, chunk):
            s1 = min(nm, s0 + chunk)
            samp = evaluate(symbol, grid, band.m_points[s0:s1], 0, points=Mx)[0]
            axes = tuple(range(-grid.dim, 0))
            fhat = (np.fft.fftn(samp, axes=axes) / Mx**grid.dim).reshape(s1 - s0, -1)
            sel = band.order[band.m_start[s0]:band.m_start[s1]]
            vals[sel] = fhat[band.m_inv[sel] - s0, eta_flat[sel]]
    vals *= band.weight
    return sp.csr_matrix((vals, (band.rows, band.cols)), shape=(n, n))


def _reflect_conj(A: sp.spmatrix) -> sp.csr_matrix:
    # conj(A_{-j,-k}): reversing the flat row-major order reverses every axis
    A = sp.coo_matrix(A)
    n = A.shape[0]
    return sp.csr_matrix((np.conj(A.data), (n - 1 - A.row, n - 1 - A.col)), shape=A.shape)


class ParaOperator:
    """T_a on a fixed cube, stored as a banded sparse matrix."""

    def __init__(self, symbol: Symbol, grid: Grid, cutoff: CutoffSpec = CutoffSpec(),
                 matrix: sp.spmatrix | None = None):
        self.symbol = symbol
        self.grid = grid
        self.cutoff = cutoff
        self.matrix = (quantize_matrix(symbol, grid, cutoff) if matrix is None
                       else sp.csr_matrix(matrix))

    def apply(self, h: Field) -> Field:
        if h.grid != self.grid:
            raise ValueError("field lives on a different grid")
        return Field(self.grid, (self.matrix @ h.vector()).reshape(self.grid.shape))

    __call__ = apply

    def to_sparse(self) -> sp.csr_matrix:
        return self.matrix

    def adjoint(self) -> "ParaOperator":
        """T_a* = T_{conj a}."""
        return ParaOperator(self.symbol.conj(), self.grid, self.cutoff)

    def conjugate(self) -> "ParaOperator":
        """The operator h -> conj(T_a conj h), equal to T_{conj a(x,-xi)}."""
        return ParaOperator(self.symbol.tilde(), self.grid, self.cutoff)

    def dense(self) -> "DenseOperator":
        return materialize(self)


def apply_weyl(T: ParaOperator, h: Field) -> Field:
    return T.apply(h)


def adjoint(T: ParaOperator) -> ParaOperator:
    return T.adjoint()


def conjugate_op(T: ParaOperator) -> ParaOperator:
    return T.conjugate()


class MatrixParaOperator:
    """Quantization of a 2x2 matrix of symbols acting on pairs."""

    def __init__(self, msym: MatrixSymbol, grid: Grid, cutoff: CutoffSpec = CutoffSpec()):
        self.symbol = msym
        self.grid = grid
        self.cutoff = cutoff
        self.real_to_real = msym.is_real_to_real()
        A = quantize_matrix(msym.a, grid, cutoff)
        B = quantize_matrix(msym.b, grid, cutoff)
        if self.real_to_real:
            C, D = _reflect_conj(B), _reflect_conj(A)
        else:
            C = quantize_matrix(msym.c, grid, cutoff)
            D = quantize_matrix(msym.e, grid, cutoff)
        self.blocks = (A, B, C, D)
        self.matrix = sp.bmat([[A, B], [C, D]], format="csr")

    @classmethod
    def from_blocks(cls, blocks, grid: Grid) -> "MatrixParaOperator":
        self = object.__new__(cls)
        self.symbol = None
        self.grid = grid
        self.cutoff = None
        self.blocks = tuple(sp.csr_matrix(b) for b in blocks)
        A, B, C, D = self.blocks
        self.matrix = sp.bmat([[A, B], [C, D]], format="csr")
        self.real_to_real = (abs(C - _reflect_conj(B)).sum() == 0
                             and abs(D - _reflect_conj(A)).sum() == 0)
        return self

    def apply(self, U: PairField) -> PairField:
        if U.grid != self.grid:
            raise ValueError("pair lives on a different grid")
        return PairField.from_vector(self.grid, self.matrix @ U.vector())

    __call__ = apply

    def to_sparse(self) -> sp.csr_matrix:
        return self.matrix

    def dense(self) -> "DenseOperator":
        return materialize(self)


def apply_matrix(TM: MatrixParaOperator, U: PairField) -> PairField:
    return TM.apply(U)


# ---------------------------------------------------------------------------
# Dense diagnostics
# ---------------------------------------------------------------------------


@dataclass(frozen=True, eq=False)
class DenseOperator:
    """Full matrix over the lattice (``blocks`` = 2 for pair operators)."""

    grid: Grid
    matrix: np.ndarray = field(repr=False)
    blocks: int = 1

    def __post_init__(self):
        n = self.grid.size * self.blocks
        if self.matrix.shape != (n, n):
            raise ValueError(f"matrix shape {self.matrix.shape} != {(n, n)}")

    def __matmul__(self, other):
        if isinstance(other, DenseOperator):
            return DenseOperator(self.grid, self.matrix @ other.matrix, self.blocks)
        return self.matrix @ other

    def __sub__(self, other: "DenseOperator") -> "DenseOperator":
        return DenseOperator(self.grid, self.matrix - other.matrix, self.blocks)

    def __add__(self, other: "DenseOperator") -> "DenseOperator":
        return DenseOperator(self.grid, self.matrix + other.matrix, self.blocks)

    def block(self, i: int, j: int) -> np.ndarray:
        n = self.grid.size
        return self.matrix[i * n:(i + 1) * n, j * n:(j + 1) * n]

    def hermitian_residual(self) -> float:
        return float(np.max(np.abs(self.matrix - self.matrix.conj().T), initial=0.0))

    def to_bytes(self) -> bytes:
        """32-byte header (magic, d, N, count) then little-endian complex128, row-major."""
        m = np.ascontiguousarray(self.matrix, dtype="<c16")
        head = struct.pack("<8sQQQ", DUMP_MAGIC, self.grid.dim, self.grid.cutoff, m.size)
        return head + m.tobytes(order="C")

    @classmethod
    def from_bytes(cls, data: bytes) -> "DenseOperator":
        magic, d, N, count = struct.unpack("<8sQQQ", data[:32])
        if magic != DUMP_MAGIC:
            raise ValueError("not a dense operator dump")
        m = np.frombuffer(data[32:], dtype="<c16")
        if m.size != count:
            raise ValueError("truncated dense operator dump")
        side = int(math.isqrt(count))
        grid = Grid(int(d), int(N))
        return cls(grid, m.reshape(side, side).astype(complex), side // grid.size)

    def dump(self, path) -> None:
        Path(path).write_bytes(self.to_bytes())

    @classmethod
    def load(cls, path) -> "DenseOperator":
        return cls.from_bytes(Path(path).read_bytes())


def materialize(T, cap: int = DENSE_CAP, grid: Grid | None = None) -> DenseOperator:
    """Dense matrix of an operator.

    Sparse-backed operators are expanded directly; any other callable acting
    on Fields or PairFields is applied to each basis mode.
    """
    if hasattr(T, "to_sparse"):
        S = T.to_sparse()
        if S.shape[0] > cap:
            raise ValueError(f"dense size {S.shape[0]} exceeds cap {cap}")
        blocks = S.shape[0] // T.grid.size
        return DenseOperator(T.grid, S.toarray(), blocks)
    if grid is None:
        raise ValueError("grid required for callables")
    n = grid.size
    if n > cap:
        raise ValueError(f"dense size {n} exceeds cap {cap}")
    cols = []
    for i in range(n):
        e = np.zeros(n, complex)
        e[i] = 1.0
        cols.append(T(Field(grid, e.reshape(grid.shape))).vector())
    return DenseOperator(grid, np.array(cols).T)


def sobolev_weights(grid: Grid, s: float, blocks: int = 1) -> np.ndarray:
    w = grid.japanese.reshape(-1) ** s
    return np.tile(w, blocks)


def operator_norm_estimate(D: DenseOperator | np.ndarray, s_in: float, s_out: float,
                           grid: Grid | None = None, blocks: int = 1) -> float:
    """Largest singular value of diag(<j>^s_out) D diag(<j>^-s_in)."""
    if isinstance(D, DenseOperator):
        grid, blocks, mat = D.grid, D.blocks, D.matrix
    else:
        mat = np.asarray(D)
    w_out = sobolev_weights(grid, s_out, blocks)
    w_in = sobolev_weights(grid, -s_in, blocks)
    W = w_out[:, None] * mat * w_in[None, :]
    if not np.any(W):
        return 0.0
    return float(np.linalg.norm(W, 2))


# ---------------------------------------------------------------------------
# Remainders
# ---------------------------------------------------------------------------


def padded_cutoff(grid: Grid, cutoff: CutoffSpec) -> int:
    """Cube size whose band closure contains every intermediate mode of T_a T_b."""
    c = cutoff.band
    r = grid.cutoff * math.sqrt(grid.dim)
    return int(math.ceil(((1 + c) * r + c) / (1 - c))) + 1


def _restrict(big: Grid, small: Grid) -> np.ndarray:
    off = big.cutoff - small.cutoff
    idx = np.arange(big.size).reshape(big.shape)
    sl = tuple(slice(off, off + small.side) for _ in range(small.dim))
    return idx[sl].reshape(-1)


def composition_dense(a: Symbol, b: Symbol, grid: Grid,
                      cutoff: CutoffSpec = CutoffSpec()) -> np.ndarray:
    """Dense T_a T_b on ``grid`` with the intermediate sum taken on a padded cube."""
    big = Grid(grid.dim, padded_cutoff(grid, cutoff))
    A = quantize_matrix(a, big, cutoff)
    B = quantize_matrix(b, big, cutoff)
    idx = _restrict(big, grid)
    return (A[idx, :] @ B[:, idx]).toarray()


def expansion_symbol(a: Symbol, b: Symbol, order: int) -> Symbol:
    """ab, + (1/2i){a,b}, - (1/8) sigma(a,b) up to the requested order."""
    if order not in (0, 1, 2):
        raise ValueError("order must be 0, 1 or 2")
    out = a * b
    if order >= 1:
        out = out + poisson_bracket(a, b) * (1 / 2j)
    if order >= 2:
        out = out - sigma_bracket(a, b) * 0.125
    return out


@dataclass
class RemainderProbe:
    """R(a,b) = T_a T_b - T_expansion, evaluated on demand."""

    a: Symbol
    b: Symbol
    expansion: Symbol
    cutoff: CutoffSpec

    def dense(self, grid: Grid) -> DenseOperator:
        ab = composition_dense(self.a, self.b, grid, self.cutoff)
        ex = quantize_matrix(self.expansion, grid, self.cutoff).toarray()
        return DenseOperator(grid, ab - ex)

    def apply(self, h: Field) -> Field:
        D = self.dense(h.grid)
        return Field(h.grid, (D.matrix @ h.vector()).reshape(h.grid.shape))

    __call__ = apply


def compose_expansion(a: Symbol, b: Symbol, order: int = 2,
                      cutoff: CutoffSpec = CutoffSpec()) -> tuple[Symbol, RemainderProbe]:
    ex = expansion_symbol(a, b, order)
    return ex, RemainderProbe(a, b, ex, cutoff)


def two_cutoff_dense(a: Symbol, eps1: float, eps2: float, grid: Grid) -> DenseOperator:
    if not 0 < eps2 <= eps1 < 0.25:
        raise ValueError("need 0 < eps2 <= eps1 < 1/4")
    A1 = quantize_matrix(a, grid, CutoffSpec(eps1))
    A2 = quantize_matrix(a, grid, CutoffSpec(eps2))
    return DenseOperator(grid, (A1 - A2).toarray())


def remainder_two_cutoffs(a: Symbol, eps1: float, eps2: float, h: Field) -> Field:
    """T_a with cut-off eps1 minus T_a with cut-off eps2, applied to h."""
    if not 0 < eps2 <= eps1 < 0.25:
        raise ValueError("need 0 < eps2 <= eps1 < 1/4")
    if eps1 == eps2:
        return Field.zeros(h.grid)
    A1 = quantize_matrix(a, h.grid, CutoffSpec(eps1))
    A2 = quantize_matrix(a, h.grid, CutoffSpec(eps2))
    return Field(h.grid, ((A1 - A2) @ h.vector()).reshape(h.grid.shape))


# ---------------------------------------------------------------------------
# Paraproducts
# ---------------------------------------------------------------------------


def _conv_index(grid: Grid):
    # for each output xi and input eta: flat index of xi - eta in the cube or -1
    F = grid.freq_list
    diff = F[:, None, :] - F[None, :, :]
    ok = np.all(np.abs(diff) <= grid.cutoff, axis=-1)
    flat = np.zeros(diff.shape[:2], np.int64)
    for i in range(grid.dim):
        flat = flat * grid.side + (diff[..., i] + grid.cutoff)
    return np.where(ok, flat, -1), F


def paraproduct_remainder_matrix(f: Field, cutoff: CutoffSpec = CutoffSpec()) -> np.ndarray:
    """Matrix of g -> R(f, g), the Theta-weighted part of the product."""
    grid = f.grid
    idx, F = _conv_index(grid)
    xi = F[:, None, :].astype(float)
    eta = F[None, :, :].astype(float)
    t1 = np.linalg.norm(xi - eta, axis=-1) / np.sqrt(1 + np.sum((xi + eta) ** 2, axis=-1))
    t2 = np.linalg.norm(eta, axis=-1) / np.sqrt(1 + np.sum((2 * xi - eta) ** 2, axis=-1))
    theta = 1.0 - cutoff(t1) - cutoff(t2)
    fv = f.vector()
    fm = np.where(idx >= 0, fv[np.maximum(idx, 0)], 0)
    return (2 * np.pi) ** (-grid.dim / 2) * theta * fm


def paraproduct_decompose(f: Field, g: Field,
                          cutoff: CutoffSpec = CutoffSpec()) -> tuple[Field, Field, Field]:
    """fg = T_f g + T_g f + R(f, g), all truncated to the cube."""
    if f.grid != g.grid:
        raise ValueError("fields live on different grids")
    grid = f.grid
    Tf_g = ParaOperator(coeff(f), grid, cutoff).apply(g)
    Tg_f = ParaOperator(coeff(g), grid, cutoff).apply(f)
    R = paraproduct_remainder_matrix(f, cutoff) @ g.vector()
    return Tf_g, Tg_f, Field(grid, R.reshape(grid.shape))
