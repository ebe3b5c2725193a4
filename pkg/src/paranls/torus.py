"""Discrete torus grids, spectral transforms and Sobolev norms.

Fields are stored as truncated Fourier coefficients on the cube
``{j in Z^d : |j|_inf <= N}`` with the symmetric normalisation

    u(x) = (2 pi)^{-d/2} sum_n u_hat(n) e^{i n.x},
    u_hat(n) = (2 pi)^{-d/2} int u(x) e^{-i n.x} dx.

Nonlinear products are evaluated on an oversampled physical grid with
``M >= 2(2N+1)`` points per axis, which makes quadratic and cubic products
alias-free after truncation back to the cube.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from functools import cached_property
from typing import Sequence

import numpy as np


class GridMismatchError(ValueError):
    pass


@dataclass(frozen=True)
class Grid:
    """Truncated frequency cube plus the physical grid used for products."""

    dim: int
    cutoff: int
    points_per_axis: int = 0

    def __post_init__(self):
        if self.dim < 1:
            raise ValueError(f"dim must be >= 1, got {self.dim}")
        if self.cutoff < 1:
            raise ValueError(f"cutoff must be >= 1, got {self.cutoff}")
        m_min = 2 * (2 * self.cutoff + 1)
        if self.points_per_axis == 0:
            object.__setattr__(self, "points_per_axis", m_min)
        M = self.points_per_axis
        if M < m_min or M % 2:
            raise ValueError(
                f"points_per_axis must be even and >= 2(2N+1) = {m_min}, got {M}"
            )

    @property
    def side(self) -> int:
        return 2 * self.cutoff + 1

    @property
    def shape(self) -> tuple[int, ...]:
        return (self.side,) * self.dim

    @property
    def size(self) -> int:
        return self.side**self.dim

    @property
    def phys_shape(self) -> tuple[int, ...]:
        return (self.points_per_axis,) * self.dim

    @cached_property
    def freqs(self) -> np.ndarray:
        """Integer frequencies, shape ``(d, *shape)``."""
        k = np.arange(-self.cutoff, self.cutoff + 1)
        return np.array(np.meshgrid(*([k] * self.dim), indexing="ij"))

    @cached_property
    def freq_list(self) -> np.ndarray:
        """Frequencies in flat (row-major) order, shape ``(size, d)``."""
        return self.freqs.reshape(self.dim, -1).T.copy()

    @cached_property
    def japanese(self) -> np.ndarray:
        """<j> = sqrt(1 + |j|^2) on the cube."""
        return np.sqrt(1.0 + np.sum(self.freqs.astype(float) ** 2, axis=0))

    @cached_property
    def points(self) -> np.ndarray:
        """Physical grid points, shape ``(d, *phys_shape)``."""
        x = 2 * np.pi * np.arange(self.points_per_axis) / self.points_per_axis
        return np.array(np.meshgrid(*([x] * self.dim), indexing="ij"))

    def index_of(self, j: Sequence[int]) -> tuple[int, ...]:
        return tuple(int(ji) + self.cutoff for ji in j)

    def reflect(self, coeffs: np.ndarray) -> np.ndarray:
        """c(j) -> c(-j) on the cube."""
        return coeffs[(slice(None, None, -1),) * self.dim]

    def contains(self, other: "Grid") -> bool:
        return self.dim == other.dim and self.cutoff >= other.cutoff


@dataclass(frozen=True, eq=False)
class Field:
    """Band-limited complex function on the torus (Fourier coefficients)."""

    grid: Grid
    coeffs: np.ndarray = field(repr=False)

    def __post_init__(self):
        c = np.asarray(self.coeffs, dtype=complex)
        if c.shape != self.grid.shape:
            raise ValueError(f"coefficient shape {c.shape} != grid shape {self.grid.shape}")
        c.setflags(write=False)
        object.__setattr__(self, "coeffs", c)

    @classmethod
    def zeros(cls, grid: Grid) -> "Field":
        return cls(grid, np.zeros(grid.shape, complex))

    @classmethod
    def from_modes(cls, grid: Grid, modes: dict) -> "Field":
        """Field whose *physical* amplitude at mode j is ``modes[j]``.

        ``{(1,): 0.1}`` gives ``u(x) = 0.1 e^{ix}``.
        """
        c = np.zeros(grid.shape, complex)
        scale = (2 * np.pi) ** (grid.dim / 2)
        for j, amp in modes.items():
            j = (j,) if np.isscalar(j) else tuple(j)
            if len(j) != grid.dim or max(abs(int(v)) for v in j) > grid.cutoff:
                raise ValueError(f"mode {j} outside the retained lattice")
            c[grid.index_of(j)] += amp * scale
        return cls(grid, c)

    @classmethod
    def random(cls, grid: Grid, rng: np.random.Generator, decay: float = 2.0,
               amplitude: float = 1.0) -> "Field":
        """Random field with coefficients decaying like <j>^{-decay}."""
        c = rng.standard_normal(grid.shape) + 1j * rng.standard_normal(grid.shape)
        c *= amplitude * grid.japanese ** (-decay)
        return cls(grid, c)

    def _check(self, other: "Field"):
        if other.grid != self.grid:
            raise GridMismatchError(f"{self.grid} vs {other.grid}")

    def __add__(self, other: "Field") -> "Field":
        self._check(other)
        return Field(self.grid, self.coeffs + other.coeffs)

    def __sub__(self, other: "Field") -> "Field":
        self._check(other)
        return Field(self.grid, self.coeffs - other.coeffs)

    def __neg__(self) -> "Field":
        return Field(self.grid, -self.coeffs)

    def __mul__(self, scalar) -> "Field":
        if isinstance(scalar, Field):
            return multiply_dealiased(self, scalar)
        return Field(self.grid, self.coeffs * scalar)

    __rmul__ = __mul__

    def conj(self) -> "Field":
        """Coefficients of the complex conjugate function."""
        return Field(self.grid, np.conj(self.grid.reflect(self.coeffs)))

    def vector(self) -> np.ndarray:
        return self.coeffs.reshape(-1)

    def resample(self, grid: Grid) -> "Field":
        """Zero-pad or truncate onto another cube of the same dimension."""
        if grid.dim != self.grid.dim:
            raise GridMismatchError("dimension mismatch")
        c = np.zeros(grid.shape, complex)
        n = min(grid.cutoff, self.grid.cutoff)
        dst = tuple(slice(grid.cutoff - n, grid.cutoff + n + 1) for _ in range(grid.dim))
        src = tuple(slice(self.grid.cutoff - n, self.grid.cutoff + n + 1) for _ in range(grid.dim))
        c[dst] = self.coeffs[src]
        return Field(grid, c)


@dataclass(frozen=True, eq=False)
class PairField:
    """Pair (u+, u-) acting as the vector U = (u, conj u) when on the subspace."""

    plus: Field
    minus: Field

    def __post_init__(self):
        if self.plus.grid != self.minus.grid:
            raise GridMismatchError("plus/minus grids differ")

    @classmethod
    def from_field(cls, u: Field) -> "PairField":
        return cls(u, u.conj())

    @classmethod
    def zeros(cls, grid: Grid) -> "PairField":
        z = Field.zeros(grid)
        return cls(z, z)

    @classmethod
    def from_vector(cls, grid: Grid, vec: np.ndarray) -> "PairField":
        n = grid.size
        return cls(Field(grid, vec[:n].reshape(grid.shape)),
                   Field(grid, vec[n:].reshape(grid.shape)))

    @property
    def grid(self) -> Grid:
        return self.plus.grid

    def vector(self) -> np.ndarray:
        return np.concatenate([self.plus.vector(), self.minus.vector()])

    def subspace_residual(self) -> float:
        """max |u-(j) - conj(u+(-j))|, zero on the real subspace."""
        return float(np.max(np.abs(self.minus.coeffs - self.plus.conj().coeffs), initial=0.0))

    def on_subspace(self, tol: float = 1e-10) -> bool:
        scale = max(1.0, float(np.max(np.abs(self.plus.coeffs), initial=0.0)))
        return self.subspace_residual() <= tol * scale

    def __add__(self, other: "PairField") -> "PairField":
        return PairField(self.plus + other.plus, self.minus + other.minus)

    def __sub__(self, other: "PairField") -> "PairField":
        return PairField(self.plus - other.plus, self.minus - other.minus)

    def __mul__(self, scalar) -> "PairField":
        return PairField(self.plus * scalar, self.minus * scalar)

    __rmul__ = __mul__

    def sobolev_norm(self, s: float) -> float:
        # ||U||_{H^s} = ||u1||_{H^s} + ||u2||_{H^s}
        return sobolev_norm(self.plus, s) + sobolev_norm(self.minus, s)

    def resample(self, grid: Grid) -> "PairField":
        return PairField(self.plus.resample(grid), self.minus.resample(grid))


def coeffs_from_samples(samples: np.ndarray, dim: int, K: int) -> np.ndarray:
    """Cube (cutoff K) coefficients of samples on an M^d grid, last d axes."""
    M = samples.shape[-1]
    if 2 * K + 1 > M:
        raise ValueError(f"cutoff {K} not resolvable on {M} points")
    axes = tuple(range(-dim, 0))
    full = np.fft.fftn(samples, axes=axes) * ((2 * np.pi) ** (dim / 2) / M**dim)
    k = np.arange(-K, K + 1) % M
    lead = (slice(None),) * (samples.ndim - dim)
    return full[lead + np.ix_(*([k] * dim))]


def samples_from_coeffs(coeffs: np.ndarray, dim: int, M: int, fold: bool = False) -> np.ndarray:
    """Samples on an M^d grid of cube coefficients (last d axes).

    With ``fold=True`` a cube wider than the grid is accepted: modes are
    folded modulo M, which still gives the exact point values.
    """
    side = coeffs.shape[-1]
    K = (side - 1) // 2
    lead_shape = coeffs.shape[: coeffs.ndim - dim]
    full = np.zeros(lead_shape + (M,) * dim, complex)
    lead = (slice(None),) * len(lead_shape)
    if 2 * K + 1 > M:
        if not fold:
            raise ValueError(f"cutoff {K} not resolvable on {M} points")
        # fold one axis at a time
        src = coeffs
        for ax in range(dim):
            pos = src.ndim - dim + ax
            idx = np.arange(-K, K + 1) % M
            shape = list(src.shape)
            shape[pos] = M
            tgt = np.zeros(shape, complex)
            np.add.at(tgt, (slice(None),) * pos + (idx,), src)
            src = tgt
        full[...] = src
    else:
        k = np.arange(-K, K + 1) % M
        full[lead + np.ix_(*([k] * dim))] = coeffs
    axes = tuple(range(-dim, 0))
    return np.fft.ifftn(full, axes=axes) * (M**dim / (2 * np.pi) ** (dim / 2))


def samples_to_coeffs(grid: Grid, samples: np.ndarray) -> np.ndarray:
    """Cube coefficients of physical samples (last d axes are the grid)."""
    return coeffs_from_samples(samples, grid.dim, grid.cutoff)


def coeffs_to_samples(grid: Grid, coeffs: np.ndarray) -> np.ndarray:
    """Physical samples of cube coefficients (last d axes are the cube)."""
    return samples_from_coeffs(coeffs, grid.dim, grid.points_per_axis)


def to_physical(f: Field) -> np.ndarray:
    return coeffs_to_samples(f.grid, f.coeffs)


def to_spectral(grid: Grid, samples: np.ndarray) -> Field:
    samples = np.asarray(samples)
    if samples.shape != grid.phys_shape:
        raise ValueError(f"samples shape {samples.shape} != {grid.phys_shape}")
    return Field(grid, samples_to_coeffs(grid, samples))


def sobolev_norm(f: Field, s: float) -> float:
    w = f.grid.japanese ** (2 * s)
    return float(np.sqrt(np.sum(w * np.abs(f.coeffs) ** 2)))


def l2_inner(f: Field, g: Field) -> complex:
    """(f, g)_{L^2} = int f conj(g) dx."""
    f._check(g)
    return complex(np.sum(f.coeffs * np.conj(g.coeffs)))


def project_low(f: Field, K: float) -> Field:
    """Keep modes with Euclidean |k| <= K."""
    if K < 0:
        raise ValueError("K must be nonnegative")
    mask = np.sum(f.grid.freqs.astype(float) ** 2, axis=0) <= K * K
    return Field(f.grid, np.where(mask, f.coeffs, 0))


def spectral_derivative(f: Field, axis: int) -> Field:
    """d/dx_axis, axis counted from 1."""
    if not 1 <= axis <= f.grid.dim:
        raise ValueError(f"axis must be in 1..{f.grid.dim}, got {axis}")
    return Field(f.grid, 1j * f.grid.freqs[axis - 1] * f.coeffs)


def gradient(f: Field) -> list[Field]:
    return [spectral_derivative(f, a) for a in range(1, f.grid.dim + 1)]


def multiply_dealiased(f: Field, g: Field) -> Field:
    f._check(g)
    prod = to_physical(f) * to_physical(g)
    return Field(f.grid, samples_to_coeffs(f.grid, prod))


def spectral_diff_samples(grid: Grid, samples: np.ndarray, axis: int, order: int = 1) -> np.ndarray:
    """x-derivative of physical samples through the full M-point spectrum.

    ``axis`` counts from 0 over the trailing grid axes.  The Nyquist mode is
    dropped for odd orders so that real data stay real.
    """
    if order == 0:
        return samples
    M = grid.points_per_axis
    ax = samples.ndim - grid.dim + axis
    k = np.fft.fftfreq(M, 1.0 / M)
    mult = (1j * k) ** order
    if order % 2:
        mult[M // 2] = 0.0
    shape = [1] * samples.ndim
    shape[ax] = M
    spec = np.fft.fft(samples, axis=ax) * mult.reshape(shape)
    return np.fft.ifft(spec, axis=ax)
