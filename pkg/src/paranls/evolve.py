"""Time integration of the para-differential linear systems and the
quasilinear solve by iterating linear problems.

Each linear problem is

    V' = iE Op(|xi|^2 + A2(U_b) + A1(U_b)) V + f,

with coefficients frozen along a background trajectory U_b.  One step is a
Strang splitting: an exact half step of the Fourier multiplier
iE(|xi|^2 + D), where D is the x-independent (diagonal) part of the
para-differential generator, the implicit midpoint rule for the rest of the
generator plus the forcing, and another exact half step.

The nonlinear solve iterates U_n' = iE Op(|xi|^2 + A(U_{n-1})) U_n + R(U_{n-1})U_{n-1}.
At a fixed point the background is the solution itself and a step reduces to
Strang splitting of the free flow with the implicit midpoint rule for the
nonlinearity.
"""
from __future__ import annotations

import csv
import io
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np
import scipy.sparse as sp
import scipy.sparse.linalg as spla

from .model import (
    HamiltonianDensity,
    build_symbols,
    check_ellipticity,
    hamiltonian,
    remainder_forcing,
)
from .symbols import CutoffSpec
from .torus import Grid, PairField, sobolev_norm

DEFAULT_S = 4.0
MAX_HALVINGS = 6


class BlowUpError(ArithmeticError):
    pass


class PicardFailure(RuntimeError):
    def __init__(self, msg: str, report: "SolveReport | None" = None):
        super().__init__(msg)
        self.report = report


class EllipticityLost(PicardFailure):
    pass


# ---------------------------------------------------------------------------
# Trajectories
# ---------------------------------------------------------------------------


@dataclass
class Trajectory:
    """States at step endpoints and step midpoints of a uniform time grid.

    ``mid[k]`` is the state halfway through step k in the interaction frame
    of the free half steps (see :func:`step_linear`).
    """

    grid: Grid
    dt: float
    states: list = field(default_factory=list)
    mid: list = field(default_factory=list)

    @property
    def times(self) -> np.ndarray:
        return self.dt * np.arange(len(self.states))

    @property
    def steps(self) -> int:
        return len(self.states) - 1

    def sup_norm(self, s: float) -> float:
        return max(U.sobolev_norm(s) for U in self.states)

    def distance(self, other: "Trajectory", s: float) -> float:
        """sup_t ||U(t) - V(t)||_{H^s} over common times (other may be finer)."""
        ratio = int(round(self.dt / other.dt))
        if ratio < 1 or abs(ratio * other.dt - self.dt) > 1e-12 * self.dt:
            raise ValueError("time grids are not nested")
        g = self.grid if self.grid.cutoff >= other.grid.cutoff else other.grid
        out = 0.0
        for k, U in enumerate(self.states):
            if k * ratio >= len(other.states):
                break
            V = other.states[k * ratio]
            out = max(out, (U.resample(g) - V.resample(g)).sobolev_norm(s))
        return out


# ---------------------------------------------------------------------------
# Linear problems
# ---------------------------------------------------------------------------


def _free_symbol(grid: Grid) -> np.ndarray:
    k2 = np.sum(grid.freqs.astype(float) ** 2, axis=0).reshape(-1)
    return np.concatenate([1j * k2, -1j * k2])


@dataclass
class LinearProblem:
    """V' = iE Op(|xi|^2 + A2 + A1) V + f on [0, T].

    ``background[k]`` is the frozen state for step k (None means zero
    symbols) and ``forcing[k]`` the forcing at the step midpoint, given in
    the interaction frame.  Either may be a callable of the step index; a
    single PairField background freezes the coefficients for all steps.
    """

    density: HamiltonianDensity | None
    initial: PairField
    horizon: float
    dt: float
    background: Sequence | Callable | None = None
    forcing: Sequence | Callable | None = None
    cutoff: CutoffSpec = CutoffSpec()
    blowup_factor: float = 1e6

    def __post_init__(self):
        if not self.dt > 0:
            raise ValueError("dt must be positive")
        n = self.horizon / self.dt
        if abs(n - round(n)) > 1e-9 * max(1.0, n):
            raise ValueError("horizon must be a multiple of dt")
        if self.background is not None and self.density is None:
            raise ValueError("a background needs a density")

    @property
    def grid(self) -> Grid:
        return self.initial.grid

    @property
    def steps(self) -> int:
        return int(round(self.horizon / self.dt))

    def _get(self, seq, k):
        if seq is None or isinstance(seq, PairField):
            return seq
        return seq(k) if callable(seq) else seq[k]

    def generator(self, k: int) -> sp.csr_matrix | None:
        Ub = self._get(self.background, k)
        if Ub is None:
            return None
        cached = self.__dict__.get("_gen_cache")
        if cached is not None and cached[0] is Ub:
            return cached[1]
        G = build_symbols(self.density, Ub, self.cutoff).generator()
        self.__dict__["_gen_cache"] = (Ub, G)
        return G

    def forcing_vector(self, k: int) -> np.ndarray | None:
        f = self._get(self.forcing, k)
        return None if f is None else f.vector()


def advance(grid: Grid, h: float, state: PairField, G: sp.spmatrix | None,
            f: np.ndarray | None) -> tuple[PairField, PairField]:
    """One split step with generator G and midpoint forcing f.

    Returns the new state and the midpoint state
    (e^{hL/2} U_k + e^{-hL/2} U_{k+1}) / 2, L the exact multiplier part.
    """
    free = _free_symbol(grid)
    if G is not None:
        Dg = G.diagonal()
        A = (G - sp.diags(Dg)).tocsc()
        A.eliminate_zeros()
    else:
        Dg = np.zeros_like(free)
        A = None
    half = np.exp(0.5 * h * (free + Dg))
    w0 = half * state.vector()
    if A is None or A.nnz == 0:
        w1 = w0 + (h * f if f is not None else 0.0)
    else:
        I = sp.identity(A.shape[0], format="csc", dtype=complex)
        rhs = w0 + 0.5 * h * (A @ w0)
        if f is not None:
            rhs = rhs + h * f
        try:
            w1 = spla.splu((I - 0.5 * h * A).tocsc()).solve(rhs)
        except RuntimeError as exc:  # singular factor
            raise PicardFailure(f"implicit midpoint solve failed: {exc}") from exc
    return (PairField.from_vector(grid, half * w1),
            PairField.from_vector(grid, 0.5 * (w0 + w1)))


def step_linear(problem: LinearProblem, state: PairField, k: int) -> tuple[PairField, PairField]:
    """Advance ``state`` over step k (from t = k dt to (k+1) dt)."""
    return advance(problem.grid, problem.dt, state, problem.generator(k),
                   problem.forcing_vector(k))


@dataclass
class LinearReport:
    trajectory: Trajectory
    growth: float
    norms: np.ndarray


def solve_linear(problem: LinearProblem, s: float = DEFAULT_S) -> LinearReport:
    V = problem.initial
    traj = Trajectory(problem.grid, problem.dt, [V], [])
    n0 = V.sobolev_norm(s)
    norms = [n0]
    for k in range(problem.steps):
        V, mid = step_linear(problem, V, k)
        traj.states.append(V)
        traj.mid.append(mid)
        nk = V.sobolev_norm(s)
        norms.append(nk)
        if not np.isfinite(nk) or (n0 > 0 and nk > problem.blowup_factor * n0):
            raise BlowUpError(f"norm grew to {nk:.3g} at step {k + 1}")
    norms = np.array(norms)
    growth = float(np.max(norms) / n0) if n0 > 0 else (0.0 if np.max(norms) == 0 else math.inf)
    return LinearReport(traj, growth, norms)


# ---------------------------------------------------------------------------
# Quasilinear solve
# ---------------------------------------------------------------------------


@dataclass
class IterationState:
    n: int
    trajectory: Trajectory
    delta_norms: list
    sup_norm: float


@dataclass
class SolveReport:
    converged: bool
    iterations: int
    trajectory: Trajectory
    horizon: float
    dt: float
    s: float
    delta_norms: list
    sup_norms: list
    contraction_ratios: list
    halvings: int = 0
    hamiltonian_drift: np.ndarray | None = None
    energy_ratio: np.ndarray | None = None

    @property
    def times(self) -> np.ndarray:
        return self.trajectory.times

    @property
    def final(self) -> PairField:
        return self.trajectory.states[-1]


def _iterate(F: HamiltonianDensity, U0: PairField, prev: Trajectory | None, steps: int,
             dt: float, cutoff: CutoffSpec) -> Trajectory:
    """One linear problem of the scheme, coefficients from ``prev``."""
    grid = U0.grid
    traj = Trajectory(grid, dt, [U0], [])
    V = U0
    for k in range(steps):
        if prev is None:
            G = f = None
        else:
            Ub = prev.mid[k]
            sys_ = build_symbols(F, Ub, cutoff)
            G = sys_.generator()
            f = remainder_forcing(F, Ub, sys_, G).vector()
        V, mid = advance(grid, dt, V, G, f)
        traj.states.append(V)
        traj.mid.append(mid)
    return traj


def picard_solve(F: HamiltonianDensity, U0: PairField, T: float, dt: float,
                 max_iter: int = 30, s: float = DEFAULT_S, tol: float = 1e-10,
                 cutoff: CutoffSpec = CutoffSpec(), adapt_T: bool = True,
                 max_halvings: int = MAX_HALVINGS, check_ellipticity_every: bool = True,
                 callback: Callable[[IterationState], None] | None = None) -> SolveReport:
    """Iterate the linear problems until sup_t ||U_n - U_{n-1}||_{H^{s-2}} <= tol ||U0||.

    A contraction ratio above 1 on two iterates counts as divergence; T is
    then halved (at most ``max_halvings`` times) and the iteration restarts.
    """
    if not U0.on_subspace(1e-10):
        raise ValueError("initial datum is not of the form (u, conj u)")
    rep0 = check_ellipticity(F, U0.plus)
    if not rep0.passed:
        raise EllipticityLost(f"initial datum is not elliptic: {rep0.as_dict()}")
    halvings = 0
    while True:
        steps = int(round(T / dt))
        if steps < 1 or abs(steps * dt - T) > 1e-9 * T:
            raise ValueError("T must be a positive multiple of dt")
        report = _picard_fixed_T(F, U0, T, dt, steps, max_iter, s, tol, cutoff,
                                 check_ellipticity_every, callback)
        report.halvings = halvings
        if report.converged or not adapt_T:
            return report
        if halvings >= max_halvings or steps < 2:
            raise PicardFailure("iteration did not converge after shrinking T", report)
        halvings += 1
        T = dt * (steps // 2)


def _picard_fixed_T(F, U0, T, dt, steps, max_iter, s, tol, cutoff, check_ell, callback):
    scale = U0.sobolev_norm(s - 2)
    prev = None
    deltas: list = []
    sups: list = []
    ratios: list = []
    bad = 0
    traj = None
    for n in range(1, max_iter + 1):
        traj = _iterate(F, U0, prev, steps, dt, cutoff)
        sups.append(traj.sup_norm(s))
        if not np.isfinite(sups[-1]):
            return SolveReport(False, n, traj, T, dt, s, deltas, sups, ratios)
        if check_ell and prev is not None:
            worst = max(traj.mid, key=lambda U: U.sobolev_norm(s))
            rep = check_ellipticity(F, worst.plus)
            if not rep.passed:
                raise EllipticityLost(f"ellipticity lost at iterate {n}: {rep.as_dict()}")
        if prev is None:
            delta = traj.sup_norm(s - 2) if n > 1 else _delta_from_zero(traj, s - 2)
        else:
            delta = prev.distance(traj, s - 2)
        deltas.append(delta)
        if len(deltas) >= 2:
            r = deltas[-1] / deltas[-2] if deltas[-2] > 0 else 0.0
            ratios.append(r)
            if r > 1.0:
                bad += 1
        if callback is not None:
            callback(IterationState(n, traj, list(deltas), sups[-1]))
        if delta <= tol * scale or delta == 0.0:
            return SolveReport(True, n, traj, T, dt, s, deltas, sups, ratios)
        if bad >= 2:
            return SolveReport(False, n, traj, T, dt, s, deltas, sups, ratios)
        prev = traj
    return SolveReport(False, max_iter, traj, T, dt, s, deltas, sups, ratios)


def _delta_from_zero(traj: Trajectory, s: float) -> float:
    # the scheme starts from the zero trajectory
    return traj.sup_norm(s)


# ---------------------------------------------------------------------------
# Diagnostics
# ---------------------------------------------------------------------------


def hamiltonian_drift(report: SolveReport, F: HamiltonianDensity) -> np.ndarray:
    """(H(u(t)) - H(u(0))) / |H(u(0))| along the trajectory."""
    H = np.array([hamiltonian(F, U.plus) for U in report.trajectory.states])
    H0 = H[0]
    drift = (H - H0) / abs(H0) if H0 != 0 else H - H0
    report.hamiltonian_drift = drift
    return drift


def energy_ratio_series(report: SolveReport, F: HamiltonianDensity, every: int = 1,
                        R0: float | None = None) -> tuple[np.ndarray, np.ndarray]:
    """||w_gamma||_{L^2} / ||u||_{H^s} at every ``every``-th time step."""
    from .diagonalize import R0_DEFAULT, diagonalize

    R0 = R0_DEFAULT if R0 is None else R0
    idx = list(range(0, len(report.trajectory.states), every))
    if idx[-1] != len(report.trajectory.states) - 1:
        idx.append(len(report.trajectory.states) - 1)
    out = []
    for k in idx:
        U = report.trajectory.states[k]
        sys_ = build_symbols(F, U)
        dg = diagonalize(sys_, report.s, R0)
        out.append(dg.energy_of(U) / _hs(U, report.s))
    t = report.trajectory.times[idx]
    report.energy_ratio = np.array(out)
    return t, np.array(out)


def _hs(U: PairField, s: float) -> float:
    return sobolev_norm(U.plus, s)


def solve_residual(report: SolveReport, F: HamiltonianDensity, s: float) -> float:
    """sup_k ||(U_{k+1} - U_k)/dt - RHS(midpoint)||_{H^s} using the midpoint rule."""
    from .model import full_rhs

    tr = report.trajectory
    worst = 0.0
    for k in range(tr.steps):
        U0, U1 = tr.states[k], tr.states[k + 1]
        Um = (U0 + U1) * 0.5
        res = (U1 - U0) * (1.0 / tr.dt) - full_rhs(F, Um)
        worst = max(worst, res.sobolev_norm(s))
    return worst


def solution_map_probe(F: HamiltonianDensity, U0: PairField, perturbations: Sequence[PairField],
                       T: float, dt: float, s: float = DEFAULT_S, jobs: int = 1,
                       **kw) -> list[float]:
    """sup_t ||U^delta - U||_{H^s} for each perturbation delta.

    The perturbed solves share nothing and run on up to ``jobs`` threads.
    """
    base = picard_solve(F, U0, T, dt, s=s, adapt_T=False, **kw)
    if not base.converged:
        raise PicardFailure("reference solve did not converge", base)

    def one(dU):
        if not dU.vector().any():
            return 0.0
        rep = picard_solve(F, U0 + dU, T, dt, s=s, adapt_T=False, **kw)
        if not rep.converged:
            raise PicardFailure("perturbed solve did not converge", rep)
        return base.trajectory.distance(rep.trajectory, s)

    if jobs <= 1:
        return [one(dU) for dU in perturbations]
    with ThreadPoolExecutor(max_workers=jobs) as ex:
        return list(ex.map(one, perturbations))


# ---------------------------------------------------------------------------
# CSV emitters
# ---------------------------------------------------------------------------


def _fmt(x: float) -> str:
    return repr(float(x))


def _csv(header: Sequence[str], rows) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(header)
    for r in rows:
        w.writerow([_fmt(v) if isinstance(v, (float, np.floating)) else v for v in r])
    return buf.getvalue()


def run_csv(report: SolveReport, F: HamiltonianDensity) -> str:
    """Columns t, H_drift, sobolev_s, energy_ratio (blank where not sampled)."""
    drift = report.hamiltonian_drift
    if drift is None:
        drift = hamiltonian_drift(report, F)
    t = report.times
    er = {}
    if report.energy_ratio is not None:
        n = len(report.energy_ratio)
        every = max(1, (len(t) - 1) // max(1, n - 1)) if n > 1 else len(t)
        idx = list(range(0, len(t), every))[: n - 1] + [len(t) - 1]
        er = dict(zip(idx, report.energy_ratio))
    rows = []
    for k, U in enumerate(report.trajectory.states):
        rows.append([float(t[k]), float(drift[k]), float(_hs(U, report.s)),
                     _fmt(er[k]) if k in er else ""])
    return _csv(["t", "H_drift", "sobolev_s", "energy_ratio"], rows)


def iterate_csv(report: SolveReport) -> str:
    """Columns n, delta_norm, sup_norm, contraction_ratio."""
    rows = []
    for i, d in enumerate(report.delta_norms):
        r = report.contraction_ratios[i - 1] if i >= 1 else ""
        rows.append([i + 1, float(d), float(report.sup_norms[i]),
                     _fmt(r) if r != "" else ""])
    return _csv(["n", "delta_norm", "sup_norm", "contraction_ratio"], rows)


def energy_csv(t: np.ndarray, ratio: np.ndarray) -> str:
    """Columns t, ratio."""
    return _csv(["t", "ratio"], [[float(a), float(b)] for a, b in zip(t, ratio)])


def continuity_csv(scales: Sequence[float], distances: Sequence[float]) -> str:
    """Columns delta_scale, distance."""
    return _csv(["delta_scale", "distance"], [[float(a), float(b)] for a, b in zip(scales, distances)])


def linear_csv(report: LinearReport, s: float) -> str:
    """Columns t, sobolev_s, growth."""
    t = report.trajectory.times
    n0 = report.norms[0]
    return _csv(["t", "sobolev_s", "growth"],
                [[float(t[k]), float(v), float(v / n0) if n0 > 0 else 0.0]
                 for k, v in enumerate(report.norms)])
