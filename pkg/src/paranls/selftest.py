"""Fast invariant checks for every module, run by the ``selftest`` command."""
from __future__ import annotations

import traceback
from typing import Callable

import numpy as np

from . import diagonalize as dg
from . import evolve
from . import model
from . import paradiff as pd
from . import symbols as sym
from .torus import Field, Grid, PairField, gradient, sobolev_norm, spectral_derivative, to_physical, to_spectral


def _torus(rng):
    g = Grid(1, 8)
    g2 = Grid(2, 4)
    f = Field.random(g, rng)
    yield "roundtrip", np.max(np.abs(to_spectral(g, to_physical(f)).coeffs - f.coeffs)) < 1e-12
    yield "derivative", np.allclose(spectral_derivative(Field.from_modes(g, {2: 1.0}), 1).coeffs,
                                    Field.from_modes(g, {2: 2j}).coeffs, atol=1e-13)
    h = Field.random(g2, rng)
    yield "conj_involution", np.allclose(h.conj().conj().coeffs, h.coeffs, atol=0)
    yield "sobolev_monotone", sobolev_norm(h, 1.0) >= sobolev_norm(h, 0.0)
    yield "gradient_len", len(gradient(h)) == 2


def _symbols(rng):
    d = 1
    g = Grid(d, 8)
    c = sym.coeff(Field.random(g, rng, decay=4.0))
    x = sym.xi(1, d)
    pts = np.array([[3.0], [-5.0], [11.0]])
    a = c * x * x
    lhs = sym.evaluate(sym.dxi(a, 0), g, pts)
    rhs = sym.evaluate(2 * c * x, g, pts)
    yield "dxi_product_rule", np.allclose(lhs, rhs, atol=1e-12)
    pb = sym.evaluate(sym.poisson_bracket(a, a), g, pts)
    yield "poisson_antisymmetric", np.max(np.abs(pb)) < 1e-10
    yield "chi_plateau", float(sym.chi(1.0)) == 1.0 and float(sym.chi(2.0)) == 0.0


def _paradiff(rng):
    g = Grid(1, 8)
    I = pd.quantize_matrix(sym.ONE, g).toarray()
    yield "T1_identity", np.max(np.abs(I - np.eye(g.size))) < 1e-13
    D = pd.quantize_matrix(1j * sym.xi(1, 1), g).toarray()
    yield "Op_ixi_derivative", np.max(np.abs(D - np.diag(1j * g.freqs[0].astype(float)))) < 1e-13
    u = Field.random(g, rng, decay=3.0)
    a = sym.coeff(Field(g, 0.5 * (u.coeffs + u.conj().coeffs))) * sym.norm2(1)
    A = pd.quantize_matrix(a, g).toarray()
    yield "hermitian_real_symbol", np.max(np.abs(A - A.conj().T)) < 1e-11


def _model(rng):
    g = Grid(1, 8)
    u = Field.from_modes(g, {1: 0.1, -2: 0.05})
    for name in sorted(model.DENSITIES):
        try:
            model.get_density(name, 1)
            ok = True
        except model.DensityValidationError:
            ok = False
        yield f"density_{name}_valid", ok
    F = model.flagship(1)
    rep = model.check_ellipticity(F, u)
    yield "flagship_elliptic_small_data", rep.passed
    sys_ = model.build_symbols(F, PairField.from_field(u))
    U = PairField.from_field(u)
    yield "generator_real_to_real", PairField.from_vector(g, sys_.generator() @ U.vector()).on_subspace(1e-10)


def _diagonalize(rng):
    g = Grid(1, 8)
    u = Field.from_modes(g, {1: 0.1, -2: 0.05})
    sys_ = model.build_symbols(model.flagship(1), PairField.from_field(u))
    st1 = dg.build_stage1(sys_)
    pts = rng.uniform(-30, 30, size=(50, 1))
    s1 = st1.s1.sample(g, pts)
    s2 = st1.s2.sample(g, pts)
    yield "s1_sq_minus_s2_sq", np.max(np.abs(np.abs(s1) ** 2 - np.abs(s2) ** 2 - 1)) < 1e-10
    inv = dg.invert_phi(st1)
    yield "neumann_contracts", inv.factor < 1.0


def _evolve(rng):
    g = Grid(1, 8)
    U0 = PairField.from_field(Field.random(g, rng))
    prob = evolve.LinearProblem(None, U0, 0.1, 0.01)
    rep = evolve.solve_linear(prob)
    yield "free_flow_isometry", abs(rep.growth - 1) < 1e-12
    z = PairField.zeros(g)
    r = evolve.picard_solve(model.flagship(1), z, 0.05, 0.01)
    yield "zero_datum_fixed", r.converged and r.iterations == 1
    u = Field.from_modes(g, {1: 0.1})
    r = evolve.picard_solve(model.flagship(1), PairField.from_field(u), 0.05, 0.01)
    yield "subspace_preserved", all(V.on_subspace(1e-10) for V in r.trajectory.states)


SUITES: dict[str, Callable] = {
    "torus_spectral": _torus,
    "symbol_algebra": _symbols,
    "paradiff": _paradiff,
    "nls_model": _model,
    "diagonalize": _diagonalize,
    "evolve": _evolve,
}


def run_suites(seed: int = 0) -> dict:
    out = {}
    all_ok = True
    for name, suite in SUITES.items():
        rng = np.random.default_rng(seed)
        checks = {}
        try:
            for check, ok in suite(rng):
                checks[check] = bool(ok)
        except Exception:  # a crashing suite counts as one failure
            checks["<exception>"] = False
            checks_tb = traceback.format_exc(limit=3)
            out.setdefault("errors", {})[name] = checks_tb.strip().splitlines()[-1]
        passed = sum(checks.values())
        failed = len(checks) - passed
        all_ok &= failed == 0
        out[name] = {"passed": passed, "failed": failed, "checks": checks}
    return {"suites": {k: v for k, v in out.items() if k != "errors"},
            "errors": out.get("errors", {}), "passed": all_ok}
