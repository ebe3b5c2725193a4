"""Experiment orchestration and deterministic artifacts.

A run directory holds the CSV outputs, ``manifest.json`` (config echo,
versions, artifact digests, summary), ``config.toml`` (feeds back into
``run``) and ``timing.json``, the only file with wall-clock content.
"""
from __future__ import annotations

import csv
import hashlib
import json
import logging
import platform
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable

import numpy as np
import scipy

from . import __version__
from . import evolve
from .config import RunConfig
from .symbols import CutoffSpec

log = logging.getLogger(__name__)

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_SOLVER = 3


@dataclass
class RunResult:
    status: int
    out_dir: Path
    artifacts: dict = field(default_factory=dict)
    summary: dict = field(default_factory=dict)


def _write(out: Path, name: str, text: str, artifacts: dict) -> None:
    p = out / name
    with open(p, "w", newline="\n") as fh:
        fh.write(text)
    artifacts[name] = hashlib.sha256(text.encode()).hexdigest()


def _json(obj) -> str:
    return json.dumps(obj, indent=2, sort_keys=True, allow_nan=True) + "\n"


def _clean(x):
    if isinstance(x, dict):
        return {k: _clean(v) for k, v in x.items()}
    if isinstance(x, (list, tuple)):
        return [_clean(v) for v in x]
    if isinstance(x, (np.floating, float)):
        return float(x)
    if isinstance(x, (np.integer,)):
        return int(x)
    if isinstance(x, np.bool_):
        return bool(x)
    return x


def versions() -> dict:
    return {"paranls": __version__, "numpy": np.__version__, "scipy": scipy.__version__,
            "python": platform.python_version()}


# ---------------------------------------------------------------------------
# Experiments
# ---------------------------------------------------------------------------


def _picard(cfg: RunConfig, F, U0):
    return evolve.picard_solve(F, U0, cfg.T, cfg.dt, max_iter=cfg.max_iter, s=cfg.s, tol=cfg.tol,
                               cutoff=CutoffSpec(cfg.epsilon), max_halvings=cfg.max_T_halvings)


def _report_summary(rep: evolve.SolveReport) -> dict:
    return {"converged": rep.converged, "iterations": rep.iterations, "horizon": rep.horizon,
            "halvings": rep.halvings, "contraction_ratios": list(rep.contraction_ratios),
            "max_abs_drift": float(np.max(np.abs(rep.hamiltonian_drift)))
            if rep.hamiltonian_drift is not None else None}


def exp_picard(cfg: RunConfig, out: Path, artifacts: dict, jobs: int, base: Path | None) -> dict:
    F = cfg.density_obj()
    rep = _picard(cfg, F, cfg.initial(base))
    evolve.hamiltonian_drift(rep, F)
    _write(out, "run.csv", evolve.run_csv(rep, F), artifacts)
    _write(out, "iterates.csv", evolve.iterate_csv(rep), artifacts)
    return _report_summary(rep)


def exp_energy(cfg: RunConfig, out: Path, artifacts: dict, jobs: int, base: Path | None) -> dict:
    F = cfg.density_obj()
    rep = _picard(cfg, F, cfg.initial(base))
    evolve.hamiltonian_drift(rep, F)
    t, ratio = evolve.energy_ratio_series(rep, F, every=cfg.energy_every, R0=cfg.R0)
    _write(out, "run.csv", evolve.run_csv(rep, F), artifacts)
    _write(out, "iterates.csv", evolve.iterate_csv(rep), artifacts)
    _write(out, "energy.csv", evolve.energy_csv(t, ratio), artifacts)
    summ = _report_summary(rep)
    summ["energy_ratio_range"] = [float(np.min(ratio)), float(np.max(ratio))]
    return summ


def exp_linear(cfg: RunConfig, out: Path, artifacts: dict, jobs: int, base: Path | None) -> dict:
    F = cfg.density_obj()
    U0 = cfg.initial(base)
    # coefficients frozen at the initial datum, no forcing
    prob = evolve.LinearProblem(F, U0, cfg.T, cfg.dt, background=U0,
                                cutoff=CutoffSpec(cfg.epsilon))
    rep = evolve.solve_linear(prob, cfg.s)
    _write(out, "linear.csv", evolve.linear_csv(rep, cfg.s), artifacts)
    return {"growth": rep.growth}


def exp_continuity(cfg: RunConfig, out: Path, artifacts: dict, jobs: int, base: Path | None) -> dict:
    F = cfg.density_obj()
    U0 = cfg.initial(base)
    dU = cfg.perturbation_field()
    scales = [2.0 ** (-k) for k in range(cfg.halvings + 1)]
    kw = dict(max_iter=cfg.max_iter, tol=cfg.tol, cutoff=CutoffSpec(cfg.epsilon))
    dist = evolve.solution_map_probe(F, U0, [dU * c for c in scales], cfg.T, cfg.dt, s=cfg.s,
                                     jobs=jobs, **kw)
    _write(out, "continuity.csv", evolve.continuity_csv(scales, dist), artifacts)
    ratios = [dist[i] / dist[i + 1] for i in range(len(dist) - 1) if dist[i + 1] > 0]
    return {"distances": dist, "halving_ratios": ratios}


def exp_selftest(cfg: RunConfig, out: Path, artifacts: dict, jobs: int, base: Path | None) -> dict:
    from .selftest import run_suites

    summary = run_suites(seed=cfg.seed)
    _write(out, "selftest.json", _json(_clean(summary)), artifacts)
    return summary


EXPERIMENT_FUNCS: dict[str, Callable] = {
    "picard": exp_picard,
    "energy-monitor": exp_energy,
    "linear": exp_linear,
    "continuity": exp_continuity,
    "selftest": exp_selftest,
}


def run(cfg: RunConfig, out_dir: str | Path, jobs: int = 1, base: Path | None = None) -> RunResult:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    artifacts: dict = {}
    t0 = time.perf_counter()
    status = EXIT_OK
    try:
        summary = EXPERIMENT_FUNCS[cfg.experiment](cfg, out, artifacts, jobs, base)
        if cfg.experiment == "selftest" and not summary.get("passed", False):
            status = EXIT_SOLVER
    except (evolve.PicardFailure, evolve.BlowUpError, ArithmeticError) as exc:
        status = EXIT_SOLVER
        payload = {"error": type(exc).__name__, "message": str(exc)}
        rep = getattr(exc, "report", None)
        if rep is not None:
            payload.update({"iterations": rep.iterations, "horizon": rep.horizon,
                            "delta_norms": list(rep.delta_norms),
                            "contraction_ratios": list(rep.contraction_ratios)})
        _write(out, "failure.json", _json(_clean(payload)), artifacts)
        summary = {"failed": payload}
    elapsed = time.perf_counter() - t0
    _write(out, "config.toml", cfg.to_toml(), artifacts)
    manifest = {"config": cfg.to_dict(), "versions": versions(), "status": status,
                "summary": _clean(summary), "artifacts": dict(sorted(artifacts.items()))}
    with open(out / "manifest.json", "w", newline="\n") as fh:
        fh.write(_json(manifest))
    with open(out / "timing.json", "w", newline="\n") as fh:
        fh.write(_json({"timestamp": time.strftime("%Y-%m-%dT%H:%M:%S%z"),
                        "elapsed_seconds": elapsed}))
    return RunResult(status, out, artifacts, summary)


# ---------------------------------------------------------------------------
# Plot data
# ---------------------------------------------------------------------------


class MissingArtifact(FileNotFoundError):
    pass


def _read_csv(p: Path) -> list[dict]:
    with open(p, newline="") as fh:
        return list(csv.DictReader(fh))


def _long(rows, series_cols: dict[str, str], tcol: str, tname: str = "t") -> str:
    lines = [f"series,{tname},value"]
    for series, col in series_cols.items():
        for r in rows:
            if r[col] != "":
                lines.append(f"{series},{r[tcol]},{r[col]}")
    return "\n".join(lines) + "\n"


def emit_plotdata(run_dir: str | Path) -> dict:
    """Write tidy long-format CSVs under ``<run_dir>/plots``; return name -> path."""
    run_dir = Path(run_dir)
    if not (run_dir / "manifest.json").exists():
        raise MissingArtifact(f"no manifest.json in {run_dir}")
    produced = {}
    plots = run_dir / "plots"
    found = False

    def put(name, text):
        plots.mkdir(exist_ok=True)
        with open(plots / name, "w", newline="\n") as fh:
            fh.write(text)
        produced[name] = plots / name

    if (run_dir / "run.csv").exists():
        found = True
        rows = _read_csv(run_dir / "run.csv")
        put("hamiltonian_drift.csv", _long(rows, {"hamiltonian_drift": "H_drift"}, "t"))
        put("sobolev.csv", _long(rows, {"sobolev_s": "sobolev_s"}, "t"))
    if (run_dir / "iterates.csv").exists():
        found = True
        rows = _read_csv(run_dir / "iterates.csv")
        put("iterates.csv", _long(rows, {"delta_norm": "delta_norm",
                                         "contraction_ratio": "contraction_ratio"}, "n", "n"))
    if (run_dir / "linear.csv").exists():
        found = True
        rows = _read_csv(run_dir / "linear.csv")
        put("growth.csv", _long(rows, {"growth": "growth"}, "t"))
    if (run_dir / "continuity.csv").exists():
        found = True
        put("continuity.csv", (run_dir / "continuity.csv").read_text())
    if (run_dir / "energy.csv").exists():
        found = True
        put("energy.csv", (run_dir / "energy.csv").read_text())
    if not found:
        raise MissingArtifact(f"no plottable artifacts in {run_dir}")
    return produced
