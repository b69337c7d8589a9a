"""Command-line front end: ``weaktraj <command> --config <path> [--out <dir>]``.

Each run writes its results into the output directory together with
``manifest.json`` (config echo, version, wall time, checks, error).  The
manifest is written on every run, including failed ones.

Exit codes: 0 success, 2 configuration error, 3 numerical failure or a
failed internal check, 4 postselection impossible.
"""

from __future__ import annotations

import argparse
import math
import sys
import time
import warnings
from dataclasses import asdict, dataclass
from pathlib import Path
from typing import Optional

import numpy as np

from . import __version__
from .config import COMMANDS, RunConfig, load_config, to_jsonable
from .errors import ConfigError, PostselectionError, WeakTrajError
from .lindblad import liouvillian_apply, propagate, propagate_series, retropropagate, steady_state
from .operators import Effect, Operator, State, projector
from .records import complex_matrix, curve_from_csv, write_columns_csv, write_json
from .stonybrook import (analytic_h, fit_zeta_omega, h_curve, h_monte_carlo, h_positive_tau,
                         symmetry_defect)
from .trajectories import monte_carlo_weak_value, simulate_trajectory
from .weakvalue import (PurePrePost, aav_weak_value, general_weak_value,
                        generalized_weak_value, retro_weak_value, strong_postselected)

MC_DEFAULT_DT = 1e-3


@dataclass
class Check:
    name: str
    passed: bool
    value: float
    bound: float
    enforced: bool = True


@dataclass
class Outcome:
    results: dict
    checks: list
    files: list


def _initial_state(cfg: RunConfig) -> State:
    st = cfg.states
    if "rho0" in st:
        return st["rho0"]
    if "psi0" in st:
        return State.from_ket(st["psi0"], cfg.model.space)
    return steady_state(cfg.model)


def _final_effect(cfg: RunConfig) -> Operator:
    st = cfg.states
    if "effect" in st:
        return st["effect"]
    return Effect(projector(st["phi"], cfg.model.space))


def _state_checks(states, tol=1e-8):
    tr = max(abs(np.trace(s.data) - 1) for s in states)
    lam = min(float(np.linalg.eigvalsh(0.5 * (s.data + s.data.conj().T))[0]) for s in states)
    return [Check("trace_preservation", tr < tol, float(tr), tol),
            Check("positivity", lam > -tol, lam, -tol)]


def _steady(cfg, out):
    rho = steady_state(cfg.model)
    path = out / f"{cfg.stem}.json"
    spectrum = np.linalg.eigvalsh(rho.data)
    write_json(path, {"rho": complex_matrix(rho.data), "spectrum": spectrum.tolist(),
                      "purity": float(np.trace(rho.data @ rho.data).real)})
    resid = liouvillian_apply(cfg.model, rho).norm_max()
    checks = _state_checks([rho]) + [Check("fixed_point_residual", resid < 1e-8, resid, 1e-8)]
    return Outcome({"purity": float(np.trace(rho.data @ rho.data).real)}, checks, [path])


def _evolve(cfg, out):
    rho0 = _initial_state(cfg)
    times = list(cfg.numerics.times)
    states = propagate_series(cfg.model, rho0, times, cfg.numerics.dt)
    files = []
    path = out / f"{cfg.stem}.json"
    write_json(path, {"times": times, "states": [complex_matrix(s.data) for s in states]})
    files.append(path)
    if "observable" in cfg.states:
        X = cfg.states["observable"]
        vals = [float(np.trace(X @ s.data).real) for s in states]
        csv_path = out / f"{cfg.stem}.csv"
        write_columns_csv(csv_path, {"t": times, "expect": vals})
        files.append(csv_path)
    return Outcome({"n_times": len(times)}, _state_checks(states), files)


def _weakvalue_aav(cfg, out):
    st = cfg.states
    pp = PurePrePost.normalized(st["psi0"], st["phi"])
    X = st["observable"]
    evals = np.linalg.eigvalsh(X)
    aav = aav_weak_value(pp, X)
    res = {"aav": aav, "spectrum": [float(evals[0]), float(evals[-1])],
           "anomalous": bool(aav < evals[0] - 1e-12 or aav > evals[-1] + 1e-12)}
    checks = []
    try:
        strong = strong_postselected(pp, X)
        res["strong"] = strong
        inside = evals[0] - 1e-12 <= strong <= evals[-1] + 1e-12
        checks.append(Check("strong_value_in_spectrum", bool(inside), strong, float(evals[-1])))
    except PostselectionError:
        res["strong"] = None
    gen = generalized_weak_value(pp, X / 2)
    diff = abs(gen - aav)
    checks.append(Check("qnd_reduction", diff < 1e-12, diff, 1e-12))
    if "c" in st:
        res["generalized"] = generalized_weak_value(pp, st["c"])
    path = out / f"{cfg.stem}.json"
    write_json(path, res)
    print(repr(aav))
    return Outcome(res, checks, [path])


def _weakvalue_general(cfg, out):
    model, num = cfg.model, cfg.numerics
    rho0 = _initial_state(cfg)
    E = _final_effect(cfg)
    c = Operator(cfg.states["c"], model.space) if "c" in cfg.states else model.homodyne_op
    wv = general_weak_value(model, rho0, E, num.t, num.T, num.dt, c=c)
    E_retro = retropropagate(model, E, num.T - num.t, num.dt)
    rho_t = propagate(model, rho0, num.t, num.dt)
    retro = retro_weak_value(E_retro, rho_t, c)
    diff = abs(retro - wv.value)
    res = {"value": wv.value, "numerator": [wv.numerator.real, wv.numerator.imag],
           "denominator": [wv.denominator.real, wv.denominator.imag], "retrodictive_value": retro}
    path = out / f"{cfg.stem}.json"
    write_json(path, res)
    print(repr(wv.value))
    return Outcome(res, [Check("path_equivalence", diff < 1e-8, diff, 1e-8)], [path])


def _weakvalue_mc(cfg, out):
    model, num = cfg.model, cfg.numerics
    rho0 = _initial_state(cfg)
    dt = num.dt or MC_DEFAULT_DT
    est = monte_carlo_weak_value(model, rho0, num.t, num.T, dt, num.window, num.n_traj, num.seed,
                                 smooth=num.smooth)
    cn = model.counting_op
    E = Operator(cn.data.conj().T @ cn.data, model.space)
    closed = general_weak_value(model, rho0, E, num.t, num.T, dt).value
    dev = abs(est.value - closed)
    res = {"value": est.value, "stderr": est.stderr, "n_selected": est.n_selected,
           "n_total": est.n_total, "window": est.window, "smooth": est.smooth,
           "closed_form": closed}
    files = [out / f"{cfg.stem}.json"]
    write_json(files[0], res)
    if cfg.output.trajectory:
        rec = simulate_trajectory(model, rho0, num.T + est.window, dt, num.seed, est.window, num.T)
        files.append(out / f"{cfg.stem}_trajectory.csv")
        rec.to_csv(files[-1])
    print(f"{est.value!r} +/- {est.stderr!r}")
    return Outcome(res, [Check("mc_within_3_stderr", dev < 3 * est.stderr, dev, 3 * est.stderr)],
                   files)


def _fit_grid(p):
    return np.linspace(0.0, 6.0 / p.eta, 241)


def _fit_checks(p, fit):
    tol = 10 * (p.epsilon / p.kappa) ** 2
    rel = abs(fit.eta_fit - p.eta) / p.eta
    enforced = p.weak_drive
    return [Check("eta_fit_within_5pct", rel < 0.05, rel, 0.05, enforced),
            Check("fit_residual", fit.residual < tol, fit.residual, tol, enforced)]


def _stonybrook_h(cfg, out):
    p, num = cfg.sb_params, cfg.numerics
    methods = num.methods
    taus = np.linspace(num.tau_min, num.tau_max, num.n_tau)
    pos = taus >= 0
    cols = {"tau": taus}
    checks = []
    res = {"weak_drive": p.weak_drive}
    tol2 = 10 * (p.epsilon / p.kappa) ** 2
    enforced = p.weak_drive

    if "full-ME" in methods:
        cols["h_full"] = h_curve(p, taus, "full-ME", num.dt).values
    if "effective-H" in methods:
        h_eff = np.full(len(taus), np.nan)
        if pos.any():
            h_eff[pos] = h_positive_tau(p, taus[pos], method="effective-H")
        cols["h_eff"] = h_eff
        if "h_full" in cols and pos.any():
            d = float(np.max(np.abs(cols["h_full"][pos] - h_eff[pos])))
            checks.append(Check("tier_agreement", d < tol2, d, tol2, enforced))
    grid = _fit_grid(p)
    fit = fit_zeta_omega(h_curve(p, grid, "full-ME", num.dt))
    res.update(zeta=fit.zeta, Omega=fit.Omega, eta_fit=fit.eta_fit, fit_residual=fit.residual,
               eta=p.eta)
    if "analytic" in methods:
        cols["h_analytic_fit"] = analytic_h(p, np.abs(taus), fit.zeta, fit.Omega)
        checks += _fit_checks(p, fit)
    if "monte-carlo" in methods:
        h_mc = np.full(len(taus), np.nan)
        h_se = np.full(len(taus), np.nan)
        dt = num.dt or MC_DEFAULT_DT
        for i in np.flatnonzero(taus > 0):
            seed = num.seed + int(i) * num.n_traj
            h_mc[i], h_se[i], _ = h_monte_carlo(p, float(taus[i]), dt, num.window, num.n_traj, seed)
        cols["h_mc"] = h_mc
        cols["h_mc_stderr"] = h_se
    abs_taus = np.unique(np.abs(taus))
    sym = symmetry_defect(p, abs_taus, num.dt)
    bound = 10 * (p.epsilon / p.kappa) * abs(fit.zeta)
    checks.append(Check("symmetry", sym < bound, sym, bound, enforced))
    res["symmetry_defect"] = sym

    files = []
    if cfg.output.format == "csv":
        files.append(out / f"{cfg.stem}.csv")
        write_columns_csv(files[-1], cols)
    else:
        files.append(out / f"{cfg.stem}_curve.json")
        write_json(files[-1], {k: [None if math.isnan(v) else float(v) for v in c]
                               for k, c in cols.items()})
    files.append(out / f"{cfg.stem}.json")
    write_json(files[-1], res)
    return Outcome(res, checks, files)


def _fit(cfg, out):
    p = cfg.sb_params
    if cfg.curve_path is not None:
        try:
            curve = curve_from_csv(cfg.curve_path, cfg.curve_column)
        except (OSError, ValueError) as exc:
            raise ConfigError(f"cannot read input curve: {exc}") from exc
    else:
        curve = h_curve(p, _fit_grid(p), "full-ME", cfg.numerics.dt)
    fit = fit_zeta_omega(curve)
    res = asdict(fit)
    checks = _fit_checks(p, fit) if p is not None else []
    path = out / f"{cfg.stem}.json"
    write_json(path, res)
    print(f"zeta={fit.zeta!r} Omega={fit.Omega!r} eta_fit={fit.eta_fit!r}")
    return Outcome(res, checks, [path])


_DISPATCH = {
    "steady": _steady,
    "evolve": _evolve,
    "weakvalue-aav": _weakvalue_aav,
    "weakvalue-general": _weakvalue_general,
    "weakvalue-mc": _weakvalue_mc,
    "stonybrook-h": _stonybrook_h,
    "fit": _fit,
}


def exit_code_for(exc: BaseException) -> int:
    if isinstance(exc, WeakTrajError):
        return exc.exit_code
    if isinstance(exc, ValueError):
        return 2
    return 3


def _check_json(c: Check):
    d = asdict(c)
    d["passed"] = bool(d["passed"])
    return d


def execute(cfg: Optional[RunConfig], out_dir, config_path=None, command=None,
            error: Optional[BaseException] = None) -> int:
    """Run ``cfg`` (or record ``error``), always writing the manifest."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    start = time.perf_counter()
    manifest = {"tool": "weaktraj", "version": __version__,
                "command": cfg.command if cfg is not None else command,
                "config_path": None if config_path is None else str(config_path),
                "config": to_jsonable(cfg.source) if cfg is not None else None,
                "checks": [], "outputs": [], "warnings": [], "error": None}
    code = 0
    if error is None:
        with warnings.catch_warnings(record=True) as caught:
            warnings.simplefilter("always")
            try:
                outcome = _DISPATCH[cfg.command](cfg, out)
            except Exception as exc:  # any module failure ends up in the manifest
                error = exc
            else:
                manifest["results"] = to_jsonable(outcome.results)
                manifest["checks"] = [_check_json(c) for c in outcome.checks]
                manifest["outputs"] = [p.name for p in outcome.files]
                failed = [c.name for c in outcome.checks if c.enforced and not c.passed]
                if failed:
                    code = 3
                    manifest["error"] = {"type": "CheckFailed",
                                         "message": f"internal checks failed: {failed}"}
        manifest["warnings"] = sorted({str(w.message) for w in caught})
    if error is not None:
        code = exit_code_for(error)
        manifest["error"] = {"type": type(error).__name__, "message": str(error)}
        print(f"error: {error}", file=sys.stderr)
    manifest["exit_code"] = code
    manifest["wall_time_s"] = time.perf_counter() - start
    write_json(out / "manifest.json", manifest)
    return code


def run(cfg: RunConfig, out_dir=".") -> int:
    return execute(cfg, out_dir)


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="weaktraj",
                                 description="Weak values of continuously monitored open quantum systems.")
    ap.add_argument("command", choices=COMMANDS)
    ap.add_argument("--config", required=True, help="TOML configuration file")
    ap.add_argument("--out", default=".", help="output directory (default: current directory)")
    ap.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    return ap


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        cfg = load_config(args.config, args.command)
    except ConfigError as exc:
        return execute(None, args.out, args.config, args.command, error=exc)
    return execute(cfg, args.out, args.config)


if __name__ == "__main__":
    sys.exit(main())
