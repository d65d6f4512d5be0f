"""Command-line front end: ``effdiff simulate|converge|sweep|validate-flow CONFIG``.

Exit codes: 0 ok, 1 configuration error, 2 runtime failure, 3 ``--assert``
check failed. Logging goes to stderr; reports are CSV files plus a JSON run
manifest in the configured output directory.
"""

from __future__ import annotations

import argparse
import hashlib
import json
import logging
import math
import os
import sys
import time
from pathlib import Path
from typing import Sequence

import numpy as np

from . import __version__
from .analysis import (
    SWEEP_PARAMS,
    convergence_study,
    detect_plateau,
    effective_diffusivity,
    sweep,
)
from .config import RunConfig, load_config, parse_list, parse_number
from .ensemble import CHECKPOINT_ENV, SimulationConfig, run_ensemble
from .errors import ConfigError, DomainError, EffdiffError
from .flows import check_structure

log = logging.getLogger("effdiff")

EXIT_OK, EXIT_CONFIG, EXIT_RUNTIME, EXIT_ASSERT = 0, 1, 2, 3
DEFAULT_CHECKPOINT_EVERY = 16384  # particles


class AssertionFailed(EffdiffError):
    pass


def _fmt(v) -> str:
    if v is None:
        return ""
    if isinstance(v, (bool, np.bool_)):
        return "1" if v else "0"
    if isinstance(v, (int, np.integer)):
        return str(int(v))
    return repr(float(v))


class Run:
    """Collects outputs of one invocation and writes the manifest last."""

    def __init__(self, command: str, rc: RunConfig, sim: SimulationConfig, **identity):
        self.command = command
        self.rc = rc
        self.sim = sim
        self.outputs: list[Path] = []
        self.t0 = time.perf_counter()
        self.particle_steps = 0
        rc.output_dir.mkdir(parents=True, exist_ok=True)
        ident = {"command": command, "config": sim.fingerprint(), "version": __version__, "args": identity}
        self.manifest_hash = hashlib.sha256(json.dumps(ident, sort_keys=True).encode()).hexdigest()[:16]

    def path(self, suffix: str) -> Path:
        return self.rc.output_dir / f"{self.rc.prefix}_{suffix}"

    def write_csv(self, suffix: str, columns: Sequence[str], rows, meta: dict | None = None) -> Path:
        p = self.path(suffix)
        head = {
            "manifest": self.manifest_hash,
            "config_hash": self.sim.fingerprint(),
            "flow": self.sim.flow.name,
            "integrator": self.sim.integrator,
            "seed": self.sim.master_seed,
            "dt": repr(self.sim.dt),
            "n_particles": self.sim.n_particles,
            "T": repr(self.sim.T),
        }
        head.update(meta or {})
        lines = [f"# effdiff {__version__} {self.command}"]
        lines += [f"# {k}={v}" for k, v in head.items()]
        lines.append(",".join(columns))
        lines += [",".join(_fmt(v) for v in row) for row in rows]
        tmp = p.with_suffix(p.suffix + ".tmp")
        tmp.write_text("\n".join(lines) + "\n")
        os.replace(tmp, p)
        self.outputs.append(p)
        log.info("wrote %s", p)
        return p

    def finish(self) -> Path:
        wall = time.perf_counter() - self.t0
        manifest = {
            "manifest_hash": self.manifest_hash,
            "command": self.command,
            "config_path": str(self.rc.path),
            "config_hash": self.sim.fingerprint(),
            "code_version": __version__,
            "wall_clock_s": round(wall, 3),
            "particle_steps": self.particle_steps,
            "throughput_particle_steps_per_s": self.particle_steps / wall if wall > 0 else None,
            "outputs": [p.name for p in self.outputs],
        }
        p = self.path(f"{self.command}_manifest.json")
        p.write_text(json.dumps(manifest, indent=2) + "\n")
        return p


def _counting_runner(run: Run, workers: int, checkpoint_every: int):
    def runner(cfg: SimulationConfig):
        stats = run_ensemble(cfg, workers=workers, checkpoint_every=checkpoint_every,
                             checkpoint_dir=_checkpoint_dir(run.rc))
        run.particle_steps += cfg.n_particles * cfg.n_steps
        return stats

    return runner


def _checkpoint_dir(rc: RunConfig) -> Path:
    env = os.environ.get(CHECKPOINT_ENV)
    return Path(env) if env else rc.output_dir / "checkpoints"


def _pairs(dim: int) -> list[tuple[int, int]]:
    return [(i, j) for i in range(dim) for j in range(i, dim)]


def _diffusivity_columns(dim: int) -> list[str]:
    cols = []
    for i, j in _pairs(dim):
        cols += [f"D{i + 1}{j + 1}", f"SE{i + 1}{j + 1}"]
    return cols


def _structure_gate(sim: SimulationConfig) -> None:
    rep = check_structure(sim.flow)
    if not rep.passes():
        raise ConfigError(
            f"flow {sim.flow.name} fails the structure check: max|div|={rep.max_abs_divergence:.3g}, "
            f"max|dv_i/dx_i|={rep.max_abs_diag_jacobian:.3g}, max|mean|={rep.max_abs_mean:.3g}"
        )


def _expect(rc: RunConfig, key: str, default=None):
    return rc.number("expect", key, default)


# -- subcommands ---------------------------------------------------------------


def cmd_simulate(args, rc: RunConfig) -> int:
    sim = rc.simulation(args.seed)
    _structure_gate(sim)
    run = Run("simulate", rc, sim)
    runner = _counting_runner(run, args.workers, rc.integer("ensemble", "checkpoint_every", DEFAULT_CHECKPOINT_EVERY))
    rep = effective_diffusivity(runner(sim))
    d = sim.flow.dim
    pairs = _pairs(d)
    cols = ["t"] + _diffusivity_columns(d)
    rows = []
    for k, t in enumerate(rep.times):
        row = [t]
        for i, j in pairs:
            row += [rep.D[k, i, j], rep.se[k, i, j]]
        rows.append(row)
    run.write_csv("timeseries.csv", cols, rows)
    W = rc.integer("ensemble", "plateau_window", 8)
    rho = rc.number("ensemble", "plateau_rho", 0.05)
    pl = detect_plateau(rep, W, rho) if len(rep.times) >= W else None
    final = rows[-1] + [rep.n, None if pl is None else pl.t_mix, pl is not None and pl.mixed]
    run.write_csv("final.csv", cols + ["n", "t_mix", "mixed"], [final])
    run.finish()
    D, se = rep.final()
    print(f"D11 = {D:.6g} +- {se:.2g} (T={sim.T:g}, n={rep.n})")
    if args.check:
        _assert_value(rc, D, se)
    return EXIT_OK


def _assert_value(rc: RunConfig, D: float, se: float) -> None:
    target = _expect(rc, "d11")
    if target is None:
        raise ConfigError("--assert needs [expect] d11", path=str(rc.path))
    k = _expect(rc, "se_mult", 0.0)
    rtol = _expect(rc, "rtol", 0.0)
    tol = max(k * se, rtol * abs(target))
    ok = abs(D - target) <= tol
    print(f"assert |D11 - {target:g}| = {abs(D - target):.3g} <= {tol:.3g}: {'PASS' if ok else 'FAIL'}")
    if not ok:
        raise AssertionFailed("D11 outside expected tolerance")


def _assert_slope(rc: RunConfig, slope: float | None) -> None:
    lo, hi = _expect(rc, "slope_min"), _expect(rc, "slope_max")
    if lo is None and hi is None:
        raise ConfigError("--assert needs [expect] slope_min and/or slope_max", path=str(rc.path))
    ok = slope is not None and (lo is None or slope >= lo) and (hi is None or slope <= hi)
    print(f"assert slope in [{lo}, {hi}]: {'PASS' if ok else 'FAIL'}")
    if not ok:
        raise AssertionFailed("fitted slope outside expected range")


def _list_arg(rc: RunConfig, given: str | None, section: str, key: str, flag: str) -> list[float]:
    if given is not None:
        try:
            return parse_list(given)
        except ValueError as exc:
            raise ConfigError(f"{flag}: {exc}") from None
    if rc.has(section, key):
        return rc.numbers(section, key)
    raise ConfigError(f"give {flag} or set [{section}] {key}", path=str(rc.path))


def cmd_converge(args, rc: RunConfig) -> int:
    sim = rc.simulation(args.seed)
    _structure_gate(sim)
    dts = _list_arg(rc, args.dt_list, "converge", "dt_list", "--dt-list")
    ref_dt = ref_value = None
    if args.ref_value is not None:
        vals = parse_list(args.ref_value)
        ref_value = (vals[0], vals[1] if len(vals) > 1 else 0.0)
    elif args.ref_dt is not None:
        ref_dt = parse_number(args.ref_dt)
    elif rc.has("converge", "ref_value"):
        vals = rc.numbers("converge", "ref_value")
        ref_value = (vals[0], vals[1] if len(vals) > 1 else 0.0)
    elif rc.has("converge", "ref_dt"):
        ref_dt = rc.number("converge", "ref_dt")
    else:
        raise ConfigError("give --ref-dt or --ref-value (or [converge] ref_dt / ref_value)", path=str(rc.path))
    ref_n = rc.integer("converge", "ref_particles", None)
    run = Run("converge", rc, sim, dt_list=dts, ref_dt=ref_dt, ref_value=ref_value, ref_particles=ref_n)
    runner = _counting_runner(run, args.workers, 0)
    try:
        res = convergence_study(sim, dts, ref_dt=ref_dt, ref_value=ref_value, ref_particles=ref_n, runner=runner)
    except DomainError as exc:
        raise ConfigError(str(exc), path=str(rc.path)) from None
    rows = [[r.dt, r.D11, r.se, r.error, r.noise_dominated, r.seed] for r in res.rows]
    meta = {"reference_value": repr(res.reference_value), "reference_se": repr(res.reference_se),
            "reference_dt": "" if res.reference_dt is None else repr(res.reference_dt),
            "slope": "" if res.slope is None else repr(res.slope)}
    run.write_csv("convergence.csv", ["dt", "D11", "SE11", "error", "noise_dominated", "seed"], rows, meta)
    run.finish()
    if res.fit is None:
        print("fitted slope: none (noise-dominated: fewer than two levels above statistical error)")
    else:
        print(f"fitted slope: {res.slope:.4f} (R^2={res.fit.r2:.4f}, levels used={len(res.fit.u)})")
    if args.check:
        _assert_slope(rc, res.slope)
    return EXIT_OK


def cmd_sweep(args, rc: RunConfig) -> int:
    sim = rc.simulation(args.seed)
    param = args.param or rc.raw("sweep", "param", None)
    if param not in SWEEP_PARAMS:
        raise ConfigError(f"--param must be one of {', '.join(SWEEP_PARAMS)}", path=str(rc.path))
    values = _list_arg(rc, args.values, "sweep", "values", "--values")
    t_max = parse_number(args.t_max) if args.t_max else rc.number("sweep", "t_max", None)
    W = rc.integer("sweep", "plateau_window", 8)
    rho = rc.number("sweep", "plateau_rho", 0.05)
    run = Run("sweep", rc, sim, param=param, values=values, t_max=t_max, W=W, rho=rho)
    runner = _counting_runner(run, args.workers, 0)
    try:
        from .analysis import with_parameter

        for v in values:
            _structure_gate(with_parameter(sim, param, v))
        res = sweep(sim, param, values, T_max=t_max, W=W, rho=rho, runner=runner)
    except DomainError as exc:
        raise ConfigError(str(exc), path=str(rc.path)) from None
    rows = [[r.value, r.D11, r.se, r.T, r.t_mix, r.mixed, r.seed] for r in res.rows]
    meta = {"parameter": param, "slope": "" if res.fit is None else repr(res.fit.slope)}
    run.write_csv(f"sweep_{param}.csv", [param, "D11", "SE11", "T", "t_mix", "mixed", "seed"], rows, meta)
    run.finish()
    for r in res.rows:
        print(f"{param}={r.value:g}  D11={r.D11:.6g} +- {r.se:.2g}  T={r.T:g}{'' if r.mixed else '  (not mixed)'}")
    if res.fit is not None:
        print(f"fitted slope: {res.fit.slope:.4f} (R^2={res.fit.r2:.4f})")
    if args.check:
        _assert_slope(rc, None if res.fit is None else res.fit.slope)
    return EXIT_OK


def cmd_validate_flow(args, rc: RunConfig) -> int:
    flow = rc.flow()
    n = args.samples
    rep = check_structure(flow, n_samples=n)
    ok = rep.passes()
    print(f"flow: {flow.name} (dim {flow.dim})")
    print(f"max_abs_divergence: {rep.max_abs_divergence:.3e}")
    print(f"max_abs_diag_jacobian: {rep.max_abs_diag_jacobian:.3e}")
    print(f"max_abs_mean: {rep.max_abs_mean:.3e}")
    print(f"structure: {'PASS' if ok else 'FAIL'}")
    if args.check and not ok:
        raise AssertionFailed("flow structure check failed")
    return EXIT_OK


# -- entry point -----------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="effdiff", description="Monte Carlo effective diffusivity of passive tracers.")
    p.add_argument("--version", action="version", version=f"effdiff {__version__}")
    p.add_argument("-q", "--quiet", action="store_true", help="only warnings on stderr")
    sub = p.add_subparsers(dest="command", required=True)

    def common(sp, runs=True):
        sp.add_argument("config", help="INI configuration file")
        sp.add_argument("--assert", dest="check", action="store_true", help="check results against [expect]; exit 3 on failure")
        if runs:
            sp.add_argument("--seed", type=int, help="master seed (overrides the config)")
            sp.add_argument("--workers", type=int, default=1, help="worker threads, 0 = all cores")

    common(sub.add_parser("simulate", help="time series of the effective diffusivity"))
    c = sub.add_parser("converge", help="error against a reference for several dt")
    common(c)
    c.add_argument("--dt-list", help="comma separated, descending, e.g. 2^-3,2^-4")
    c.add_argument("--ref-dt", help="dt of the self-run reference")
    c.add_argument("--ref-value", help="fixed reference value, optionally 'value,se'")
    s = sub.add_parser("sweep", help="D11 against D0, eps or omega")
    common(s)
    s.add_argument("--param", choices=SWEEP_PARAMS)
    s.add_argument("--values", help="comma separated parameter values")
    s.add_argument("--t-max", help="extend T by doubling up to this horizon until the plateau is detected")
    v = sub.add_parser("validate-flow", help="divergence, diagonal Jacobian and mean-zero checks")
    common(v, runs=False)
    v.add_argument("--samples", type=int, default=256)
    return p


COMMANDS = {
    "simulate": cmd_simulate,
    "converge": cmd_converge,
    "sweep": cmd_sweep,
    "validate-flow": cmd_validate_flow,
}


def main(argv: Sequence[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(
        level=logging.WARNING if args.quiet else logging.INFO,
        format="%(asctime)s %(levelname)s %(name)s: %(message)s",
        stream=sys.stderr,
    )
    if getattr(args, "workers", 0) < 0:
        print("error: --workers must be >= 0", file=sys.stderr)
        return EXIT_CONFIG
    try:
        rc = load_config(args.config)
        return COMMANDS[args.command](args, rc)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except AssertionFailed as exc:
        print(f"assertion failed: {exc}", file=sys.stderr)
        return EXIT_ASSERT
    except (EffdiffError, ValueError, OSError, FloatingPointError) as exc:
        print(f"runtime failure: {exc}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
