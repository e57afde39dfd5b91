"""Command-line entry points: constant checks, cutoff construction, simulation,
fitting, tracking, the reduced ODE, PDE/ODE comparison and plots.

Every run reads one TOML file with a ``[meta] version`` header.  Unknown
sections or keys are rejected with their line number.  Artifacts are CSV
(RFC 4180), JSON manifests and SVG figures, each tied to the hash of the
normalized configuration.
"""

from __future__ import annotations

import argparse
import copy
import csv
import json
import math
import re
import sys
import time
from pathlib import Path
from typing import Any, Callable

import numpy as np

try:
    import tomllib
except ModuleNotFoundError:  # Python < 3.11
    import tomli as tomllib

from . import __version__
from .fields import FieldState, RadialGrid, jia_kenig_functional, load_snapshot
from .modulation import (DomainError, FitError, TrackedSeries, fit_static, track)
from .profiles import (BubbleConfig, cubic_overlap_integral, energy_Q, energy_Q_quadrature,
                       norm_lam_q_sq, omega_sq, truncated_norm_k1_closed)
from .reduced_ode import OdeState, compare_with_pde, integrate
from .solver import (SolverConfig, SolverError, config_hash, evolve, load_trajectory,
                     save_trajectory)
from .virial import build_cutoff, verify_cutoff

CONFIG_VERSION = 1

DEFAULTS: dict[str, dict[str, Any]] = {
    "meta": {"version": CONFIG_VERSION, "scenario": "default"},
    "physics": {"k": 2},
    "grid": {"r_min": 1e-3, "r_max": 1e3, "h": 0.025},
    "initial": {"m": 1, "iota": [1], "lam": [1.0], "snapshot": "",
                "perturbation_amplitude": 0.0, "perturbation_center": 1.0,
                "perturbation_width": 1.0},
    "solver": {"T": 0.1, "scheme": "leapfrog", "dt": 0.0, "c_cfl": 0.5,
               "snapshot_every": 0.0025, "snapshot_format": "csv"},
    "analysis": {"eta0": 0.5, "L": 10.0, "jump_factor": 1.5, "K": 0, "ode_dt": 1e-4,
                 "max_ratio": 0.5, "k_range": [1, 2, 3, 4, 5, 6], "tolerance": 1e-8,
                 "jk_radii": [0.1, 1.0, 10.0], "norm_radii": [10.0, 1000.0]},
    "cutoff": {"c": 0.05, "R": 100.0},
    "output": {"dir": "out"},
}


class ConfigError(ValueError):
    pass


# ---------------------------------------------------------------------------
# configuration

def _line_of(text: str, section: str | None, key: str | None) -> int | None:
    current = None
    for n, line in enumerate(text.splitlines(), 1):
        stripped = line.strip()
        head = re.match(r"^\[([^\[\]]+)\]", stripped)
        if head:
            current = head.group(1).strip()
            if key is None and current == section:
                return n
            continue
        if key is not None and current == section and re.match(rf"^{re.escape(key)}\s*=", stripped):
            return n
    return None


def _coerce(section: str, key: str, value: Any, default: Any, text: str) -> Any:
    where = f"[{section}] {key}"
    line = _line_of(text, section, key)
    loc = f" (line {line})" if line else ""
    if isinstance(default, bool):
        ok = isinstance(value, bool)
    elif isinstance(default, int):
        ok = isinstance(value, int) and not isinstance(value, bool)
    elif isinstance(default, float):
        ok = isinstance(value, (int, float)) and not isinstance(value, bool)
        value = float(value) if ok else value
    elif isinstance(default, str):
        ok = isinstance(value, str)
    elif isinstance(default, list):
        ok = isinstance(value, list)
    else:
        ok = True
    if not ok:
        raise ConfigError(f"key {where}{loc}: expected {type(default).__name__}, got {value!r}")
    return value


def parse_config(text: str) -> dict[str, Any]:
    """Parse and validate a config document, filling defaults."""
    try:
        raw = tomllib.loads(text)
    except tomllib.TOMLDecodeError as exc:
        raise ConfigError(f"malformed config: {exc}") from exc
    meta = raw.get("meta")
    if not isinstance(meta, dict) or "version" not in meta:
        raise ConfigError("missing [meta] version header")
    if meta["version"] != CONFIG_VERSION:
        raise ConfigError(f"unsupported config version {meta['version']!r} "
                          f"(line {_line_of(text, 'meta', 'version')})")
    doc = copy.deepcopy(DEFAULTS)
    for section, body in raw.items():
        if section not in DEFAULTS:
            line = _line_of(text, section, None)
            raise ConfigError(f"unknown section [{section}]" + (f" (line {line})" if line else ""))
        if not isinstance(body, dict):
            raise ConfigError(f"[{section}] must be a table")
        for key, value in body.items():
            if key not in DEFAULTS[section]:
                line = _line_of(text, section, key)
                raise ConfigError(f"unknown key [{section}] {key}" + (f" (line {line})" if line else ""))
            doc[section][key] = _coerce(section, key, value, DEFAULTS[section][key], text)
    return doc


def load_config(path: str | Path | None) -> dict[str, Any]:
    if path is None:
        return copy.deepcopy(DEFAULTS)
    p = Path(path)
    if not p.exists():
        raise FileNotFoundError(f"config file {p} not found")
    return parse_config(p.read_text())


def make_grid(doc: dict[str, Any]) -> RadialGrid:
    g = doc["grid"]
    return RadialGrid.geometric(g["r_min"], g["r_max"], h=g["h"])


def bubble_config(doc: dict[str, Any]) -> BubbleConfig:
    ini = doc["initial"]
    return BubbleConfig(doc["physics"]["k"], ini["m"], tuple(ini["iota"]), tuple(ini["lam"]))


def perturbation(grid: RadialGrid, doc: dict[str, Any], seed: int) -> np.ndarray:
    """Sum of three Gaussian bumps in log r with seeded amplitudes and centres."""
    ini = doc["initial"]
    amp = ini["perturbation_amplitude"]
    if amp == 0.0:
        return np.zeros(grid.n)
    rng = np.random.default_rng(seed)
    centre = math.log(ini["perturbation_center"])
    width = ini["perturbation_width"]
    out = np.zeros(grid.n)
    for a, c in zip(rng.normal(size=3), centre + width * rng.normal(size=3)):
        out += a * np.exp(-0.5 * ((grid.s - c) / width) ** 2)
    return amp * out / max(np.max(np.abs(out)), 1e-300)


def initial_field(doc: dict[str, Any], seed: int) -> FieldState:
    snap = doc["initial"]["snapshot"]
    if snap:
        return load_snapshot(snap)[0]
    grid = make_grid(doc)
    field = FieldState.from_config(grid, bubble_config(doc))
    return field.replace(u=field.u + perturbation(grid, doc, seed))


def solver_config(doc: dict[str, Any], grid: RadialGrid) -> SolverConfig:
    s = doc["solver"]
    return SolverConfig(grid, s["T"], s["scheme"], s["dt"] or None, s["c_cfl"],
                        s["snapshot_every"] or None)


# ---------------------------------------------------------------------------
# output helpers

def write_csv(path: Path, header: list[str], rows: list[list[Any]]) -> Path:
    with path.open("w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(header)
        for row in rows:
            w.writerow([repr(float(x)) if isinstance(x, (float, np.floating)) else x for x in row])
    return path


def write_json(path: Path, doc: dict[str, Any]) -> Path:
    path.write_text(json.dumps(doc, indent=2, sort_keys=True, default=_json_default))
    return path


def _json_default(x: Any) -> Any:
    if isinstance(x, np.ndarray):
        return x.tolist()
    if isinstance(x, (np.floating, np.integer)):
        return x.item()
    return str(x)


class Run:
    def __init__(self, doc: dict[str, Any], out: Path, seed: int):
        self.doc = doc
        self.out = out
        self.seed = seed
        self.hash = config_hash({"config": doc, "seed": seed})
        out.mkdir(parents=True, exist_ok=True)

    def manifest(self, command: str, **extra: Any) -> dict[str, Any]:
        doc = {"command": command, "config_hash": self.hash, "version": __version__,
               "seed": self.seed, "config": self.doc}
        doc.update(extra)
        return doc


# ---------------------------------------------------------------------------
# verify-constants

QUADRATURE_FLOOR = 1e-12
# finite-difference floor of the virial functional on jk_grid (measured <= 1.1e-9)
SAMPLED_FLOOR = 1e-8


def jk_grid(k: int) -> RadialGrid:
    """Grid for the virial functional check; steeper profiles at larger k get finer steps."""
    return RadialGrid.geometric(1e-4, 1e4, h=min(0.02, 0.05 / k))


def constant_checks(k_range: list[int], tol: float, jk_radii: list[float],
                    norm_radii: list[float]) -> list[dict[str, Any]]:
    """Rows (k, check, value, expected, error, tolerance, status).

    A failure whose error lies below the check's attainable accuracy (double
    precision for quadratures, the grid floor for sampled fields) is a
    tolerance failure, otherwise a value failure.
    """
    rows = []

    def add(k: int, name: str, value: float | None, expected: float | None, absolute: bool = False,
            floor: float = QUADRATURE_FLOOR):
        if value is None:
            rows.append({"k": k, "check": name, "value": "", "expected": "", "error": "",
                         "tolerance": tol, "status": "skip"})
            return
        err = abs(value - expected) if absolute or expected == 0 else abs(value / expected - 1.0)
        if err <= tol:
            status = "pass"
        else:
            status = "fail-tolerance" if err <= floor else "fail-value"
        rows.append({"k": k, "check": name, "value": value, "expected": expected, "error": err,
                     "tolerance": tol, "status": status})

    for k in k_range:
        add(k, "energy_Q", energy_Q_quadrature(k).value, energy_Q(k))
        add(k, "cubic_overlap_plus", cubic_overlap_integral(k, 1).value, 8.0 * k * k)
        add(k, "cubic_overlap_minus", cubic_overlap_integral(k, -1).value, 8.0 * k * k)
        if k >= 2:
            add(k, "omega_sq", omega_sq(k, "quadrature"), omega_sq(k, "closed"))
        else:
            add(k, "omega_sq", None, None)
        for R in norm_radii:
            if k == 1:
                add(k, f"truncated_norm_R{R:g}", norm_lam_q_sq(1, R).value, truncated_norm_k1_closed(R))
            else:
                add(k, f"truncated_norm_R{R:g}", None, None)
        worst = 0.0
        for lam in jk_radii:
            field = FieldState.from_config(jk_grid(k), BubbleConfig(k, 1, (1,), (lam,)))
            worst = max(worst, abs(jia_kenig_functional(field)))
        add(k, "jia_kenig_zero", worst, 0.0, absolute=True, floor=SAMPLED_FLOOR)
    return rows


def cmd_verify_constants(run: Run, tolerance: float | None) -> int:
    a = run.doc["analysis"]
    tol = a["tolerance"] if tolerance is None else tolerance
    t0 = time.perf_counter()
    rows = constant_checks(a["k_range"], tol, a["jk_radii"], a["norm_radii"])
    elapsed = time.perf_counter() - t0
    header = ["k", "check", "value", "expected", "error", "tolerance", "status"]
    write_csv(run.out / "constants.csv", header, [[r[h] for h in header] for r in rows])
    failed = [r for r in rows if r["status"].startswith("fail")]
    write_json(run.out / "constants.json",
               run.manifest("verify-constants", rows=rows, elapsed_s=elapsed, passed=not failed))
    for r in rows:
        print(f"k={r['k']} {r['check']:<24} {r['status']}")
    return 1 if failed else 0


# ---------------------------------------------------------------------------
# other subcommands

def cmd_build_cutoff(run: Run) -> int:
    c = run.doc["cutoff"]
    prof = build_cutoff(c["c"], c["R"])
    rep = verify_cutoff(prof)
    rows = [[ch.name, "pass" if ch.ok else "fail", ch.measured, ch.bound,
             " ".join(f"{x:.6g}" for x in ch.offending)] for ch in rep.checks]
    write_csv(run.out / "cutoff_report.csv", ["property", "status", "measured", "bound", "offending_r"], rows)
    write_json(run.out / "cutoff.json", run.manifest(
        "build-cutoff", profile=json.loads(prof.to_json()), log_R_tilde=prof.log_R_tilde,
        fd_discrepancy=rep.fd_discrepancy, passed=rep.ok))
    for row in rows:
        print(f"{row[0]} {row[1]} measured={row[2]:.3e} bound={row[3]:.3e}")
    return 0 if rep.ok else 1


def _simulate(run: Run) -> Any:
    field = initial_field(run.doc, run.seed)
    return evolve(field, solver_config(run.doc, field.grid))


def cmd_simulate(run: Run) -> int:
    traj = _simulate(run)
    d = save_trajectory(traj, run.out / "trajectory", run.doc["solver"]["snapshot_format"],
                        extra=run.manifest("simulate", solver_hash=traj.manifest["config_hash"]))
    print(f"{len(traj.times)} snapshots written to {d}; energy drift {traj.energy_drift():.3e}")
    return 0


def _guess(run: Run, field: FieldState) -> tuple[list[float], tuple[int, ...] | None, int | None]:
    ini = run.doc["initial"]
    return list(ini["lam"]), tuple(ini["iota"]), ini["m"]


def cmd_fit(run: Run, input_path: str | None) -> int:
    field = load_snapshot(input_path)[0] if input_path else initial_field(run.doc, run.seed)
    lam, iota, m = _guess(run, field)
    fit = fit_static(field, lam, iota=iota, m=m)
    write_json(run.out / "fit.json", run.manifest("fit", input=input_path, fit=fit.diagnostics(),
                                                  bracket_value=fit.bracket_value()))
    write_csv(run.out / "fit_residual.csv", ["r", "g", "g_dot"],
              [[float(a), float(b), float(c)] for a, b, c in zip(fit.grid.nodes, fit.g, fit.g_dot)])
    print("lam = " + ", ".join(f"{x:.12g}" for x in fit.config.lam))
    return 0


def _trajectory(run: Run, input_path: str | None):
    return load_trajectory(input_path) if input_path else _simulate(run)


def _track(run: Run, traj) -> TrackedSeries:
    a = run.doc["analysis"]
    lam, iota, m = _guess(run, traj.snapshots[0])
    return track(traj, lam, iota=iota, m=m, eta0=a["eta0"], jump_factor=a["jump_factor"],
                 K=a["K"] or None, L=a["L"])


def cmd_track(run: Run, input_path: str | None) -> int:
    series = _track(run, _trajectory(run, input_path))
    series.manifest.update(run.manifest("track", input=input_path))
    series.to_csv(run.out / "series.csv")
    series.write_manifest(run.out / "series.json")
    print(f"tracked {len(series.fits)} snapshots; terminated={series.terminated} {series.reason}")
    return 0


def _ode(run: Run):
    ini = run.doc["initial"]
    k = run.doc["physics"]["k"]
    lam = tuple(ini["lam"])
    return integrate(OdeState(lam, (0.0,) * len(lam)), k, tuple(ini["iota"]),
                     run.doc["solver"]["T"], run.doc["analysis"]["ode_dt"])


def cmd_ode(run: Run) -> int:
    series = _ode(run)
    series.to_csv(run.out / "ode.csv")
    write_json(run.out / "ode.json", run.manifest("ode", halted=series.halted, halt_time=series.halt_time))
    print(f"ODE integrated to t = {series.times[-1]:.6g}; halted={series.halted}")
    return 0


def second_derivative_at_zero(t: np.ndarray, y: np.ndarray) -> float:
    """Least-squares fit y = a0 + a t^2/2 + c t^3 (series from rest); returns a."""
    A = np.vstack([np.ones_like(t), 0.5 * t ** 2, t ** 3]).T
    return float(np.linalg.lstsq(A, y, rcond=None)[0][1])


def cmd_compare(run: Run, input_path: str | None) -> int:
    traj = _trajectory(run, input_path)
    tracked = _track(run, traj)
    ode = _ode(run)
    comp = compare_with_pde(ode, tracked.times, tracked.lam, run.doc["analysis"]["max_ratio"])
    comp.to_csv(run.out / "compare.csv")
    ode.to_csv(run.out / "ode.csv")
    tracked.to_csv(run.out / "series.csv")
    k = run.doc["physics"]["k"]
    lam0 = tracked.lam[0]
    accel = second_derivative_at_zero(tracked.times, tracked.lam[:, 0])
    pred = None
    if len(lam0) > 1:
        io = run.doc["initial"]["iota"]
        pred = -io[0] * io[1] * omega_sq(k) * lam0[0] ** (k - 1) / lam0[1] ** k
    write_json(run.out / "compare.json", run.manifest(
        "compare", input=input_path, window_end=comp.window_end, max_rel_deviation=comp.max_deviation(),
        lambda1_accel_pde=accel, lambda1_accel_ode=pred))
    print(f"max relative deviation {comp.max_deviation():.3e} on [0, {comp.window_end:.4g}]")
    return 0


def _read_csv(path: Path) -> tuple[list[str], np.ndarray]:
    with path.open(newline="") as fh:
        rows = list(csv.reader(fh))
    return rows[0], np.array([[float(x) for x in row] for row in rows[1:]])


def cmd_plot(run: Run, input_path: str | None) -> int:
    import matplotlib
    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    if input_path is None:
        raise FileNotFoundError("plot needs --input (series.csv or a trajectory directory)")
    src = Path(input_path)
    meta = {"Description": f"config_hash={run.hash}"}
    written = []
    if src.is_dir():
        from .fields import exterior_energy_function
        traj = load_trajectory(src)
        fig, ax = plt.subplots(figsize=(6, 4))
        idx = sorted(set(np.linspace(0, len(traj.times) - 1, 5).astype(int)))
        for i in idx:
            ext = exterior_energy_function(traj.snapshots[i])
            r = traj.grid.nodes
            ax.semilogx(r, [ext(x) for x in r], label=f"t = {traj.times[i]:.3g}")
        ax.set_xlabel("r")
        ax.set_ylabel("E(u; r, inf)")
        ax.legend()
        path = run.out / "energy_shells.svg"
        fig.savefig(path, format="svg", metadata=meta)
        plt.close(fig)
        written.append(path)
    else:
        header, data = _read_csv(src)
        t = data[:, 0]
        groups = {"lambda": [h for h in header if h.startswith("lambda_")],
                  "d": ["d"], "mu": ["mu"], "U": ["U"]}
        for name, cols in groups.items():
            cols = [c for c in cols if c in header]
            if not cols:
                continue
            fig, ax = plt.subplots(figsize=(6, 4))
            for c in cols:
                ax.plot(t, data[:, header.index(c)], label=c)
            ax.set_xlabel("t")
            ax.set_ylabel(name)
            if len(cols) > 1:
                ax.legend()
            path = run.out / f"{name}.svg"
            fig.savefig(path, format="svg", metadata=meta)
            plt.close(fig)
            written.append(path)
    write_json(run.out / "plot.json", run.manifest("plot", input=input_path,
                                                   files=[p.name for p in written]))
    for p in written:
        print(p)
    return 0


# ---------------------------------------------------------------------------

COMMANDS = ("verify-constants", "build-cutoff", "simulate", "fit", "track", "ode", "compare", "plot")


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="wavemaps", description=__doc__.splitlines()[0])
    p.add_argument("--version", action="version", version=__version__)
    sub = p.add_subparsers(dest="command", required=True)
    for name in COMMANDS:
        s = sub.add_parser(name)
        s.add_argument("--config", help="TOML run configuration")
        s.add_argument("--out", help="output directory (overrides [output] dir)")
        s.add_argument("--tolerance", type=float, help="override the check tolerance")
        s.add_argument("--seed", type=int, default=0, help="seed for perturbation generators")
        s.add_argument("--input", help="snapshot file, trajectory directory or series CSV")
    return p


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    try:
        doc = load_config(args.config)
        run = Run(doc, Path(args.out or doc["output"]["dir"]), args.seed)
        handlers: dict[str, Callable[[], int]] = {
            "verify-constants": lambda: cmd_verify_constants(run, args.tolerance),
            "build-cutoff": lambda: cmd_build_cutoff(run),
            "simulate": lambda: cmd_simulate(run),
            "fit": lambda: cmd_fit(run, args.input),
            "track": lambda: cmd_track(run, args.input),
            "ode": lambda: cmd_ode(run),
            "compare": lambda: cmd_compare(run, args.input),
            "plot": lambda: cmd_plot(run, args.input),
        }
        return handlers[args.command]()
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 2
    except (FileNotFoundError, OSError) as exc:
        print(f"I/O error: {exc}", file=sys.stderr)
        return 3
    except (DomainError, FitError, SolverError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 4


if __name__ == "__main__":
    sys.exit(main())
