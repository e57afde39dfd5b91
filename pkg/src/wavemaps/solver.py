"""Explicit time stepping for the equivariant wave-map equation.

The semi-discrete system on a geometric grid is

    r_i^2 u_i'' = (u_{i+1} - 2 u_i + u_{i-1}) / h^2 - k^2 sin(2 u_i) / 2,

the Hamiltonian flow of a discrete energy that converges to the continuous
one.  Ghost values beyond the grid ends follow the regular power laws:
u_{-1} - l pi = e^{-kh} (u_0 - l pi) at the origin and
u_n - m pi = e^{-kh} (u_{n-1} - m pi) at infinity.  The ghost rule is exact
for the static tails of every bubble and keeps the sector fixed.
"""

from __future__ import annotations

import hashlib
import json
import math
from dataclasses import dataclass, field as dc_field
from pathlib import Path
from typing import Any

import numpy as np

from .fields import FieldState, RadialGrid, energy, load_snapshot, save_snapshot

try:
    from numba import njit
except ImportError:  # pragma: no cover - numba is an optional accelerator
    njit = None

SCHEMES = ("leapfrog", "rk4")


class SolverError(RuntimeError):
    """Raised when a run is aborted by the instability detector."""


@dataclass(frozen=True)
class SolverConfig:
    grid: RadialGrid
    T: float
    scheme: str = "leapfrog"
    dt: float | None = None
    c_cfl: float = 0.5
    snapshot_every: float | None = None
    growth_limit: float = 0.1

    def __post_init__(self) -> None:
        if self.scheme not in SCHEMES:
            raise ValueError(f"unknown scheme {self.scheme!r}; choose from {SCHEMES}")
        if not self.T > 0:
            raise ValueError("end time must be positive")
        if not 0 < self.c_cfl <= 1:
            raise ValueError("c_cfl must lie in (0, 1]")
        if self.dt is not None and not self.dt > 0:
            raise ValueError("dt must be positive")

    def cfl_limit(self, k: int) -> float:
        g = self.grid
        return min(g.nodes[1] - g.nodes[0], g.r_min / k)

    def schedule(self, k: int) -> tuple[float, int, int]:
        """Return (dt, steps per snapshot, number of snapshots after t = 0)."""
        cadence = self.snapshot_every or self.T
        n_snap = int(round(self.T / cadence))
        if n_snap < 1 or abs(n_snap * cadence - self.T) > 1e-9 * self.T:
            raise ValueError("end time must be a whole number of snapshot intervals")
        limit = self.cfl_limit(k)
        if self.dt is None:
            per = int(math.ceil(cadence / (self.c_cfl * limit) - 1e-9))
        else:
            if self.dt > limit:
                raise ValueError(f"dt = {self.dt:.3e} exceeds the stability cap {limit:.3e}")
            per = int(round(cadence / self.dt))
            if per < 1 or abs(per * self.dt - cadence) > 1e-9 * cadence:
                raise ValueError("snapshot interval must be a whole number of steps")
        return cadence / per, per, n_snap

    def describe(self) -> dict[str, Any]:
        return {"grid": self.grid.describe(), "T": self.T, "scheme": self.scheme, "dt": self.dt,
                "c_cfl": self.c_cfl, "snapshot_every": self.snapshot_every,
                "growth_limit": self.growth_limit}


def config_hash(doc: dict[str, Any]) -> str:
    text = json.dumps(doc, sort_keys=True, default=str)
    return hashlib.sha256(text.encode()).hexdigest()[:16]


@dataclass
class Trajectory:
    times: np.ndarray
    snapshots: list[FieldState]
    energies: np.ndarray
    manifest: dict[str, Any] = dc_field(default_factory=dict)

    @property
    def grid(self) -> RadialGrid:
        return self.snapshots[0].grid

    @property
    def k(self) -> int:
        return self.snapshots[0].k

    def energy_drift(self) -> float:
        e0 = self.energies[0]
        dev = np.max(np.abs(self.energies - e0))
        return float(dev / e0) if e0 > 0 else float(dev)


class _System:
    """Right-hand side and discrete energy for the nonlinear or linear problem."""

    def __init__(self, grid: RadialGrid, k: int, sector: tuple[int, int], linear: bool):
        self.grid = grid
        self.k = k
        self.linear = linear
        self.base0 = sector[0] * math.pi
        self.base1 = sector[1] * math.pi
        self.eps = math.exp(-k * grid.h)
        self.inv_h2 = 1.0 / grid.h ** 2
        self.inv_r2 = 1.0 / grid.nodes ** 2
        self.r2 = grid.nodes ** 2
        self.half_k2 = 0.5 * k * k

    def accel(self, u: np.ndarray, out: np.ndarray) -> np.ndarray:
        out[1:-1] = u[2:]
        out[1:-1] += u[:-2]
        out[0] = u[1] + self.base0 + self.eps * (u[0] - self.base0)
        out[-1] = u[-2] + self.base1 + self.eps * (u[-1] - self.base1)
        out -= 2.0 * u
        out *= self.inv_h2
        if self.linear:
            out -= (2.0 * self.half_k2) * u
        else:
            red = u - math.pi * np.rint(u / math.pi)
            out -= self.half_k2 * np.sin(2.0 * red)
        out *= self.inv_r2
        return out

    def energy(self, u: np.ndarray, v: np.ndarray) -> float:
        h = self.grid.h
        if self.linear:
            pot = self.k * self.k * u * u
        else:
            red = u - math.pi * np.rint(u / math.pi)
            pot = self.k * self.k * np.sin(red) ** 2
        w0 = u[0] - self.base0
        w1 = u[-1] - self.base1
        du = np.diff(u)
        total = h * float(np.sum(self.r2 * v * v + pot)) + float(du @ du) / h
        total += (1.0 - self.eps) * (w0 * w0 + w1 * w1) / h
        return math.pi * total


def _accel_kernel(u, out, inv_h2, inv_r2, base0, base1, eps, half_k2, linear):
    n = u.shape[0]
    pi = math.pi
    for i in range(n):
        left = u[i - 1] if i > 0 else base0 + eps * (u[0] - base0)
        right = u[i + 1] if i < n - 1 else base1 + eps * (u[n - 1] - base1)
        lap = (left - 2.0 * u[i] + right) * inv_h2
        if linear:
            pot = 2.0 * half_k2 * u[i]
        else:
            red = u[i] - pi * np.rint(u[i] / pi)
            pot = half_k2 * math.sin(2.0 * red)
        out[i] = (lap - pot) * inv_r2[i]


def _leapfrog_kernel(u, v, a, steps, dt, inv_h2, inv_r2, base0, base1, eps, half_k2, linear):
    half = 0.5 * dt
    for _ in range(steps):
        for i in range(u.shape[0]):
            v[i] += half * a[i]
            u[i] += dt * v[i]
        _accel_kernel(u, a, inv_h2, inv_r2, base0, base1, eps, half_k2, linear)
        for i in range(u.shape[0]):
            v[i] += half * a[i]


def _rk4_kernel(u, v, steps, dt, inv_h2, inv_r2, base0, base1, eps, half_k2, linear):
    n = u.shape[0]
    k1 = np.empty(n)
    k2 = np.empty(n)
    k3 = np.empty(n)
    k4 = np.empty(n)
    tmp = np.empty(n)
    for _ in range(steps):
        _accel_kernel(u, k1, inv_h2, inv_r2, base0, base1, eps, half_k2, linear)
        for i in range(n):
            tmp[i] = u[i] + 0.5 * dt * v[i]
        _accel_kernel(tmp, k2, inv_h2, inv_r2, base0, base1, eps, half_k2, linear)
        for i in range(n):
            tmp[i] = u[i] + 0.5 * dt * v[i] + 0.25 * dt * dt * k1[i]
        _accel_kernel(tmp, k3, inv_h2, inv_r2, base0, base1, eps, half_k2, linear)
        for i in range(n):
            tmp[i] = u[i] + dt * v[i] + 0.5 * dt * dt * k2[i]
        _accel_kernel(tmp, k4, inv_h2, inv_r2, base0, base1, eps, half_k2, linear)
        for i in range(n):
            u[i] += dt * v[i] + dt * dt / 6.0 * (k1[i] + k2[i] + k3[i])
            v[i] += dt / 6.0 * (k1[i] + 2.0 * k2[i] + 2.0 * k3[i] + k4[i])


if njit is not None:
    _accel_kernel = njit(cache=True, fastmath=False)(_accel_kernel)
    _leapfrog_kernel = njit(cache=True, fastmath=False)(_leapfrog_kernel)
    _rk4_kernel = njit(cache=True, fastmath=False)(_rk4_kernel)


def _run(state: FieldState, config: SolverConfig, linear: bool) -> Trajectory:
    if not state.grid.compatible(config.grid):
        raise ValueError("state and solver config use different grids")
    sys = _System(config.grid, state.k, state.sector, linear)
    dt, per, n_snap = config.schedule(state.k)
    u = np.array(state.u, dtype=float)
    v = np.array(state.u_dot, dtype=float)
    a = np.empty_like(u)
    times = [0.0]
    snaps = [state]
    e0 = sys.energy(u, v)
    energies = [e0]
    scale = max(e0, 1e-300)

    args = (sys.inv_h2, sys.inv_r2, sys.base0, sys.base1, sys.eps, sys.half_k2, linear)
    if config.scheme == "leapfrog":
        sys.accel(u, a)
    for n in range(1, n_snap + 1):
        if njit is None:
            _python_block(sys, config.scheme, u, v, a, per, dt)
        elif config.scheme == "leapfrog":
            _leapfrog_kernel(u, v, a, per, dt, *args)
        else:
            _rk4_kernel(u, v, per, dt, *args)
        e = _record(sys, u, v, state, n * per * dt, times, snaps, energies)
        _guard(e, e0, scale, config, times[-1])

    manifest = {"solver": config.describe(), "dt": dt, "steps": per * n_snap,
                "linear": linear, "k": state.k, "sector": list(state.sector)}
    manifest["config_hash"] = config_hash(manifest)
    return Trajectory(np.array(times), snaps, np.array(energies), manifest)


def _python_block(sys: _System, scheme: str, u, v, a, per: int, dt: float) -> None:
    if scheme == "leapfrog":
        half = 0.5 * dt
        for _ in range(per):
            v += half * a
            u += dt * v
            sys.accel(u, a)
            v += half * a
        return
    k1, k2, k3, k4 = (np.empty_like(u) for _ in range(4))
    for _ in range(per):
        sys.accel(u, k1)
        sys.accel(u + 0.5 * dt * v, k2)
        sys.accel(u + 0.5 * dt * v + 0.25 * dt * dt * k1, k3)
        sys.accel(u + dt * v + 0.5 * dt * dt * k2, k4)
        u += dt * v + dt * dt / 6.0 * (k1 + k2 + k3)
        v += dt / 6.0 * (k1 + 2 * k2 + 2 * k3 + k4)


def _record(sys: _System, u, v, state: FieldState, t: float, times, snaps, energies) -> float:
    e = sys.energy(u, v)
    times.append(t)
    snaps.append(FieldState(state.grid, u.copy(), v.copy(), state.k, state.sector))
    energies.append(e)
    return e


def _guard(e: float, e0: float, scale: float, config: SolverConfig, t: float) -> None:
    if not math.isfinite(e) or (e - e0) > config.growth_limit * scale and (e - e0) > 1e-12:
        raise SolverError(f"energy grew from {e0:.6e} to {e:.6e} by t = {t:.6g}; "
                          f"reduce c_cfl or refine the grid")


def discrete_energy(state: FieldState, linear: bool = False) -> float:
    """The energy conserved by the semi-discrete scheme."""
    return _System(state.grid, state.k, state.sector, linear).energy(state.u, state.u_dot)


def rhs_nonlinear(state: FieldState) -> np.ndarray:
    """Acceleration Laplacian u - (k^2/r^2) sin(2u)/2 with the solver's boundary rule."""
    sys = _System(state.grid, state.k, state.sector, False)
    return sys.accel(np.array(state.u, dtype=float), np.empty(state.grid.n))


def rhs_linear(state: FieldState) -> np.ndarray:
    sys = _System(state.grid, state.k, (0, 0), True)
    return sys.accel(np.array(state.u, dtype=float), np.empty(state.grid.n))


def evolve(state: FieldState, config: SolverConfig) -> Trajectory:
    """Evolve the nonlinear equation, recording snapshots at the configured cadence."""
    return _run(state, config, linear=False)


def evolve_linear(pair: FieldState, config: SolverConfig) -> Trajectory:
    """Evolve the linearization about zero, v_tt = Laplacian v - k^2 v / r^2."""
    if pair.sector != (0, 0):
        raise ValueError("the linear flow acts on pairs in the vacuum sector (0, 0)")
    return _run(pair, config, linear=True)


@dataclass(frozen=True)
class FiniteSpeedReport:
    times: np.ndarray
    margins: np.ndarray
    min_margin: float
    tolerance: float
    measured_constant: float
    ok: bool


def check_finite_speed(traj: Trajectory, R: float, C: float = 10.0) -> FiniteSpeedReport:
    """Margins E(u(0); 0, R) - E(u(t); 0, R - t) at every snapshot.

    A margin below -C h^2 E(0) is flagged; the measured constant is
    -min(margin) / (h^2 E(0)).
    """
    T = float(traj.times[-1])
    if not R > T:
        raise ValueError("need R > T")
    e_ref = energy(traj.snapshots[0], 0.0, R)
    margins = np.array([e_ref - energy(s, 0.0, R - t) for t, s in zip(traj.times, traj.snapshots)])
    h2e = traj.grid.h ** 2 * max(energy(traj.snapshots[0]), 1e-300)
    min_margin = float(margins.min())
    measured = max(0.0, -min_margin) / h2e
    tol = C * h2e
    return FiniteSpeedReport(traj.times.copy(), margins, min_margin, tol, measured, min_margin >= -tol)


def save_trajectory(traj: Trajectory, directory: str | Path, fmt: str = "csv",
                    extra: dict[str, Any] | None = None) -> Path:
    """Write manifest.json plus one snapshot file per recorded time."""
    if fmt not in ("csv", "json"):
        raise ValueError("snapshot format must be csv or json")
    out = Path(directory)
    out.mkdir(parents=True, exist_ok=True)
    names = []
    for n, (t, snap) in enumerate(zip(traj.times, traj.snapshots)):
        name = f"snap_{n:05d}.{fmt}"
        save_snapshot(snap, out / name, float(t))
        names.append(name)
    doc = dict(traj.manifest)
    if extra:
        doc.update(extra)
    doc.update({"times": [float(t) for t in traj.times], "energies": [float(e) for e in traj.energies],
                "snapshots": names})
    (out / "manifest.json").write_text(json.dumps(doc, indent=2, sort_keys=True, default=str))
    return out


def load_trajectory(directory: str | Path) -> Trajectory:
    src = Path(directory)
    path = src / "manifest.json"
    if not path.exists():
        raise FileNotFoundError(f"no manifest.json in {src}")
    doc = json.loads(path.read_text())
    snaps = [load_snapshot(src / name)[0] for name in doc["snapshots"]]
    manifest = {key: v for key, v in doc.items() if key not in ("times", "energies", "snapshots")}
    return Trajectory(np.array(doc["times"]), snaps, np.array(doc["energies"]), manifest)
