"""Radial grids, sampled fields, energy functionals and pairings.

Grids are geometric: nodes r_i = r_min * exp(i h).  In s = log r the radial
Laplacian is r^{-2} d^2/ds^2 and every integrand of interest is smooth, so
integrals are taken in s.  Pairings use the trapezoid rule in s; energies use
a quintic spline in s so that sub-range integrals are additive.

Beyond the grid ends a field is extended by its regular power law,
w ~ r^k at the origin and w ~ r^{-k} at infinity (w the deviation from the
sector plateau).  Functionals over (0, inf) add these tails analytically.
"""

from __future__ import annotations

import csv
import io
import json
import math
from dataclasses import dataclass, field as dc_field
from functools import cached_property
from pathlib import Path
from typing import Any

import numpy as np
from scipy.interpolate import make_interp_spline

from .profiles import (BubbleConfig, chi, multi_bubble, multi_bubble_offset, nonlinearity_fprime)

SNAPSHOT_FORMAT = "wavemaps-snapshot"
SNAPSHOT_VERSION = 1


def fd_weights(offsets: np.ndarray, order: int) -> np.ndarray:
    """Finite-difference weights for the derivative of given order at 0."""
    offsets = np.asarray(offsets, dtype=float)
    n = offsets.size
    A = np.vander(offsets, n, increasing=True).T
    b = np.zeros(n)
    b[order] = math.factorial(order)
    return np.linalg.solve(A, b)


class RadialGrid:
    """Log-uniform radial nodes with trapezoid weights for the measure r dr."""

    def __init__(self, nodes: np.ndarray):
        nodes = np.asarray(nodes, dtype=float)
        if nodes.ndim != 1 or nodes.size < 9:
            raise ValueError("a radial grid needs at least 9 nodes")
        if nodes[0] <= 0 or np.any(np.diff(nodes) <= 0):
            raise ValueError("grid nodes must be positive and strictly increasing")
        s = np.log(nodes)
        ds = np.diff(s)
        h = float((s[-1] - s[0]) / (nodes.size - 1))
        if np.max(np.abs(ds - h)) > 1e-9 * max(1.0, h):
            raise ValueError("grid nodes must be log-uniform")
        nodes.setflags(write=False)
        self.nodes = nodes
        self.s = s
        self.h = h

    @classmethod
    def geometric(cls, r_min: float, r_max: float, h: float | None = None,
                  n: int | None = None) -> "RadialGrid":
        if not (0 < r_min < r_max):
            raise ValueError("need 0 < r_min < r_max")
        span = math.log(r_max / r_min)
        if n is None:
            if h is None:
                raise ValueError("give either the log spacing h or the node count n")
            n = int(math.ceil(span / h)) + 1
        return cls(r_min * np.exp(np.linspace(0.0, span, n)))

    @property
    def n(self) -> int:
        return self.nodes.size

    @property
    def r_min(self) -> float:
        return float(self.nodes[0])

    @property
    def r_max(self) -> float:
        return float(self.nodes[-1])

    @cached_property
    def ds_weights(self) -> np.ndarray:
        w = np.full(self.n, self.h)
        w[0] = w[-1] = 0.5 * self.h
        return w

    @cached_property
    def weights(self) -> np.ndarray:
        """Quadrature weights for the measure r dr."""
        return self.ds_weights * self.nodes ** 2

    @cached_property
    def _d1_stencils(self) -> tuple[np.ndarray, list[np.ndarray]]:
        central = fd_weights(np.arange(-4, 5), 1) / self.h
        edges = [fd_weights(np.arange(-i, 9 - i), 1) / self.h for i in range(4)]
        return central, edges

    def d_ds(self, f: np.ndarray) -> np.ndarray:
        """Eighth-order derivative d f / d s (r d f/dr)."""
        f = np.asarray(f, dtype=float)
        central, edges = self._d1_stencils
        n = self.n
        out = np.empty(n)
        out[4:n - 4] = sum(c * f[4 + j:n - 4 + j] for j, c in zip(range(-4, 5), central))
        for i, w in enumerate(edges):
            out[i] = w @ f[:9]
            out[n - 1 - i] = -(w @ f[::-1][:9])
        return out

    def d2_ds2(self, f: np.ndarray) -> np.ndarray:
        """Second-order second derivative in s, one-sided at the ends."""
        f = np.asarray(f, dtype=float)
        out = np.empty(self.n)
        out[1:-1] = f[2:] - 2 * f[1:-1] + f[:-2]
        out[0] = 2 * f[0] - 5 * f[1] + 4 * f[2] - f[3]
        out[-1] = 2 * f[-1] - 5 * f[-2] + 4 * f[-3] - f[-4]
        return out / (self.h * self.h)

    def laplacian(self, f: np.ndarray) -> np.ndarray:
        return self.d2_ds2(f) / self.nodes ** 2

    def compatible(self, other: "RadialGrid") -> bool:
        return self is other or (self.n == other.n and np.array_equal(self.nodes, other.nodes))

    def describe(self) -> dict[str, Any]:
        return {"kind": "geometric", "r_min": self.r_min, "r_max": self.r_max, "n": self.n,
                "h": self.h}

    def scaled(self, lam: float) -> "RadialGrid":
        return RadialGrid(self.nodes * lam)


@dataclass(frozen=True, eq=False)
class FieldState:
    """A sampled pair (u, u_dot) in the sector (ell, m)."""

    grid: RadialGrid
    u: np.ndarray
    u_dot: np.ndarray
    k: int
    sector: tuple[int, int] = (0, 0)
    meta: dict[str, Any] = dc_field(default_factory=dict)

    def __post_init__(self) -> None:
        u = np.array(self.u, dtype=float)
        u_dot = np.array(self.u_dot, dtype=float)
        if u.shape != (self.grid.n,) or u_dot.shape != (self.grid.n,):
            raise ValueError("field samples must match the grid")
        if not (np.all(np.isfinite(u)) and np.all(np.isfinite(u_dot))):
            raise ValueError("field samples must be finite")
        u.setflags(write=False)
        u_dot.setflags(write=False)
        object.__setattr__(self, "u", u)
        object.__setattr__(self, "u_dot", u_dot)
        object.__setattr__(self, "sector", (int(self.sector[0]), int(self.sector[1])))

    @classmethod
    def from_config(cls, grid: RadialGrid, config: BubbleConfig,
                    u_dot: np.ndarray | None = None) -> "FieldState":
        u = multi_bubble(config, grid.nodes)
        return cls(grid, u, np.zeros(grid.n) if u_dot is None else u_dot, config.k,
                   (config.ell, config.m))

    @classmethod
    def vacuum(cls, grid: RadialGrid, k: int, m: int = 0) -> "FieldState":
        return cls(grid, np.full(grid.n, m * math.pi), np.zeros(grid.n), k, (m, m))

    @property
    def ell(self) -> int:
        return self.sector[0]

    @property
    def m(self) -> int:
        return self.sector[1]

    def boundary_deviation(self) -> tuple[float, float]:
        return (abs(self.u[0] - self.ell * math.pi), abs(self.u[-1] - self.m * math.pi))

    def check_sector(self, tol: float = 0.2) -> bool:
        inner, outer = self.boundary_deviation()
        return inner <= tol and outer <= tol

    def replace(self, u: np.ndarray | None = None, u_dot: np.ndarray | None = None) -> "FieldState":
        return FieldState(self.grid, self.u if u is None else u,
                          self.u_dot if u_dot is None else u_dot, self.k, self.sector, dict(self.meta))


def _check_range(r1: float, r2: float) -> None:
    if not (0 <= r1 < r2):
        raise ValueError(f"need 0 <= r1 < r2, got ({r1}, {r2})")


class RangeIntegrator:
    """Additive integrals of a density (per unit s) over arbitrary radial ranges.

    Inside the grid the density is a quintic spline in s.  Outside, the
    contributions are A0 (r/r_min)^{2k} near the origin and A1 (r_max/r)^{2k}
    at infinity, with A0, A1 the power-law tail densities at the grid ends.
    """

    def __init__(self, grid: RadialGrid, density: np.ndarray, k: int,
                 inner_amplitude: float = 0.0, outer_amplitude: float = 0.0):
        self.grid = grid
        self.k = k
        self.A0 = inner_amplitude
        self.A1 = outer_amplitude
        self._anti = make_interp_spline(grid.s, density, k=5).antiderivative()
        self._F0 = float(self._anti(grid.s[0]))

    def cumulative(self, r: float) -> float:
        """Integral of the density over (0, r)."""
        g = self.grid
        two_k = 2 * self.k
        inner_total = self.A0 / two_k
        if r <= g.r_min:
            return inner_total * (r / g.r_min) ** two_k if r > 0 else 0.0
        if r <= g.r_max:
            return inner_total + float(self._anti(math.log(r))) - self._F0
        core = float(self._anti(g.s[-1])) - self._F0
        if math.isinf(r):
            return inner_total + core + self.A1 / two_k
        return inner_total + core + self.A1 / two_k * (1.0 - (g.r_max / r) ** two_k)

    def integral(self, r1: float, r2: float) -> float:
        _check_range(r1, r2)
        return self.cumulative(r2) - self.cumulative(r1)


def _energy_integrator(field: FieldState, tails: bool = True) -> RangeIntegrator:
    g = field.grid
    k = field.k
    us = g.d_ds(field.u)
    dens = math.pi * ((g.nodes * field.u_dot) ** 2 + us ** 2
                      + k * k * np.sin(field.u - field.m * math.pi) ** 2)
    a0 = a1 = 0.0
    if tails:
        w0 = field.u[0] - field.ell * math.pi
        w1 = field.u[-1] - field.m * math.pi
        a0 = 2 * math.pi * k * k * w0 * w0
        a1 = 2 * math.pi * k * k * w1 * w1
    return RangeIntegrator(g, dens, k, a0, a1)


def energy(field: FieldState, r1: float = 0.0, r2: float = math.inf, *, tails: bool = True) -> float:
    """2 pi int_{r1}^{r2} 1/2 (u_t^2 + u_r^2 + k^2 sin^2 u / r^2) r dr."""
    _check_range(r1, r2)
    return _energy_integrator(field, tails).integral(r1, r2)


def exterior_energy_function(field: FieldState, *, tails: bool = True):
    """Return r -> E(u; r, inf) sharing one spline for repeated evaluation."""
    integ = _energy_integrator(field, tails)
    total = integ.cumulative(math.inf)
    return lambda r: total - integ.cumulative(r)


def norm_e_sq(pair: FieldState, r1: float = 0.0, r2: float = math.inf, *, tails: bool = True) -> float:
    """int (g_t^2 + g_r^2 + k^2 g^2 / r^2) r dr, without prefactors."""
    _check_range(r1, r2)
    g = pair.grid
    k = pair.k
    gs = g.d_ds(pair.u)
    dens = (g.nodes * pair.u_dot) ** 2 + gs ** 2 + k * k * pair.u ** 2
    a0 = a1 = 0.0
    if tails:
        a0 = 2 * k * k * pair.u[0] ** 2
        a1 = 2 * k * k * pair.u[-1] ** 2
    return RangeIntegrator(g, dens, k, a0, a1).integral(r1, r2)


def norm_h_sq(grid: RadialGrid, g: np.ndarray, k: int) -> float:
    """Static part of the energy norm, int (g_r^2 + k^2 g^2/r^2) r dr, trapezoid in s."""
    gs = grid.d_ds(g)
    return float(grid.ds_weights @ (gs ** 2 + k * k * np.asarray(g) ** 2))


def norm_l2_sq(grid: RadialGrid, f: np.ndarray) -> float:
    return float(grid.weights @ np.asarray(f) ** 2)


def pairing(f: np.ndarray, g: np.ndarray, grid: RadialGrid) -> float:
    """<f|g> = int f g r dr by the trapezoid rule in s."""
    f = np.asarray(f, dtype=float)
    g = np.asarray(g, dtype=float)
    if f.shape != (grid.n,) or g.shape != (grid.n,):
        raise ValueError("pairing needs samples on the given grid")
    return float(grid.weights @ (f * g))


def rescale_h(field: FieldState, lam: float) -> FieldState:
    """(u(r/lam), lam^{-1} u_t(r/lam)) on the grid scaled by lam."""
    if not lam > 0:
        raise ValueError("scale must be positive")
    return FieldState(field.grid.scaled(lam), field.u, field.u_dot / lam, field.k, field.sector,
                      dict(field.meta))


def rescale_l2(grid: RadialGrid, f: np.ndarray, lam: float) -> tuple[RadialGrid, np.ndarray]:
    """lam^{-1} f(r/lam) on the grid scaled by lam."""
    if not lam > 0:
        raise ValueError("scale must be positive")
    return grid.scaled(lam), np.asarray(f, dtype=float) / lam


@dataclass(frozen=True)
class LinearizedOperator:
    """L g = -Laplacian g + (k^2/r^2) f'(background) g.

    ``background`` is a BubbleConfig, a single scale (bubble Q_lam) or None
    (vacuum, potential k^2/r^2).
    """

    k: int
    background: BubbleConfig | float | None = None

    def potential(self, r: np.ndarray) -> np.ndarray:
        r = np.asarray(r, dtype=float)
        if self.background is None:
            fp = np.ones_like(r)
        elif isinstance(self.background, BubbleConfig):
            fp = nonlinearity_fprime(multi_bubble_offset(self.background, r))
        else:
            cfg = BubbleConfig(self.k, 1, (1,), (float(self.background),))
            fp = nonlinearity_fprime(multi_bubble_offset(cfg, r))
        return self.k * self.k * fp / r ** 2


def apply_linearized(op: LinearizedOperator, grid: RadialGrid, g: np.ndarray) -> np.ndarray:
    """Second-order application of the linearized operator on the grid."""
    g = np.asarray(g, dtype=float)
    if g.shape != (grid.n,):
        raise ValueError("samples must match the grid")
    return -grid.laplacian(g) + op.potential(grid.nodes) * g


def quadratic_form(op: LinearizedOperator, grid: RadialGrid, g: np.ndarray) -> float:
    """<L g | g> in integrated-by-parts form int (g_r^2 + V g^2) r dr."""
    g = np.asarray(g, dtype=float)
    gs = grid.d_ds(g)
    return float(grid.ds_weights @ (gs ** 2 + grid.nodes ** 2 * op.potential(grid.nodes) * g ** 2))


def plateau_detect(field: FieldState, r1: float, r2: float, *, min_ratio: float = 2.0) -> tuple[int, float]:
    """Integer l minimizing sup |u - l pi| over grid samples in [r1, r2]."""
    if not (0 < r1 < r2):
        raise ValueError("need 0 < r1 < r2")
    if r2 / r1 < min_ratio:
        raise ValueError(f"annulus ratio {r2 / r1:.3g} below the minimum {min_ratio}")
    mask = (field.grid.nodes >= r1) & (field.grid.nodes <= r2)
    if not np.any(mask):
        raise ValueError("annulus contains no grid nodes")
    u = field.u[mask]
    centre = 0.5 * (u.min() + u.max()) / math.pi
    best = None
    for cand in (math.floor(centre), math.ceil(centre)):
        dev = float(np.max(np.abs(u - cand * math.pi)))
        if best is None or dev < best[1]:
            best = (int(cand), dev)
    return best


def jia_kenig_functional(field: FieldState, cutoff_radius: float | None = None,
                         *, tails: bool = True) -> float:
    """int (k^2 sin^2(2u)/(2 r^2) + 2 u_r^2 cos 2u) chi(r/R) r dr."""
    g = field.grid
    k = field.k
    us = g.d_ds(field.u)
    dens = 0.5 * k * k * np.sin(2 * field.u) ** 2 + 2 * us ** 2 * np.cos(2 * field.u)
    total = 0.0
    if cutoff_radius is not None:
        if not cutoff_radius > 0:
            raise ValueError("cutoff radius must be positive")
        dens = dens * chi(g.nodes / cutoff_radius)
    elif tails:
        total += 2 * k * (field.u[-1] - field.m * math.pi) ** 2
    if tails:
        total += 2 * k * (field.u[0] - field.ell * math.pi) ** 2
    return total + float(g.ds_weights @ dens)


# ---------------------------------------------------------------------------
# snapshot files

def _header(field: FieldState, t: float | None) -> dict[str, Any]:
    head = {"format": SNAPSHOT_FORMAT, "version": SNAPSHOT_VERSION, "k": field.k,
            "sector": list(field.sector), "grid": field.grid.describe()}
    if t is not None:
        head["t"] = t
    if field.meta:
        head["meta"] = field.meta
    return head


def save_snapshot(field: FieldState, path: str | Path, t: float | None = None) -> Path:
    """Write a snapshot as JSON (.json) or columnar CSV (.csv)."""
    path = Path(path)
    head = _header(field, t)
    if path.suffix == ".csv":
        buf = io.StringIO()
        for key, value in head.items():
            buf.write(f"# {key}: {json.dumps(value)}\n")
        w = csv.writer(buf, lineterminator="\r\n")
        w.writerow(["r", "u", "u_dot"])
        for row in zip(field.grid.nodes, field.u, field.u_dot):
            w.writerow([repr(float(x)) for x in row])
        path.write_text(buf.getvalue())
    else:
        doc = dict(head, r=field.grid.nodes.tolist(), u=field.u.tolist(), u_dot=field.u_dot.tolist())
        path.write_text(json.dumps(doc))
    return path


def _from_header(head: dict[str, Any], r, u, u_dot) -> tuple[FieldState, dict[str, Any]]:
    if head.get("format") != SNAPSHOT_FORMAT:
        raise ValueError("not a wavemaps snapshot")
    if int(head.get("version", -1)) != SNAPSHOT_VERSION:
        raise ValueError(f"unsupported snapshot version {head.get('version')!r}")
    grid = RadialGrid(np.asarray(r, dtype=float))
    fs = FieldState(grid, np.asarray(u, dtype=float), np.asarray(u_dot, dtype=float), int(head["k"]),
                    tuple(head["sector"]), dict(head.get("meta", {})))
    return fs, head


def load_snapshot(path: str | Path) -> tuple[FieldState, dict[str, Any]]:
    """Read a snapshot written by save_snapshot; returns (field, header)."""
    path = Path(path)
    text = path.read_text()
    if path.suffix == ".csv":
        head: dict[str, Any] = {}
        rows = []
        for line in text.splitlines():
            if line.startswith("#"):
                key, _, value = line[1:].partition(":")
                head[key.strip()] = json.loads(value)
            elif line.strip():
                rows.append(line)
        reader = csv.reader(rows)
        next(reader)
        data = np.array([[float(x) for x in row] for row in reader])
        return _from_header(head, data[:, 0], data[:, 1], data[:, 2])
    doc = json.loads(text)
    return _from_header(doc, doc.get("r"), doc.get("u"), doc.get("u_dot"))
