"""Bubble decomposition of sampled fields and the derived modulation quantities.

A field v near an M-bubble is written v = Q(m, iota, lam) + g with the
orthogonality conditions <Z_{lam_j} | g> = 0 (L2-invariant rescaling of the
localized kernel element Z).  The fit is a Newton solve in ell_j = log lam_j.

Proximity functionals are infima over signs and scales; the values reported
here are best-found upper bounds.  The energy norm of a residual pair is
int (g_t^2 + g_r^2 + k^2 g^2 / r^2) r dr, with power-law tails beyond the grid.
"""

from __future__ import annotations

import csv
import itertools
import json
import math
from dataclasses import dataclass, field as dc_field
from functools import lru_cache
from pathlib import Path
from typing import Any, Callable, Sequence

import numpy as np
from scipy.optimize import brentq, minimize, minimize_scalar

from .fields import FieldState, RadialGrid, energy, exterior_energy_function, norm_e_sq
from .profiles import (BubbleConfig, chi, energy_Q, lam_q, lam_z, multi_bubble,
                       norm_lam_q_sq_closed, nonlinearity_f, nonlinearity_fprime, q_minus_pi,
                       z_profile)
from .virial import CutoffProfile, apply_a_underline, build_cutoff

NEWTON_TOL = 1e-10
NEWTON_MAX_ITER = 50
DEFAULT_L = 10.0


class DomainError(ValueError):
    """Inputs outside the domain of an operation (sector mismatch, bad level, ...)."""


class FitError(RuntimeError):
    """Newton iteration failed; ``last`` holds the final iterate (scales)."""

    def __init__(self, message: str, last: Sequence[float], residual: float):
        super().__init__(message)
        self.last = tuple(last)
        self.residual = residual


# ---------------------------------------------------------------------------
# helpers

def energy_norm_sq(grid: RadialGrid, k: int, g: np.ndarray, g_dot: np.ndarray | None = None) -> float:
    """Energy norm squared over (0, inf): trapezoid in log r plus power-law tails."""
    g = np.asarray(g, dtype=float)
    gs = grid.d_ds(g)
    dens = gs ** 2 + k * k * g ** 2
    if g_dot is not None:
        dens = dens + (grid.nodes * np.asarray(g_dot, dtype=float)) ** 2
    return float(grid.ds_weights @ dens) + k * (g[0] ** 2 + g[-1] ** 2)


def h_norm(grid: RadialGrid, k: int, g: np.ndarray) -> float:
    return math.sqrt(energy_norm_sq(grid, k, g))


def _bubbles(k: int, m: int, iota: Sequence[int], lam: Sequence[float], r: np.ndarray) -> np.ndarray:
    out = np.full(r.shape, m * math.pi)
    for i, x in zip(iota, lam):
        out = out + i * q_minus_pi(k, x, r)
    return out


def _ratio_penalty(k: int, lam: Sequence[float], inner: float | None, outer: float | None) -> float:
    seq = list(lam)
    if inner is not None:
        seq = [inner] + seq
    if outer is not None:
        seq = seq + [outer]
    return float(sum((a / b) ** k for a, b in zip(seq, seq[1:])))


def sector_of_config(config: BubbleConfig) -> int:
    """Sector index at the origin, m - sum(iota)."""
    return config.ell


def sign_patterns(M: int, m: int, ell: int | None) -> list[tuple[int, ...]]:
    """All sign vectors of length M, restricted to m - sum(iota) = ell when ell is given."""
    pats = [p for p in itertools.product((1, -1), repeat=M)]
    if ell is not None:
        pats = [p for p in pats if m - sum(p) == ell]
    return pats


def z_scaled(k: int, lam: float, r: np.ndarray) -> np.ndarray:
    """Z_lam in the L2-invariant rescaling: lam^{-1} Z(r/lam)."""
    return z_profile(k, np.asarray(r) / lam) / lam


def lam_q_scaled(k: int, lam: float, r: np.ndarray) -> np.ndarray:
    """Lambda Q in the L2-invariant rescaling: lam^{-1} Lambda Q(r/lam)."""
    return lam_q(k, lam, r) / lam


# ---------------------------------------------------------------------------
# static fit

@dataclass(frozen=True)
class ModulationFit:
    config: BubbleConfig
    grid: RadialGrid
    g: np.ndarray
    g_dot: np.ndarray
    ortho_residuals: np.ndarray
    norm_e: float
    norm_h: float
    iterations: int
    newton_residual: float

    @property
    def ratios(self) -> np.ndarray:
        return self.config.ratios()

    def bracket_value(self, outer_scale: float | None = None) -> float:
        """||g||_E^2 + sum of scale ratios^k; an upper bound for d^2."""
        return self.norm_e ** 2 + _ratio_penalty(self.config.k, self.config.lam, None, outer_scale)

    def diagnostics(self) -> dict[str, Any]:
        return {"lam": list(self.config.lam), "iota": list(self.config.iota), "m": self.config.m,
                "norm_e": self.norm_e, "norm_h": self.norm_h, "ratios": self.ratios.tolist(),
                "ortho_residuals": self.ortho_residuals.tolist(), "iterations": self.iterations,
                "newton_residual": self.newton_residual}


def _ortho_system(grid: RadialGrid, k: int, m: int, iota: Sequence[int], ell: np.ndarray,
                  target: np.ndarray, jacobian: bool) -> tuple[np.ndarray, np.ndarray | None]:
    """Normalized residuals G_j = lam_j^{-2} int Z(r/lam_j) g r dr and their ell-derivatives."""
    r = grid.nodes
    w = grid.weights
    lam = np.exp(ell)
    g = target - _bubbles(k, m, iota, lam, r)
    M = len(lam)
    zs = [z_profile(k, r / x) / (x * x) for x in lam]
    G = np.array([w @ (z * g) for z in zs])
    if not jacobian:
        return G, None
    J = np.empty((M, M))
    dq = [i * lam_q(k, x, r) for i, x in zip(iota, lam)]
    for j in range(M):
        for i in range(M):
            J[j, i] = w @ (zs[j] * dq[i])
        J[j, j] += w @ ((-lam_z(k, r / lam[j]) - 2.0 * z_profile(k, r / lam[j])) / lam[j] ** 2 * g)
    return G, J


def _newton(grid: RadialGrid, k: int, m: int, iota: Sequence[int], guess: Sequence[float],
            target: np.ndarray, tol: float, max_iter: int) -> tuple[np.ndarray, int, float]:
    ell = np.log(np.asarray(guess, dtype=float))
    G, J = _ortho_system(grid, k, m, iota, ell, target, True)
    res = float(np.max(np.abs(G))) if G.size else 0.0
    it = 0
    while res > tol:
        if it >= max_iter:
            raise FitError(f"Newton did not converge in {max_iter} iterations", np.exp(ell), res)
        try:
            step = np.linalg.solve(J, -G)
        except np.linalg.LinAlgError as exc:
            raise FitError("singular Newton system", np.exp(ell), res) from exc
        if not np.all(np.isfinite(step)):
            raise FitError("non-finite Newton step", np.exp(ell), res)
        # at most a factor e^2 per iteration in each scale
        t = min(1.0, 2.0 / max(float(np.max(np.abs(step))), 1e-300))
        while True:
            trial = ell + t * step
            ordered = np.all(np.diff(trial) > 0)
            if ordered:
                G_new, J_new = _ortho_system(grid, k, m, iota, trial, target, True)
                res_new = float(np.max(np.abs(G_new)))
                if res_new <= res or t < 1e-6:
                    break
            t *= 0.5
            if t < 1e-6 and not ordered:
                raise FitError("Newton step cannot keep the scales ordered", np.exp(ell), res)
        ell, G, J, res = trial, G_new, J_new, res_new
        it += 1
    return np.exp(ell), it, res


def fit_static(field: FieldState, guess: Sequence[float], *, iota: Sequence[int] | None = None,
               m: int | None = None, radiation: FieldState | None = None,
               tol: float = NEWTON_TOL, max_iter: int = NEWTON_MAX_ITER) -> ModulationFit:
    """Decompose field = Q(m, iota, lam) + g with <Z_{lam_j} | g> = 0.

    With ``iota`` None every sign pattern consistent with the sector is tried
    and the fit with the smallest energy norm of g is returned.
    """
    guess = tuple(float(x) for x in guess)
    if any(not x > 0 for x in guess) or any(b <= a for a, b in zip(guess, guess[1:])):
        raise DomainError("guess scales must be positive and strictly increasing")
    m = field.m if m is None else int(m)
    k = field.k
    grid = field.grid
    u, u_dot = field.u, field.u_dot
    if radiation is not None:
        if not radiation.grid.compatible(grid):
            raise DomainError("radiation must live on the field grid")
        u, u_dot = u - radiation.u, u_dot - radiation.u_dot
    M = len(guess)
    if iota is not None:
        iota = tuple(int(i) for i in iota)
        if len(iota) != M:
            raise DomainError("sign vector and guess differ in length")
        if m - sum(iota) != field.ell:
            raise DomainError(f"signs {iota} with m = {m} give sector {m - sum(iota)}, "
                              f"field is in sector {field.ell}")
        patterns = [iota]
    else:
        patterns = sign_patterns(M, m, field.ell)
        if not patterns:
            raise DomainError(f"no sign pattern of length {M} connects sector {field.ell} to m = {m}")

    best = None
    last_err = None
    for pat in patterns:
        try:
            lam, it, res = _newton(grid, k, m, pat, guess, u, tol, max_iter)
        except FitError as exc:
            last_err = exc
            continue
        cfg = BubbleConfig(k, m, pat, tuple(lam))
        g = u - multi_bubble(cfg, grid.nodes)
        ne = math.sqrt(energy_norm_sq(grid, k, g, u_dot))
        if best is None or ne < best[0]:
            best = (ne, cfg, g, it, res)
    if best is None:
        raise last_err
    ne, cfg, g, it, res = best
    ortho = np.array([grid.weights @ (z_scaled(k, x, grid.nodes) * g) for x in cfg.lam])
    return ModulationFit(cfg, grid, g, np.array(u_dot, dtype=float), ortho, ne,
                         h_norm(grid, k, g), it, res)


def orthogonal_bump(grid: RadialGrid, config: BubbleConfig, bump: np.ndarray) -> np.ndarray:
    """Remove from ``bump`` its components along Z_{lam_j} (discrete pairing)."""
    r = grid.nodes
    zs = np.array([z_scaled(config.k, x, r) for x in config.lam])
    gram = zs @ (grid.weights[:, None] * zs.T)
    coef = np.linalg.solve(gram, zs @ (grid.weights * bump))
    return bump - coef @ zs


# ---------------------------------------------------------------------------
# proximity functionals

@dataclass(frozen=True)
class DistanceReport:
    value: float
    iota: tuple[int, ...]
    lam: tuple[float, ...]
    m: int
    certified: bool
    localization: tuple[float, float] | None = None
    log: tuple[dict[str, Any], ...] = ()
    penalty: float = 0.0


def energy_shell_seeds(field: FieldState, count: int) -> list[float]:
    """Scales where the exterior energy crosses (count - j + 1/2) E(Q), j = 1..count."""
    if count == 0:
        return []
    ext = exterior_energy_function(field)
    eq = energy_Q(field.k)
    total = ext(0.0)
    seeds = []
    for j in range(1, count + 1):
        level = (count - j + 0.5) * eq
        if 0 < level < total:
            seeds.append(_sup_level(ext, field.grid, level))
        else:
            seeds.append(math.nan)
    # fill failures geometrically and enforce ordering
    good = [s for s in seeds if math.isfinite(s)]
    base = good[0] if good else 1.0
    out = []
    for j, s in enumerate(seeds):
        s = s if math.isfinite(s) else base * 10.0 ** j
        if out and s <= out[-1]:
            s = out[-1] * 2.0
        out.append(s)
    return out


class _Objective:
    """value^2 of a proximity functional as a function of log-scales."""

    def __init__(self, field: FieldState, iota: Sequence[int], m: int, radiation: FieldState | None,
                 inner: float | None, outer: float | None, r1: float, r2: float):
        self.field = field
        self.iota = tuple(iota)
        self.m = m
        self.inner = inner
        self.outer = outer
        self.r1 = r1
        self.r2 = r2
        self.u = field.u if radiation is None else field.u - radiation.u
        self.u_dot = field.u_dot if radiation is None else field.u_dot - radiation.u_dot
        self.count = 0

    def norm_sq(self, lam: Sequence[float]) -> float:
        f = self.field
        g = self.u - _bubbles(f.k, self.m, self.iota, lam, f.grid.nodes)
        if self.r1 == 0.0 and math.isinf(self.r2):
            return energy_norm_sq(f.grid, f.k, g, self.u_dot)
        pair = FieldState(f.grid, g, self.u_dot, f.k)
        return norm_e_sq(pair, self.r1, self.r2)

    def __call__(self, ell: np.ndarray) -> float:
        self.count += 1
        lam = np.exp(np.asarray(ell, dtype=float))
        return self.norm_sq(lam) + _ratio_penalty(self.field.k, lam, self.inner, self.outer)


def _minimize(obj: _Objective, start: Sequence[float], sweeps: int = 3) -> tuple[np.ndarray, float, bool]:
    ell = np.log(np.asarray(start, dtype=float))
    if ell.size == 0:
        return ell, obj(ell), True
    val = obj(ell)
    for _ in range(sweeps):
        for j in range(ell.size):
            def f1(x: float, j: int = j) -> float:
                trial = ell.copy()
                trial[j] = x
                return obj(trial)
            res = minimize_scalar(f1, bounds=(ell[j] - 1.5, ell[j] + 1.5), method="bounded",
                                  options={"xatol": 1e-6})
            if res.fun < val:
                ell[j] = res.x
                val = float(res.fun)
    res = minimize(obj, ell, method="BFGS", options={"gtol": 1e-10, "maxiter": 200})
    if res.fun <= val:
        ell, val = res.x, float(res.fun)
    return ell, val, bool(res.success) or res.status == 2


def _proximity(field: FieldState, N: int, *, m: int, patterns: list[tuple[int, ...]],
               radiation: FieldState | None, inner: float | None, outer: float | None,
               r1: float, r2: float, seeds: list[list[float]]) -> DistanceReport:
    best = None
    log = []
    for pat in patterns:
        obj = _Objective(field, pat, m, radiation, inner, outer, r1, r2)
        for start in seeds:
            ell, val, ok = _minimize(obj, start)
            lam = tuple(float(x) for x in np.exp(ell))
            log.append({"iota": list(pat), "start": list(start), "value_sq": val,
                        "evaluations": obj.count, "success": ok})
            if best is None or val < best[0]:
                best = (val, pat, lam, ok, _ratio_penalty(field.k, lam, inner, outer))
    val, pat, lam, ok, pen = best
    loc = (r1, r2) if (r1 > 0 or math.isfinite(r2)) else None
    return DistanceReport(math.sqrt(max(val, 0.0)), tuple(pat), lam, m, ok, loc, tuple(log), pen)


def proximity_d(field: FieldState, N: int, *, outer_scale: float | None = None,
                radiation: FieldState | None = None, m: int | None = None,
                guess: Sequence[float] | None = None) -> DistanceReport:
    """Distance to the nearest N-bubble plus the scale-ratio penalty.

    The outer-scale term (lam_N / outer_scale)^k is included when an outer
    scale is supplied.
    """
    if N < 0:
        raise DomainError("number of bubbles must be non-negative")
    m = field.m if m is None else int(m)
    patterns = sign_patterns(N, m, field.ell)
    if not patterns:
        raise DomainError(f"no sign pattern of length {N} connects sector {field.ell} to m = {m}")
    seeds = [energy_shell_seeds(field, N)]
    if guess is not None:
        seeds.append(list(guess))
        try:
            seeds.append(list(fit_static(field, guess, m=m, radiation=radiation).config.lam))
        except (FitError, DomainError):
            pass
    return _proximity(field, N, m=m, patterns=patterns, radiation=radiation, inner=None,
                      outer=outer_scale, r1=0.0, r2=math.inf, seeds=seeds)


def proximity_local(field: FieldState, rho: float, K: int, N: int, *,
                    outer_scale: float | None = None, radiation: FieldState | None = None,
                    m: int | None = None, guess: Sequence[float] | None = None) -> DistanceReport:
    """Localized proximity d_K(rho): norm on (rho, inf), bubbles K+1..N, lam_K := rho."""
    if not rho >= 0 or not 0 <= K <= N:
        raise DomainError("need rho >= 0 and 0 <= K <= N")
    m = field.m if m is None else int(m)
    count = N - K
    patterns = sign_patterns(count, m, None if rho > 0 else field.ell)
    if not patterns:
        raise DomainError("no admissible sign pattern")
    seeds = [energy_shell_seeds(field, count)]
    if guess is not None:
        seeds.append(list(guess))
    inner = rho if rho > 0 else None
    return _proximity(field, count, m=m, patterns=patterns, radiation=radiation, inner=inner,
                      outer=outer_scale, r1=rho, r2=math.inf, seeds=seeds)


def delta_r(field: FieldState, R: float, *, max_bubbles: int | None = None) -> DistanceReport:
    """Localized distance on (0, R): infimum over m, M, signs and scales with lam_{M+1} := R."""
    if not R > 0:
        raise DomainError("R must be positive")
    e_in = energy(field, 0.0, R)
    cap = int(math.floor(e_in / energy_Q(field.k))) + 1
    if max_bubbles is not None:
        cap = min(cap, max_bubbles)
    idx = min(np.searchsorted(field.grid.nodes, R), field.grid.n - 1)
    m0 = int(round(field.u[idx] / math.pi))
    best = None
    for M in range(cap + 1):
        for m in (m0 - 1, m0, m0 + 1):
            patterns = sign_patterns(M, m, field.ell)
            if not patterns:
                continue
            seeds = energy_shell_seeds(field, M) if M else []
            seeds = [s for s in seeds if s < R] if M else []
            if len(seeds) < M:
                seeds = list(R * np.logspace(-M - 1, -2, M)) if M else []
            rep = _proximity(field, M, m=m, patterns=patterns, radiation=None, inner=None,
                             outer=R, r1=0.0, r2=R, seeds=[seeds])
            if best is None or rep.value < best.value:
                best = rep
    return best


# ---------------------------------------------------------------------------
# the scale of the K-th bubble

def _sup_level(ext: Callable[[float], float], grid: RadialGrid, level: float) -> float:
    """Largest r with ext(r) = level for a non-increasing exterior energy."""
    r = grid.nodes
    vals = np.array([ext(x) for x in r])
    above = np.nonzero(vals >= level)[0]
    if above.size == 0:
        lo = r[0]
        while ext(lo) < level:
            lo /= 10.0
            if lo < 1e-300:
                raise DomainError("level not reached near the origin")
        return brentq(lambda x: ext(x) - level, lo, r[0], xtol=1e-300, rtol=1e-14)
    i = above[-1]
    if i == r.size - 1:
        hi = r[-1]
        while ext(hi) >= level:
            hi *= 10.0
            if hi > 1e300:
                raise DomainError("level not reached at infinity")
        return brentq(lambda x: ext(x) - level, r[-1], hi, xtol=1e-300, rtol=1e-14)
    if vals[i] == level:
        return float(r[i])
    return brentq(lambda x: ext(x) - level, r[i], r[i + 1], xtol=1e-300, rtol=1e-14)


def mu_scale(field: FieldState, N: int, K: int, E_star: float = 0.0) -> float:
    """sup{r : E(u; r, inf) = (N - K + 1/2) E(Q) + E_star}."""
    level = (N - K + 0.5) * energy_Q(field.k) + E_star
    ext = exterior_energy_function(field)
    total = ext(0.0)
    if not 0 < level < total:
        raise DomainError(f"level {level:.6g} outside (0, E = {total:.6g})")
    return _sup_level(ext, field.grid, level)


# ---------------------------------------------------------------------------
# refined parameters

@lru_cache(maxsize=8)
def default_cutoff(c: float = 0.1, R: float = 10.0) -> CutoffProfile:
    return build_cutoff(c, R)


def xi_refined(fit: ModulationFit, L: float = DEFAULT_L) -> np.ndarray:
    """Refined scales xi_j, j = 1..M-1 (identity for k >= 3, pairing correction for k = 2)."""
    cfg = fit.config
    k = cfg.k
    if not L > 0:
        raise ValueError("L must be positive")
    lam = np.array(cfg.lam[:-1])
    if k >= 3:
        return lam.copy()
    if k == 1:
        raise DomainError("use xi_refined_k1 for k = 1")
    r = fit.grid.nodes
    norm = norm_lam_q_sq_closed(k)
    out = lam.copy()
    for j, (i, x) in enumerate(zip(cfg.iota, lam)):
        pair = fit.grid.weights @ (chi(r / (L * x)) * lam_q_scaled(k, x, r) * fit.g)
        out[j] = x - i / norm * pair
    return out


def xi_refined_k1(fit: ModulationFit, L: float = DEFAULT_L) -> np.ndarray:
    """Refined scales for k = 1 with the logarithmic normalization."""
    cfg = fit.config
    if cfg.k != 1:
        raise DomainError("xi_refined_k1 applies to k = 1")
    r = fit.grid.nodes
    lam = cfg.lam
    out = np.array(lam[:-1], dtype=float)
    for j in range(cfg.M - 1):
        inner = np.zeros(r.shape)
        for i in range(j):
            inner += cfg.iota[i] * q_minus_pi(1, lam[i], r)
        cut = chi(r / (L * math.sqrt(lam[j] * lam[j + 1])))
        pair = fit.grid.weights @ (cut * lam_q_scaled(1, lam[j], r) * (fit.g + inner))
        out[j] = lam[j] - cfg.iota[j] / (2.0 * math.log(lam[j + 1] / lam[j])) * pair
    return out


def beta(fit: ModulationFit, L: float = DEFAULT_L, cutoff: CutoffProfile | None = None) -> np.ndarray:
    """beta_j = -iota_j <Lambda Q_{lam_j} | g_dot>/|Lambda Q|^2 - <A_(lam_j) g | g_dot>/|Lambda Q|^2."""
    cfg = fit.config
    k = cfg.k
    if k == 1:
        raise DomainError("use beta_k1 for k = 1")
    q = cutoff or default_cutoff()
    r = fit.grid.nodes
    w = fit.grid.weights
    norm = norm_lam_q_sq_closed(k)
    out = np.empty(cfg.M)
    for j, (i, x) in enumerate(zip(cfg.iota, cfg.lam)):
        first = w @ (lam_q_scaled(k, x, r) * fit.g_dot)
        second = w @ (apply_a_underline(q, x, fit.grid, fit.g) * fit.g_dot)
        out[j] = -(i * first + second) / norm
    return out


def beta_k1(fit: ModulationFit, L: float = DEFAULT_L, cutoff: CutoffProfile | None = None,
            xi: np.ndarray | None = None) -> np.ndarray:
    """k = 1 variant, j = 1..M-1, truncated at L sqrt(xi_j lam_{j+1}) with no norm prefactor."""
    cfg = fit.config
    if cfg.k != 1:
        raise DomainError("beta_k1 applies to k = 1")
    q = cutoff or default_cutoff()
    xi = xi_refined_k1(fit, L) if xi is None else np.asarray(xi)
    if np.any(xi <= 0):
        raise DomainError("refined scales must be positive")
    r = fit.grid.nodes
    w = fit.grid.weights
    out = np.empty(cfg.M - 1)
    for j in range(cfg.M - 1):
        x = cfg.lam[j]
        cut = chi(r / (L * math.sqrt(xi[j] * cfg.lam[j + 1])))
        first = w @ (cut * lam_q_scaled(1, x, r) * fit.g_dot)
        second = w @ (apply_a_underline(q, x, fit.grid, fit.g) * fit.g_dot)
        out[j] = -cfg.iota[j] * first - second
    return out


@dataclass(frozen=True)
class WeightedInteraction:
    value: float
    empty_alternating_set: bool
    over_threshold: bool


def alternating_set(iota: Sequence[int]) -> list[int]:
    """1-based indices i with iota_i != iota_{i+1}."""
    return [i + 1 for i in range(len(iota) - 1) if iota[i] != iota[i + 1]]


def weighted_u(fit: ModulationFit, xi: Sequence[float] | None = None, *, d: float | None = None,
               eta0: float = 0.5, L: float = DEFAULT_L) -> WeightedInteraction:
    """U = max over alternating i of (2^{-i} xi_i / lam_{i+1})^k; +inf when d >= eta0.

    An empty alternating set gives 0 and is flagged.
    """
    cfg = fit.config
    if d is not None and d >= eta0:
        return WeightedInteraction(math.inf, False, True)
    if xi is None:
        xi = xi_refined_k1(fit, L) if cfg.k == 1 else xi_refined(fit, L)
    A = alternating_set(cfg.iota)
    if not A:
        return WeightedInteraction(0.0, True, False)
    val = max((2.0 ** -i * xi[i - 1] / cfg.lam[i]) ** cfg.k for i in A)
    return WeightedInteraction(float(val), False, False)


# ---------------------------------------------------------------------------
# time-series utilities

def detect_collision_intervals(times: Sequence[float], d: Sequence[float], epsilon: float,
                               eta: float) -> list[tuple[float, float]]:
    """Excursions of d above epsilon that reach eta, bounded by samples with d <= epsilon.

    Endpoints are the linear-interpolation crossings of the level epsilon.
    """
    if not 0 < epsilon < eta:
        raise ValueError("need 0 < epsilon < eta")
    t = np.asarray(times, dtype=float)
    d = np.asarray(d, dtype=float)
    if t.shape != d.shape or t.ndim != 1:
        raise ValueError("times and values must be 1-d arrays of equal length")
    out = []
    i = 0
    n = t.size
    while i < n:
        if d[i] <= epsilon:
            i += 1
            continue
        start = i
        while i < n and d[i] > epsilon:
            i += 1
        if start == 0 or i == n:
            continue
        if d[start:i].max() < eta:
            continue
        a = _crossing(t[start - 1], t[start], d[start - 1], d[start], epsilon)
        b = _crossing(t[i - 1], t[i], d[i - 1], d[i], epsilon)
        out.append((a, b))
    return out


def _crossing(t0: float, t1: float, d0: float, d1: float, level: float) -> float:
    if d1 == d0:
        return float(t0)
    return float(t0 + (level - d0) * (t1 - t0) / (d1 - d0))


def partition_lipschitz(mu_fn: Callable[[float], float], a: float, b: float,
                        max_nodes: int = 1_000_000) -> list[float]:
    """Nodes a = a_0 < ... < a_{l+1} = b with mu(a_i)/4 <= a_{i+1} - a_i <= 3 mu(a_i)/4."""
    mu_a = float(mu_fn(a))
    if not mu_a > 0:
        raise DomainError("mu must be positive")
    if b - a < mu_a / 4 * (1 - 1e-12):
        raise DomainError("need b - a >= mu(a)/4")
    nodes = [float(a)]
    x, mx = float(a), mu_a
    while b - x > 0.75 * mx:
        step = 0.25 * mx
        nxt = x + step
        # keep the rounded gap at least mu/4
        while nxt - x < step:
            nxt = math.nextafter(nxt, math.inf)
        x = nxt
        mx = float(mu_fn(x))
        if not mx > 0:
            raise DomainError(f"mu({x}) is not positive")
        nodes.append(x)
        if len(nodes) > max_nodes:
            raise DomainError("too many nodes; is mu bounded below?")
    nodes.append(float(b))
    return nodes


def check_partition(nodes: Sequence[float], mu_fn: Callable[[float], float]) -> bool:
    return all(0.25 * mu_fn(x) <= y - x <= 0.75 * mu_fn(x) for x, y in zip(nodes, nodes[1:]))


# ---------------------------------------------------------------------------
# tracking

@dataclass
class TrackedSeries:
    times: np.ndarray
    fits: list[ModulationFit]
    d: np.ndarray
    mu: np.ndarray
    xi: np.ndarray
    beta: np.ndarray
    U: np.ndarray
    terminated: bool = False
    reason: str = ""
    manifest: dict[str, Any] = dc_field(default_factory=dict)

    @property
    def lam(self) -> np.ndarray:
        return np.array([f.config.lam for f in self.fits])

    @property
    def k(self) -> int:
        return self.fits[0].config.k

    def columns(self) -> list[str]:
        M = self.lam.shape[1]
        return (["t"] + [f"lambda_{j}" for j in range(1, M + 1)] + [f"xi_{j}" for j in range(1, M)]
                + [f"beta_{j}" for j in range(1, self.beta.shape[1] + 1)] + ["d", "mu", "U"])

    def rows(self) -> list[list[float]]:
        lam = self.lam
        return [[float(self.times[n])] + lam[n].tolist() + self.xi[n].tolist() + self.beta[n].tolist()
                + [float(self.d[n]), float(self.mu[n]), float(self.U[n])] for n in range(len(self.fits))]

    def to_csv(self, path: str | Path) -> Path:
        path = Path(path)
        with path.open("w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(self.columns())
            for row in self.rows():
                w.writerow([repr(x) for x in row])
        return path

    def write_manifest(self, path: str | Path) -> Path:
        path = Path(path)
        doc = dict(self.manifest)
        doc.update({"terminated": self.terminated, "reason": self.reason, "snapshots": len(self.fits)})
        path.write_text(json.dumps(doc, indent=2, sort_keys=True, default=str))
        return path


def track(traj, guess: Sequence[float], *, iota: Sequence[int] | None = None, m: int | None = None,
          eta0: float = 0.5, jump_factor: float = 1.5, K: int | None = None, L: float = DEFAULT_L,
          cutoff: CutoffProfile | None = None, with_mu: bool = True,
          tol: float = NEWTON_TOL) -> TrackedSeries:
    """Warm-started fits along a trajectory with derived scalars.

    d is the fit's bracket value sqrt(||g||_E^2 + sum ratios^k), an upper
    bound for the proximity function.  The series stops, flagged, when a fit
    fails or a scale jumps by more than ``jump_factor`` between snapshots.
    """
    snaps = traj.snapshots
    try:
        first = fit_static(snaps[0], guess, iota=iota, m=m, tol=tol)
    except (FitError, DomainError) as exc:
        raise DomainError(f"initial fit failed: {exc}") from exc
    d0 = math.sqrt(first.bracket_value())
    if d0 >= eta0:
        raise DomainError(f"initial distance {d0:.3g} is not below eta0 = {eta0}")
    M = first.config.M
    K = M if K is None else K
    fits, times, ds, mus, xis, betas, us = [], [], [], [], [], [], []
    terminated, reason = False, ""
    fit = first
    for n, (t, snap) in enumerate(zip(traj.times, snaps)):
        if n > 0:
            try:
                fit = fit_static(snap, fits[-1].config.lam, iota=fits[-1].config.iota, m=m, tol=tol)
            except (FitError, DomainError) as exc:
                terminated, reason = True, f"fit failed at t = {t:.6g}: {exc}"
                break
            jump = np.max(np.abs(np.log(np.array(fit.config.lam) / np.array(fits[-1].config.lam))))
            if jump > math.log(jump_factor):
                terminated, reason = True, f"scale jump {math.exp(jump):.3g} at t = {t:.6g}"
                break
        d = math.sqrt(fit.bracket_value())
        k = fit.config.k
        if k == 1:
            xi = xi_refined_k1(fit, L)
            bt = beta_k1(fit, L, cutoff, xi) if M > 1 else np.zeros(0)
        else:
            xi = xi_refined(fit, L)
            bt = beta(fit, L, cutoff)
        wu = weighted_u(fit, xi, d=d, eta0=eta0)
        mu = mu_scale(snap, M, K) if with_mu else math.nan
        fits.append(fit)
        times.append(float(t))
        ds.append(d)
        mus.append(mu)
        xis.append(xi)
        betas.append(bt)
        us.append(wu.value)
    manifest = {"newton_tol": tol, "newton_max_iter": NEWTON_MAX_ITER, "eta0": eta0,
                "jump_factor": jump_factor, "L": L, "K": K, "iota": list(first.config.iota),
                "m": first.config.m}
    manifest.update({key: traj.manifest[key] for key in ("config_hash",) if key in traj.manifest})
    return TrackedSeries(np.array(times), fits, np.array(ds), np.array(mus), np.array(xis),
                         np.array(betas), np.array(us), terminated, reason, manifest)


def scale_derivative_bound(series: TrackedSeries) -> dict[str, float]:
    """Measured constants in |lam_j'| <= C ||g_dot||_{L2} + zeta (centred differences).

    C is the largest ratio |lam_j'| / ||g_dot||_{L2}; zeta is reported as the
    largest |lam_j'| where ||g_dot|| vanishes to rounding.
    """
    t = series.times
    if t.size < 3:
        raise DomainError("need at least three tracked times")
    lam = series.lam
    dlam = (lam[2:] - lam[:-2]) / (t[2:] - t[:-2])[:, None]
    gd = np.array([math.sqrt(f.grid.weights @ f.g_dot ** 2) for f in series.fits[1:-1]])
    big = gd > 1e-12
    C = float(np.max(np.abs(dlam[big]).max(axis=1) / gd[big])) if big.any() else 0.0
    zeta = float(np.abs(dlam[~big]).max()) if (~big).any() else 0.0
    return {"C": C, "zeta": zeta}


@dataclass(frozen=True)
class ModulationResidual:
    times: np.ndarray
    position: np.ndarray
    velocity: np.ndarray
    fi_norm: np.ndarray
    fq_l1: np.ndarray
    g_h_sq: np.ndarray

    @property
    def fq_ratio(self) -> np.ndarray:
        with np.errstate(divide="ignore", invalid="ignore"):
            return np.where(self.g_h_sq > 0, self.fq_l1 / self.g_h_sq, 0.0)


def modulation_equation_residual(traj, series: TrackedSeries, cutoff_radius: float) -> ModulationResidual:
    """Residuals of the first-order system for the localized (g, g_dot) along a tracked series.

    The field is localized as u chi_nu + (1 - chi_nu) m pi with constant
    nu = cutoff_radius, so the terms proportional to nu' vanish.
    """
    n = len(series.fits)
    if n < 3:
        raise DomainError("need at least three tracked snapshots")
    if cutoff_radius <= np.max(series.lam):
        raise DomainError("cutoff radius must exceed every fitted scale")
    grid = series.fits[0].grid
    r = grid.nodes
    w = grid.weights
    k = series.k
    cut = chi(r / cutoff_radius)
    lam_cut = (r / cutoff_radius) * chi(r / cutoff_radius, 1)
    # r^2 Delta chi_nu = x^2 chi''(x) + x chi'(x) with x = r / nu
    x = r / cutoff_radius
    r2_lap_cut = x * x * chi(x, 2) + x * chi(x, 1)
    snaps = traj.snapshots[:n]
    times = series.times
    loc_g, loc_gd = [], []
    for fit, s in zip(series.fits, snaps):
        m = fit.config.m
        u_loc = s.u * cut + (1 - cut) * m * math.pi
        loc_g.append(u_loc - multi_bubble(fit.config, r))
        loc_gd.append(s.u_dot * cut)
    pos, vel, fi_n, fq, gh = [], [], [], [], []
    for i in range(1, n - 1):
        dt = times[i + 1] - times[i - 1]
        fit = series.fits[i]
        cfg = fit.config
        lam_prime = (np.array(series.fits[i + 1].config.lam) - np.array(series.fits[i - 1].config.lam)) / dt
        dg = (loc_g[i + 1] - loc_g[i - 1]) / dt
        rhs = loc_gd[i] + sum(io * lp * lam_q_scaled(k, lm, r)
                              for io, lm, lp in zip(cfg.iota, cfg.lam, lam_prime))
        pos.append(math.sqrt(w @ (dg - rhs) ** 2))
        dgd = (loc_gd[i + 1] - loc_gd[i - 1]) / dt
        s = snaps[i]
        m = cfg.m
        Q = multi_bubble(cfg, r)
        g = loc_g[i]
        u_loc = Q + g
        single = sum(io * nonlinearity_f(q_minus_pi(k, lm, r)) for io, lm in zip(cfg.iota, cfg.lam))
        f_i = -k * k / r ** 2 * (nonlinearity_f(Q) - single)
        f_q = -k * k / r ** 2 * (nonlinearity_f(u_loc) - nonlinearity_f(Q) - nonlinearity_fprime(Q) * g)
        minus_lg = grid.laplacian(g) - k * k / r ** 2 * nonlinearity_fprime(Q) * g
        us = grid.d_ds(s.u)
        phi_dot = (-2.0 / r ** 2 * us * lam_cut + (m * math.pi - s.u) * r2_lap_cut / r ** 2
                   + k * k / r ** 2 * (nonlinearity_f(s.u * cut + (1 - cut) * m * math.pi)
                                       - nonlinearity_f(s.u) * cut))
        res = dgd - (minus_lg + f_i + f_q + phi_dot)
        interior = slice(2, -2)
        vel.append(math.sqrt(w[interior] @ res[interior] ** 2))
        fi_n.append(math.sqrt(w @ f_i ** 2))
        fq.append(float(w @ np.abs(f_q)))
        gh.append(energy_norm_sq(grid, k, g))
    return ModulationResidual(times[1:n - 1], np.array(pos), np.array(vel), np.array(fi_n),
                              np.array(fq), np.array(gh))
