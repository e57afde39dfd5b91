"""Localized virial cutoff, virial operators and the virial identity.

The cutoff q is built from three kinds of pieces, glued C^4:

* a plateau q = r^2/2 on [1/R, R];
* logarithmic pieces q = r^2/2 -/+ c1 (r^2 log r / 2 + psi), with psi a
  combination of powers chosen so that all derivatives up to order four match
  the plateau;
* truncation pieces, Taylor polynomials of the logarithmic pieces multiplied
  by the cutoff chi, after which q is constant.

The logarithmic pieces end where c1 |log| = 1, so the constancy radius is
of order exp(1/c1) and overflows double precision for small c.  Every
property check is therefore phrased through the scale-free quantities

    p1 = q'/r,  p2 = q'',  p3 = r q''',  p4 = r^2 q'''',

evaluated as functions of log r.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field as dc_field
from functools import cached_property
from typing import Any, Callable, Sequence

import numpy as np
from scipy.special import comb

from .fields import FieldState, RadialGrid
from .profiles import chi

OUTER_POWERS = (-1, -2, -3, -4, -5)
INNER_POWERS = (2, 3, 4, 5, 6)
# r^2 log r / 2 has derivatives (0, 1/2, 3/2, 1, -1) at r = 1; psi cancels them.
MATCH_VALUES = (0.0, -0.5, -1.5, -1.0, 1.0)
INNER_STRETCH = 3.0
# Scale-free form of r^2 log r / 2: p_n = x^{n-2} d^n/dx^n, log part separate.
_LOG_PART = ((0.0, 0.5, 1.5, 1.0, -1.0), (0.0, 1.0, 1.0, 0.0, 0.0))


def _falling(p: float, n: int) -> float:
    out = 1.0
    for t in range(n):
        out *= p - t
    return out


def matching_coefficients(powers: Sequence[int]) -> np.ndarray:
    """Solve for psi = sum a_i x^{p_i} with derivatives MATCH_VALUES at x = 1."""
    A = np.array([[_falling(p, j) for p in powers] for j in range(5)])
    if abs(np.linalg.det(A)) < 1e-12:
        raise ValueError("matching system is singular")
    return np.linalg.solve(A, np.array(MATCH_VALUES))


def _cutoff_taylor_derivs(coef: np.ndarray, y: np.ndarray) -> np.ndarray:
    """Derivatives 0..4 of F(y) = sum_j coef_j y^j chi(y) / j!, j = 1..4."""
    chis = [chi(y, n) for n in range(5)]
    out = np.zeros((5,) + y.shape)
    for j in range(1, 5):
        for n in range(5):
            term = np.zeros_like(y)
            for m in range(0, min(n, j) + 1):
                term = term + comb(n, m) * y ** (j - m) / math.factorial(j - m) * chis[n - m]
            out[n] += coef[j - 1] * term
    return out


@dataclass(frozen=True)
class CutoffProfile:
    """The cutoff q_{c,R}; see the module docstring for the construction."""

    c: float
    R: float
    c1: float
    outer_coef: tuple[float, ...]
    inner_coef: tuple[float, ...]
    meta: dict[str, Any] = dc_field(default_factory=dict, compare=False)

    @property
    def log_len(self) -> float:
        """Length in log r of each logarithmic piece, 1/c1."""
        return 1.0 / self.c1

    @property
    def log_R_tilde(self) -> float:
        """log of the constancy radius: q is constant for |log r| >= this."""
        return math.log(self.R) + self.log_len + math.log(3.0)

    @property
    def R_tilde(self) -> float:
        return math.exp(self.log_R_tilde) if self.log_R_tilde < 700 else math.inf

    def _log_piece(self, sigma: np.ndarray, outer: bool) -> np.ndarray:
        coef = self.outer_coef if outer else self.inner_coef
        powers = OUTER_POWERS if outer else INNER_POWERS
        sign = -1.0 if outer else 1.0
        out = np.zeros((5,) + sigma.shape)
        for n in range(1, 5):
            corr = _LOG_PART[0][n] + (sigma if n <= 2 else 0.0)
            for a, p in zip(coef, powers):
                corr = corr + a * _falling(p, n) * np.exp((p - 2) * sigma)
            out[n] = _LOG_PART[1][n] + sign * self.c1 * corr
        return out

    @cached_property
    def _edge_values(self) -> tuple[np.ndarray, np.ndarray]:
        L = np.array([self.log_len])
        return self._log_piece(L, True)[:, 0], self._log_piece(-L, False)[:, 0]

    def scaled_derivatives(self, s: np.ndarray) -> np.ndarray:
        """Array (5, ...) with p_1..p_4 at log-radius s (row 0 unused)."""
        s = np.asarray(s, dtype=float)
        out = np.zeros((5,) + s.shape)
        logR = math.log(self.R)
        L = self.log_len
        so = s - logR
        si = s + logR
        plateau = (so <= 0) & (si >= 0)
        out[1][plateau] = 1.0
        out[2][plateau] = 1.0

        m = (so > 0) & (so <= L)
        if np.any(m):
            out[:, m] = self._log_piece(so[m], True)
        m = (si < 0) & (si >= -L)
        if np.any(m):
            out[:, m] = self._log_piece(si[m], False)

        edge_o, edge_i = self._edge_values
        m = so > L
        if np.any(m):
            y = np.expm1(so[m] - L)
            F = _cutoff_taylor_derivs(edge_o[1:], y)
            rho = 1.0 + y
            for n in range(1, 5):
                out[n][m] = rho ** (n - 2) * F[n]
        m = si < -L
        if np.any(m):
            y = -INNER_STRETCH * np.expm1(si[m] + L)
            coef = np.array([edge_i[j] * (-1.0 / INNER_STRETCH) ** j for j in range(1, 5)])
            F = _cutoff_taylor_derivs(coef, y)
            rho = 1.0 - y / INNER_STRETCH
            for n in range(1, 5):
                out[n][m] = rho ** (n - 2) * (-INNER_STRETCH) ** n * F[n]
        return out

    def property_quantities(self, s: np.ndarray) -> dict[str, np.ndarray]:
        """q'/r, q'', r (q'/r)' and r^2 Delta^2 q as functions of log r."""
        p = self.scaled_derivatives(s)
        return {"dq_over_r": p[1], "d2q": p[2], "r_dlog": p[2] - p[1],
                "r2_bilap": p[4] + 2 * p[3] - p[2] + p[1]}

    def dq(self, r: np.ndarray) -> np.ndarray:
        """q'(r)."""
        r = np.asarray(r, dtype=float)
        return r * self.scaled_derivatives(np.log(r))[1]

    def d2q(self, r: np.ndarray) -> np.ndarray:
        r = np.asarray(r, dtype=float)
        return self.scaled_derivatives(np.log(r))[2]

    def q(self, r: np.ndarray) -> np.ndarray:
        """q(r); overflows to inf beyond about r = 1e154 in the outer pieces."""
        r = np.asarray(r, dtype=float)
        with np.errstate(over="ignore"):
            return self._q_value(np.log(r))

    def _q_value(self, s: np.ndarray) -> np.ndarray:
        logR = math.log(self.R)
        L = self.log_len
        so = s - logR
        si = s + logR
        out = 0.5 * np.exp(2 * s)
        m = (so > 0) & (so <= L)
        x = np.exp(so[m])
        psi = 0.5 * x * x * so[m] + sum(a * x ** p for a, p in zip(self.outer_coef, OUTER_POWERS))
        out[m] = self.R ** 2 * (0.5 * x * x - self.c1 * psi)
        m = (si < 0) & (si >= -L)
        x = np.exp(si[m])
        psi = 0.5 * x * x * si[m] + sum(a * x ** p for a, p in zip(self.inner_coef, INNER_POWERS))
        out[m] = (0.5 * x * x + self.c1 * psi) / self.R ** 2
        edge_o, edge_i = self._edge_values
        m = so > L
        if np.any(m):
            X0 = math.exp(L)
            base = 0.5 - self.c1 * (0.5 * L + sum(a * math.exp((p - 2) * L)
                                                   for a, p in zip(self.outer_coef, OUTER_POWERS)))
            y = np.expm1(so[m] - L)
            F = _cutoff_taylor_derivs(edge_o[1:], y)[0]
            out[m] = self.R ** 2 * X0 * X0 * (base + F)
        m = si < -L
        if np.any(m):
            x0 = math.exp(-L)
            base = 0.5 + self.c1 * (-0.5 * L + sum(a * math.exp(-(p - 2) * L)
                                                    for a, p in zip(self.inner_coef, INNER_POWERS)))
            y = -INNER_STRETCH * np.expm1(si[m] + L)
            coef = np.array([edge_i[j] * (-1.0 / INNER_STRETCH) ** j for j in range(1, 5)])
            F = _cutoff_taylor_derivs(coef, y)[0]
            out[m] = x0 * x0 * (base + F) / self.R ** 2
        return out

    def default_samples(self, n: int = 10000) -> np.ndarray:
        """Log-radius samples: a uniform sweep plus dense sampling of every junction."""
        logR = math.log(self.R)
        Lt = self.log_R_tilde
        sweep = np.linspace(-Lt - 2.0, Lt + 2.0, n)
        dense = []
        for centre in (logR, -logR):
            dense.append(centre + np.linspace(-0.5, 0.5, 401))
        for sign in (1.0, -1.0):
            start = sign * (logR + self.log_len)
            dense.append(start + sign * np.linspace(-0.5, math.log(3.0) + 0.5, 801))
        return np.unique(np.concatenate([sweep, *dense]))

    def to_json(self) -> str:
        return json.dumps({"c": self.c, "R": self.R, "c1": self.c1,
                           "outer_coef": list(self.outer_coef), "inner_coef": list(self.inner_coef),
                           "meta": self.meta})

    @classmethod
    def from_json(cls, text: str) -> "CutoffProfile":
        d = json.loads(text)
        return cls(d["c"], d["R"], d["c1"], tuple(d["outer_coef"]), tuple(d["inner_coef"]),
                   d.get("meta", {}))


def _unit_constant(outer: np.ndarray, inner: np.ndarray) -> float:
    """Largest ratio violation/c1 of P4-P6 for a profile with small c1."""
    probe = CutoffProfile(1.0, 2.0, 1e-3, tuple(outer), tuple(inner))
    q = probe.property_quantities(probe.default_samples(20000))
    worst = max(np.max(np.abs(q["r_dlog"])), np.max(np.abs(q["r2_bilap"])),
                np.max(-q["dq_over_r"]), np.max(-q["d2q"]))
    return float(worst) / probe.c1


def build_cutoff(c: float, R: float) -> CutoffProfile:
    """Construct q_{c,R}.

    c1 is chosen as c / (1.05 K), where K is the measured ratio between the
    largest P4-P6 deviation and c1 of the unit construction.
    """
    if not c > 0:
        raise ValueError("c must be positive")
    if not R > 1:
        raise ValueError("R must exceed 1")
    outer = matching_coefficients(OUTER_POWERS)
    inner = matching_coefficients(INNER_POWERS)
    K = _unit_constant(outer, inner)
    c1 = c / (1.05 * K)
    return CutoffProfile(float(c), float(R), c1, tuple(outer), tuple(inner), {"unit_constant": K})


@dataclass(frozen=True)
class PropertyCheck:
    name: str
    ok: bool
    measured: float
    bound: float
    offending: tuple[float, ...] = ()


@dataclass(frozen=True)
class CutoffReport:
    checks: tuple[PropertyCheck, ...]
    fd_discrepancy: float

    @property
    def ok(self) -> bool:
        return all(c.ok for c in self.checks)

    def by_name(self) -> dict[str, PropertyCheck]:
        return {c.name: c for c in self.checks}


def _offending(mask: np.ndarray, s: np.ndarray, limit: int = 5) -> tuple[float, ...]:
    return tuple(float(np.exp(x)) if x < 700 else math.inf for x in s[mask][:limit])


def verify_cutoff(profile: CutoffProfile, samples: np.ndarray | None = None,
                  p3_bound: float = 10.0) -> CutoffReport:
    """Check P1-P6 on log-radius samples (default: profile.default_samples()).

    Samples are values of log r so that radii beyond double range can be
    probed.  P3 is reported with its measured constants against p3_bound.
    """
    s = profile.default_samples() if samples is None else np.asarray(samples, dtype=float)
    p = profile.scaled_derivatives(s)
    quant = profile.property_quantities(s)
    c = profile.c
    logR = math.log(profile.R)
    checks = []

    plateau = np.abs(s) <= logR
    bad = plateau & ((p[1] != 1.0) | (p[2] != 1.0) | (p[3] != 0.0) | (p[4] != 0.0))
    sp = s[plateau]
    rr = np.exp(sp)
    qv = profile.q(rr)
    value_err = float(np.max(np.abs(qv / (0.5 * rr * rr) - 1.0))) if sp.size else 0.0
    checks.append(PropertyCheck("P1", not bad.any() and value_err <= 1e-14, value_err, 1e-14,
                                _offending(bad, s)))

    const = np.abs(s) >= profile.log_R_tilde
    bad = const & np.any(p[1:] != 0.0, axis=0)
    checks.append(PropertyCheck("P2", not bad.any() and bool(const.any()), float(bad.sum()), 0.0,
                                _offending(bad, s)))

    m3 = float(max(np.max(np.abs(p[1])), np.max(np.abs(p[2]))))
    checks.append(PropertyCheck("P3", m3 <= p3_bound, m3, p3_bound))

    low = np.minimum(p[1], p[2])
    bad = low < -c
    checks.append(PropertyCheck("P4", not bad.any(), float(-low.min()), c, _offending(bad, s)))

    bil = np.abs(quant["r2_bilap"])
    bad = bil > c
    checks.append(PropertyCheck("P5", not bad.any(), float(bil.max()), c, _offending(bad, s)))

    dl = np.abs(quant["r_dlog"])
    bad = dl > c
    checks.append(PropertyCheck("P6", not bad.any(), float(dl.max()), c, _offending(bad, s)))

    # finite-difference cross-check of q' and q'' where q is representable
    probe = s[np.abs(s) < 300.0][:: max(1, s.size // 2000)]
    r = np.exp(probe)
    eps = 1e-5
    d1 = (profile.q(r * (1 + eps)) - profile.q(r * (1 - eps))) / (2 * eps * r)
    d2 = (profile.dq(r * (1 + eps)) - profile.dq(r * (1 - eps))) / (2 * eps * r)
    scale1 = np.maximum(np.abs(profile.dq(r)), r)
    fd = float(max(np.max(np.abs(d1 - profile.dq(r)) / scale1),
                   np.max(np.abs(d2 - profile.d2q(r)))))
    return CutoffReport(tuple(checks), fd)


def apply_a(profile: CutoffProfile, lam: float, grid: RadialGrid, g: np.ndarray) -> np.ndarray:
    """A(lam) g = q'(r/lam) g_r."""
    if not lam > 0:
        raise ValueError("scale must be positive")
    p = profile.scaled_derivatives(grid.s - math.log(lam))
    return p[1] * grid.d_ds(g) / lam


def apply_a_underline(profile: CutoffProfile, lam: float, grid: RadialGrid,
                      g: np.ndarray) -> np.ndarray:
    """A_(lam) g = (q''(r/lam)/(2 lam) + q'(r/lam)/(2r)) g + q'(r/lam) g_r."""
    if not lam > 0:
        raise ValueError("scale must be positive")
    p = profile.scaled_derivatives(grid.s - math.log(lam))
    g = np.asarray(g, dtype=float)
    return (0.5 * (p[2] + p[1]) * g + p[1] * grid.d_ds(g)) / lam


@dataclass(frozen=True)
class VirialSample:
    field: FieldState
    rho: float
    rho_prime: float = 0.0

    def __post_init__(self) -> None:
        if not self.rho > 0:
            raise ValueError("rho must be positive")


def virial_functional(sample: VirialSample) -> float:
    """<u_t | chi_rho^2 r u_r>."""
    f = sample.field
    g = f.grid
    weight = chi(g.nodes / sample.rho) ** 2
    return float(g.ds_weights @ (g.nodes ** 2 * f.u_dot * g.d_ds(f.u) * weight))


def _cutoff_weight(grid: RadialGrid, rho: float) -> np.ndarray:
    x = grid.nodes / rho
    return chi(x) * x * chi(x, 1)


def virial_error_omega(sample: VirialSample) -> float:
    """Cutoff error of the virial identity, supported on rho <= r <= 2 rho."""
    f = sample.field
    g = f.grid
    w = _cutoff_weight(g, sample.rho)
    us = g.d_ds(f.u)
    r2 = g.nodes ** 2
    cross = float(g.ds_weights @ (r2 * f.u_dot * us * w))
    bulk = float(g.ds_weights @ ((r2 * f.u_dot ** 2 + us ** 2
                                  - f.k ** 2 * np.sin(f.u - f.m * math.pi) ** 2) * w))
    return -2.0 * sample.rho_prime / sample.rho * cross - bulk


def kinetic_term(sample: VirialSample) -> float:
    """int (u_t chi_rho)^2 r dr."""
    f = sample.field
    g = f.grid
    return float(g.weights @ (f.u_dot * chi(g.nodes / sample.rho)) ** 2)


@dataclass(frozen=True)
class VirialResidual:
    times: np.ndarray
    lhs: np.ndarray
    rhs: np.ndarray
    kinetic: np.ndarray
    omega: np.ndarray

    @property
    def residual(self) -> np.ndarray:
        return self.lhs - self.rhs

    def max_residual(self) -> float:
        return float(np.max(np.abs(self.residual)))

    def relative_to_kinetic(self) -> float:
        return float(np.max(np.abs(self.residual)) / max(np.max(self.kinetic), 1e-300))


def virial_identity_residual(traj, rho_fn: Callable[[float], float] | float,
                             rho_prime_fn: Callable[[float], float] | None = None) -> VirialResidual:
    """Compare a centred difference of the virial functional with its predicted rate.

    The identity reads d/dt <u_t | chi_rho^2 r u_r> = -int (u_t chi_rho)^2 r dr + Omega_rho.
    """
    times = np.asarray(traj.times, dtype=float)
    if times.size < 3:
        raise ValueError("need at least three snapshots for centred differences")
    dts = np.diff(times)
    if np.max(np.abs(dts - dts[0])) > 1e-9 * dts[0]:
        raise ValueError("snapshot cadence must be uniform")
    if callable(rho_fn):
        rho = rho_fn
    else:
        rho_c = float(rho_fn)
        rho = lambda t: rho_c  # noqa: E731
    if rho_prime_fn is None:
        def rho_prime_fn(t: float, _h: float = 1e-6) -> float:
            return (rho(t + _h) - rho(t - _h)) / (2 * _h)

    vals = np.array([virial_functional(VirialSample(s, rho(t), rho_prime_fn(t)))
                     for t, s in zip(times, traj.snapshots)])
    lhs = (vals[2:] - vals[:-2]) / (times[2:] - times[:-2])
    kin, om = [], []
    for t, s in zip(times[1:-1], traj.snapshots[1:-1]):
        smp = VirialSample(s, rho(t), rho_prime_fn(t))
        kin.append(kinetic_term(smp))
        om.append(virial_error_omega(smp))
    kin = np.array(kin)
    om = np.array(om)
    return VirialResidual(times[1:-1], lhs, -kin + om, kin, om)
