"""Closed-form bubble profiles, multi-bubble algebra and interaction constants.

Convention table (k is the equivariance degree):

=====================  ==========================================
energy density         2*pi * 1/2 * (u_t^2 + u_r^2 + k^2 sin^2(u)/r^2) r dr
energy-norm squared    int (g_t^2 + g_r^2 + k^2 g^2 / r^2) r dr  (no prefactor)
pairing <f|g>          int f g r dr
E(Q)                   4*pi*k
||Lambda Q||^2         2*pi / sin(pi/k)   (k >= 2)
omega^2                8 k^2 / ||Lambda Q||^2 = 4 k^2 sin(pi/k) / pi
=====================  ==========================================

Profiles are evaluated through t = k log(r / lam), where Q = 2 arctan(e^t),
Lambda Q = k sech(t) and Q - pi = -2 arctan(e^{-t}).  This keeps full relative
precision in both tails.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Sequence

import numpy as np
from numpy.polynomial import Polynomial

from .quadrature import QuadratureSpec, QuadResult, integrate_radial

ArrayLike = float | np.ndarray

# Degree-9 smoothstep: S(0)=0, S(1)=1, first four derivatives vanish at both ends.
_SMOOTHSTEP = Polynomial([0, 0, 0, 0, 0, 126, -420, 540, -315, 70])
_SMOOTHSTEP_DERIVS = [_SMOOTHSTEP.deriv(n) if n else _SMOOTHSTEP for n in range(5)]


def _check_k(k: int) -> int:
    if int(k) != k or k < 1:
        raise ValueError(f"equivariance degree must be a positive integer, got {k!r}")
    return int(k)


def _check_scale(lam: float) -> float:
    if not lam > 0:
        raise ValueError(f"scale must be positive, got {lam!r}")
    return float(lam)


def _log_ratio(k: int, lam: float, r: ArrayLike) -> np.ndarray:
    r = np.asarray(r, dtype=float)
    if np.any(r < 0):
        raise ValueError("radius must be non-negative")
    with np.errstate(divide="ignore"):
        return k * np.log(r / lam)


def q_profile(k: int, lam: float, r: ArrayLike) -> np.ndarray:
    """The rescaled harmonic map Q(r/lam) = 2 arctan((r/lam)^k)."""
    t = _log_ratio(_check_k(k), _check_scale(lam), r)
    with np.errstate(over="ignore"):
        return 2.0 * np.arctan(np.exp(t))


def q_minus_pi(k: int, lam: float, r: ArrayLike) -> np.ndarray:
    """Q(r/lam) - pi, accurate for large r."""
    t = _log_ratio(_check_k(k), _check_scale(lam), r)
    with np.errstate(over="ignore"):
        return -2.0 * np.arctan(np.exp(-t))


def lam_q(k: int, lam: float, r: ArrayLike) -> np.ndarray:
    """Lambda Q evaluated at r/lam: r d/dr of Q(r/lam) = k sin Q = k sech(t)."""
    t = _log_ratio(_check_k(k), _check_scale(lam), r)
    with np.errstate(over="ignore"):
        return k / np.cosh(t)


def lam_lam_q(k: int, lam: float, r: ArrayLike) -> np.ndarray:
    """(r d/dr)^2 Q evaluated at r/lam: -k^2 sech(t) tanh(t)."""
    t = _log_ratio(_check_k(k), _check_scale(lam), r)
    with np.errstate(over="ignore"):
        return -k * k * np.tanh(t) / np.cosh(t)


def ulam_lam_q(k: int, lam: float, r: ArrayLike) -> np.ndarray:
    """(r d/dr + 1) Lambda Q evaluated at r/lam.

    The L2-invariant rescaling carries an extra 1/lam that callers apply.
    For k = 1 this is 4x/(1+x^2)^2 with x = r/lam.
    """
    k = _check_k(k)
    return lam_q(k, lam, r) + lam_lam_q(k, lam, r)


def chi(r: ArrayLike, n: int = 0) -> np.ndarray:
    """Smooth cutoff: 1 on [0,1], 0 on [2,inf), degree-9 smoothstep between.

    ``n`` selects the n-th derivative (0 <= n <= 4).
    """
    if not 0 <= n <= 4:
        raise ValueError("derivative order must be between 0 and 4")
    r = np.asarray(r, dtype=float)
    x = np.clip(r - 1.0, 0.0, 1.0)
    inside = (r > 1.0) & (r < 2.0)
    if n == 0:
        return np.where(r <= 1.0, 1.0, np.where(inside, 1.0 - _SMOOTHSTEP(x), 0.0))
    return np.where(inside, -_SMOOTHSTEP_DERIVS[n](x), 0.0)


def z_profile(k: int, r: ArrayLike) -> np.ndarray:
    """Localized kernel element: chi * Lambda Q for k <= 2, Lambda Q for k >= 3."""
    k = _check_k(k)
    if k >= 3:
        return lam_q(k, 1.0, r)
    return chi(r) * lam_q(k, 1.0, r)


def lam_z(k: int, r: ArrayLike) -> np.ndarray:
    """r d/dr of z_profile."""
    k = _check_k(k)
    if k >= 3:
        return lam_lam_q(k, 1.0, r)
    r = np.asarray(r, dtype=float)
    return r * chi(r, 1) * lam_q(k, 1.0, r) + chi(r) * lam_lam_q(k, 1.0, r)


def nonlinearity_f(u: ArrayLike) -> np.ndarray:
    return 0.5 * np.sin(2.0 * np.asarray(u, dtype=float))


def nonlinearity_fprime(u: ArrayLike) -> np.ndarray:
    return np.cos(2.0 * np.asarray(u, dtype=float))


@dataclass(frozen=True)
class BubbleConfig:
    """Multi-bubble data (m, iota, lam) for degree k.

    The configuration is m*pi + sum_j iota_j (Q(r/lam_j) - pi).
    """

    k: int
    m: int
    iota: tuple[int, ...] = ()
    lam: tuple[float, ...] = ()

    def __post_init__(self) -> None:
        _check_k(self.k)
        object.__setattr__(self, "m", int(self.m))
        object.__setattr__(self, "iota", tuple(int(i) for i in self.iota))
        object.__setattr__(self, "lam", tuple(float(x) for x in self.lam))
        if len(self.iota) != len(self.lam):
            raise ValueError("iota and lam must have equal length")
        if any(i not in (-1, 1) for i in self.iota):
            raise ValueError("signs must be +1 or -1")
        if any(not x > 0 for x in self.lam):
            raise ValueError("scales must be positive")
        if any(b <= a for a, b in zip(self.lam, self.lam[1:])):
            raise ValueError("scales must be strictly increasing")

    @property
    def M(self) -> int:
        return len(self.lam)

    @property
    def ell(self) -> int:
        """Sector index at the origin: m - sum(iota)."""
        return self.m - sum(self.iota)

    def with_scales(self, lam: Sequence[float]) -> "BubbleConfig":
        return BubbleConfig(self.k, self.m, self.iota, tuple(lam))

    def ratios(self) -> np.ndarray:
        lam = np.asarray(self.lam)
        return lam[:-1] / lam[1:]


def multi_bubble(config: BubbleConfig, r: ArrayLike) -> np.ndarray:
    """Evaluate m*pi + sum iota_j (Q_{lam_j}(r) - pi)."""
    r = np.asarray(r, dtype=float)
    out = np.full(r.shape, config.m * math.pi)
    for i, lam in zip(config.iota, config.lam):
        out = out + i * q_minus_pi(config.k, lam, r)
    return out


def multi_bubble_offset(config: BubbleConfig, r: ArrayLike) -> np.ndarray:
    """The configuration minus m*pi."""
    r = np.asarray(r, dtype=float)
    out = np.zeros(r.shape)
    for i, lam in zip(config.iota, config.lam):
        out = out + i * q_minus_pi(config.k, lam, r)
    return out


def multi_bubble_lam(config: BubbleConfig, r: ArrayLike) -> np.ndarray:
    """r d/dr of the configuration: sum iota_j Lambda Q(r/lam_j)."""
    r = np.asarray(r, dtype=float)
    out = np.zeros(r.shape)
    for i, lam in zip(config.iota, config.lam):
        out = out + i * lam_q(config.k, lam, r)
    return out


def interaction_scaled(config: BubbleConfig, r: ArrayLike) -> np.ndarray:
    """r^2 times the interaction force, a scale-free quantity."""
    k = config.k
    r = np.asarray(r, dtype=float)
    total = nonlinearity_f(multi_bubble_offset(config, r))
    single = np.zeros(r.shape)
    for i, lam in zip(config.iota, config.lam):
        single = single + i * nonlinearity_f(q_minus_pi(k, lam, r))
    return -k * k * (total - single)


def f_interaction(config: BubbleConfig, r: ArrayLike) -> np.ndarray:
    """-(k^2/r^2) (f(Q(m, iota, lam)) - sum iota_j f(Q_{lam_j}))."""
    r = np.asarray(r, dtype=float)
    if np.any(r <= 0):
        raise ValueError("interaction force is evaluated at r > 0 only")
    return interaction_scaled(config, r) / (r * r)


@dataclass(frozen=True)
class InteractionResult:
    value: float
    prediction: float
    rel_deviation: float
    error: float
    separated: bool


def interaction_prediction(config: BubbleConfig, j: int) -> float:
    """Leading-order value of <Lambda Q_{lam_j} | f_i> (j is 1-based)."""
    k, iota, lam = config.k, config.iota, config.lam
    pred = 0.0
    if j >= 2:
        pred -= iota[j - 2] * 8 * k * k * (lam[j - 2] / lam[j - 1]) ** k
    if j <= config.M - 1:
        pred += iota[j] * 8 * k * k * (lam[j - 1] / lam[j]) ** k
    return pred


def interaction_pairing(config: BubbleConfig, j: int, *, threshold: float = 0.1,
                        spec: QuadratureSpec | None = None) -> InteractionResult:
    """Quadrature of <Lambda Q_{lam_j} | f_i> alongside its leading-order prediction."""
    if not 1 <= j <= config.M:
        raise ValueError(f"bubble index {j} outside 1..{config.M}")
    k = config.k
    lam_j = config.lam[j - 1]
    res = integrate_radial(lambda r: lam_q(k, lam_j, r) * interaction_scaled(config, r),
                           spec or QuadratureSpec(rtol=1e-11, atol=1e-16),
                           measure="1/r", scales=config.lam)
    pred = interaction_prediction(config, j)
    ratios = config.ratios()
    separated = bool(np.all(ratios[max(j - 2, 0):j] <= threshold)) if config.M > 1 else True
    dev = abs(res.value - pred) / abs(pred) if pred != 0 else math.inf
    return InteractionResult(res.value, pred, dev, res.error, separated)


def cubic_overlap_integral(k: int, sign: int = 1,
                           spec: QuadratureSpec | None = None) -> QuadResult:
    """int_0^inf (Lambda Q)^3 * 4 r^{sign*k} dr/r, equal to 8 k^2 for either sign."""
    k = _check_k(k)
    if sign not in (-1, 1):
        raise ValueError("sign must be +1 or -1")
    return integrate_radial(lambda r: lam_q(k, 1.0, r) ** 3 * 4.0 * r ** (sign * k),
                            spec, measure="1/r")


def energy_density_static(k: int, r: ArrayLike) -> np.ndarray:
    """pi ((r Q_r)^2 + k^2 sin^2 Q) for the unit bubble; integrate against dr/r."""
    return math.pi * (lam_q(k, 1.0, r) ** 2 + k * k * np.sin(q_minus_pi(k, 1.0, r)) ** 2)


def energy_Q_quadrature(k: int, spec: QuadratureSpec | None = None) -> QuadResult:
    k = _check_k(k)
    return integrate_radial(lambda r: energy_density_static(k, r), spec, measure="1/r")


def energy_Q(k: int) -> float:
    """Energy of the harmonic map, 4 pi k."""
    return 4.0 * math.pi * _check_k(k)


def exterior_energy_Q(k: int, r: float, spec: QuadratureSpec | None = None) -> QuadResult:
    """Quadrature of the energy of (Q, 0) on (r, inf)."""
    k = _check_k(k)
    if r < 0:
        raise ValueError("radius must be non-negative")
    return integrate_radial(lambda x: energy_density_static(k, x), spec, measure="1/r", r0=r,
                            scales=(1.0,) if r < 1.0 else (r,))


def exterior_energy_closed(k: int, r: ArrayLike) -> np.ndarray:
    """Closed form 4 pi k / (1 + r^{2k}) of the exterior energy of Q."""
    k = _check_k(k)
    r = np.asarray(r, dtype=float)
    with np.errstate(over="ignore"):
        return 4.0 * math.pi * k / (1.0 + r ** (2 * k))


def norm_lam_q_sq(k: int, R: float | None = None, spec: QuadratureSpec | None = None) -> QuadResult:
    """Quadrature of int (Lambda Q)^2 r dr, over (0, R) when R is given.

    For k = 1 the full integral diverges and R is required.
    """
    k = _check_k(k)
    if R is None and k == 1:
        raise ValueError("the k = 1 norm diverges logarithmically; pass a truncation radius")
    r1 = math.inf if R is None else float(R)
    return integrate_radial(lambda r: lam_q(k, 1.0, r) ** 2, spec, measure="r", r1=r1,
                            scales=(1.0,))


def norm_lam_q_sq_closed(k: int) -> float:
    """||Lambda Q||^2 = 2 pi / sin(pi/k) for k >= 2."""
    k = _check_k(k)
    if k == 1:
        raise ValueError("the k = 1 norm diverges")
    return 2.0 * math.pi / math.sin(math.pi / k)


def truncated_norm_k1_closed(R: float) -> float:
    """int_0^R (Lambda Q)^2 r dr for k = 1."""
    return -2.0 * R * R / (1.0 + R * R) + 2.0 * math.log1p(R * R)


def omega_sq(k: int, method: str = "closed") -> float:
    """Interaction strength 8 k^2 / ||Lambda Q||^2 = 4 k^2 sin(pi/k) / pi."""
    k = _check_k(k)
    if k == 1:
        raise ValueError("omega^2 is undefined for k = 1")
    if method == "closed":
        return 4.0 * k * k * math.sin(math.pi / k) / math.pi
    if method == "quadrature":
        return 8.0 * k * k / norm_lam_q_sq(k).value
    raise ValueError(f"unknown method {method!r}")


def multi_bubble_energy(config: BubbleConfig, spec: QuadratureSpec | None = None) -> QuadResult:
    """Quadrature of the static energy of the configuration."""
    if config.M == 0:
        return QuadResult(0.0, 0.0, 0)
    k = config.k

    def density(r: np.ndarray) -> np.ndarray:
        return math.pi * (multi_bubble_lam(config, r) ** 2
                          + k * k * np.sin(multi_bubble_offset(config, r)) ** 2)

    return integrate_radial(density, spec or QuadratureSpec(rtol=1e-13, atol=1e-16),
                            measure="1/r", scales=config.lam)


def leading_order_energy(config: BubbleConfig) -> float:
    """M E(Q) + 16 k pi sum_j iota_j iota_{j+1} (lam_j / lam_{j+1})^k."""
    k = config.k
    e = config.M * energy_Q(k)
    for j in range(config.M - 1):
        e += 16 * k * math.pi * config.iota[j] * config.iota[j + 1] * (config.lam[j] / config.lam[j + 1]) ** k
    return e


def z_lam_q_pairing(k: int, spec: QuadratureSpec | None = None) -> QuadResult:
    """<Z | Lambda Q>, positive for every k."""
    k = _check_k(k)
    return integrate_radial(lambda r: z_profile(k, r) * lam_q(k, 1.0, r), spec, measure="r",
                            scales=(1.0, 2.0))


def z_cross_pairing(k: int, lam: float, mu: float, spec: QuadratureSpec | None = None) -> QuadResult:
    """<Z_lam | Lambda Q_mu> with both profiles L2-rescaled."""
    k = _check_k(k)
    lam, mu = _check_scale(lam), _check_scale(mu)
    return integrate_radial(lambda r: z_profile(k, r / lam) * lam_q(k, mu, r) / (lam * mu),
                            spec or QuadratureSpec(rtol=1e-10, atol=1e-300), measure="r",
                            scales=(lam, 2 * lam, mu))
