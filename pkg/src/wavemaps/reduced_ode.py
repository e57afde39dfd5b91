"""Leading-order modulation dynamics for K interacting bubbles, k >= 2.

    lam_j' = beta_j,
    beta_j' = -iota_j iota_{j+1} omega^2 lam_j^{k-1} / lam_{j+1}^k
              + iota_j iota_{j-1} omega^2 lam_{j-1}^k / lam_j^{k+1},

with lam_0 = 0 and lam_{K+1} = inf, so the end bubbles feel one neighbour.
The sign -iota_j iota_{j+1} makes opposite-sign neighbours attract: the
inner scale grows and the outer one shrinks.
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np

from .profiles import omega_sq


@dataclass(frozen=True)
class OdeState:
    lam: tuple[float, ...]
    beta: tuple[float, ...]

    def __post_init__(self) -> None:
        object.__setattr__(self, "lam", tuple(float(x) for x in self.lam))
        object.__setattr__(self, "beta", tuple(float(x) for x in self.beta))
        if len(self.lam) != len(self.beta):
            raise ValueError("scales and rates differ in length")
        if any(not x > 0 for x in self.lam):
            raise ValueError("scales must be positive")
        if any(b <= a for a, b in zip(self.lam, self.lam[1:])):
            raise ValueError("scales must be strictly increasing")

    def as_array(self) -> np.ndarray:
        return np.array(self.lam + self.beta)


def _check(k: int, iota: Sequence[int], K: int) -> None:
    if k < 2:
        raise ValueError("the reduced model is stated for k >= 2")
    if len(iota) != K:
        raise ValueError("one sign per bubble is required")


def _rhs(y: np.ndarray, k: int, iota: Sequence[int], w2: float) -> np.ndarray:
    K = y.size // 2
    lam, beta = y[:K], y[K:]
    acc = np.zeros(K)
    for j in range(K):
        if j + 1 < K:
            acc[j] -= iota[j] * iota[j + 1] * w2 * lam[j] ** (k - 1) / lam[j + 1] ** k
        if j > 0:
            acc[j] += iota[j] * iota[j - 1] * w2 * lam[j - 1] ** k / lam[j] ** (k + 1)
    return np.concatenate([beta, acc])


def ode_rhs(state: OdeState, k: int, iota: Sequence[int]) -> tuple[np.ndarray, np.ndarray]:
    """Return (lam', beta')."""
    _check(k, iota, len(state.lam))
    out = _rhs(state.as_array(), k, iota, omega_sq(k))
    K = len(state.lam)
    return out[:K], out[K:]


@dataclass
class OdeSeries:
    times: np.ndarray
    lam: np.ndarray
    beta: np.ndarray
    halted: bool
    halt_time: float | None
    k: int
    iota: tuple[int, ...]

    def final(self) -> OdeState | None:
        try:
            return OdeState(tuple(self.lam[-1]), tuple(self.beta[-1]))
        except ValueError:
            return None

    def to_csv(self, path: str | Path) -> Path:
        path = Path(path)
        K = self.lam.shape[1]
        with path.open("w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["t"] + [f"lambda_{j}" for j in range(1, K + 1)]
                       + [f"beta_{j}" for j in range(1, K + 1)])
            for t, lam, beta in zip(self.times, self.lam, self.beta):
                w.writerow([repr(float(t))] + [repr(float(x)) for x in lam]
                           + [repr(float(x)) for x in beta])
        return path


def integrate(state0: OdeState, k: int, iota: Sequence[int], T: float, dt: float) -> OdeSeries:
    """Classical RK4 with fixed step; halts when the scales lose their ordering.

    A negative T integrates backward in time.
    """
    K = len(state0.lam)
    _check(k, iota, K)
    if not dt > 0:
        raise ValueError("dt must be positive")
    n = int(math.ceil(abs(T) / dt - 1e-9))
    if n == 0:
        raise ValueError("|T| must be positive")
    h = T / n
    w2 = omega_sq(k)
    iota = tuple(int(i) for i in iota)
    y = state0.as_array()
    ts, ys = [0.0], [y.copy()]
    halted, halt_time = False, None
    for step in range(n):
        k1 = _rhs(y, k, iota, w2)
        k2 = _rhs(y + 0.5 * h * k1, k, iota, w2)
        k3 = _rhs(y + 0.5 * h * k2, k, iota, w2)
        k4 = _rhs(y + h * k3, k, iota, w2)
        y_new = y + h / 6.0 * (k1 + 2 * k2 + 2 * k3 + k4)
        lam = y_new[:K]
        if not np.all(np.isfinite(y_new)) or np.any(lam <= 0) or np.any(np.diff(lam) <= 0):
            halted, halt_time = True, (step + 1) * h
            break
        y = y_new
        ts.append((step + 1) * h)
        ys.append(y.copy())
    ys = np.array(ys)
    return OdeSeries(np.array(ts), ys[:, :K], ys[:, K:], halted, halt_time, k, iota)


@dataclass(frozen=True)
class Comparison:
    times: np.ndarray
    rel_deviation: np.ndarray
    window_end: float
    max_ratio: float

    def max_deviation(self) -> float:
        return float(np.max(self.rel_deviation)) if self.rel_deviation.size else 0.0

    def to_csv(self, path: str | Path) -> Path:
        path = Path(path)
        K = self.rel_deviation.shape[1] if self.rel_deviation.ndim == 2 else 0
        with path.open("w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["t"] + [f"rel_dev_lambda_{j}" for j in range(1, K + 1)])
            for t, row in zip(self.times, self.rel_deviation):
                w.writerow([repr(float(t))] + [repr(float(x)) for x in row])
        return path


def compare_with_pde(series: OdeSeries, times: Sequence[float], lam: np.ndarray,
                     max_ratio: float = 0.5) -> Comparison:
    """Relative deviation of PDE-tracked scales from the ODE, interpolated to the PDE times.

    The window of validity ends at the first time where some tracked
    neighbour ratio exceeds ``max_ratio`` or the ODE series ends.
    """
    t = np.asarray(times, dtype=float)
    lam = np.atleast_2d(np.asarray(lam, dtype=float))
    if lam.shape[1] != series.lam.shape[1]:
        raise ValueError("PDE and ODE bubble counts differ")
    inside = t <= series.times[-1] + 1e-12
    if lam.shape[1] > 1:
        ratios = lam[:, :-1] / lam[:, 1:]
        inside &= np.cumprod(np.all(ratios <= max_ratio, axis=1)).astype(bool)
    else:
        inside &= True
    t_in = t[inside]
    ode = np.column_stack([np.interp(t_in, series.times, series.lam[:, j])
                           for j in range(lam.shape[1])]) if t_in.size else np.zeros((0, lam.shape[1]))
    dev = np.abs(lam[inside] - ode) / ode if t_in.size else np.zeros((0, lam.shape[1]))
    end = float(t_in[-1]) if t_in.size else float(t[0])
    return Comparison(t_in, dev, end, max_ratio)
