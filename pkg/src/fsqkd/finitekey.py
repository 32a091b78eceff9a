"""Finite-key length for decoy-state BB84 with vacuum + weak decoy.

Bounds follow the standard three-intensity finite-key analysis: Hoeffding
deviations on every per-intensity count, vacuum and single-photon lower
bounds in both bases, a single-photon error upper bound in the test basis,
and a sampling correction when transferring its error rate to the key basis.
"""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .devices import SourceParams
from .montecarlo import TallyTable

OK = "ok"
NO_SIFTED_DATA = "no sifted data"
ESTIMATION_FAILED = "estimation failed"


@dataclass(frozen=True)
class SecurityBudget:
    eps_sec: float = 1e-9
    eps_cor: float = 1e-15
    f_EC: float = 1.16

    def __post_init__(self):
        if not (0.0 < self.eps_sec < 1.0 and 0.0 < self.eps_cor < 1.0):
            raise ValueError("eps_sec and eps_cor must lie in (0, 1)")
        if self.f_EC < 1.0:
            raise ValueError(f"f_EC must be >= 1, got {self.f_EC}")

    @property
    def overhead(self) -> float:
        """Bits lost to the secrecy and correctness terms, independent of data."""
        return 6.0 * math.log2(21.0 / self.eps_sec) + math.log2(2.0 / self.eps_cor)


@dataclass(frozen=True)
class DecoyEstimates:
    s_X0: float
    s_X1: float
    s_Z1: float
    v_Z1: float
    phi_X: float
    status: str = OK

    @property
    def ok(self) -> bool:
        return self.status == OK


def binary_entropy(x: float) -> float:
    if not 0.0 <= x <= 1.0:
        raise ValueError(f"binary entropy needs x in [0, 1], got {x}")
    if x == 0.0 or x == 1.0:
        return 0.0
    return -x * math.log2(x) - (1.0 - x) * math.log2(1.0 - x)


def hoeffding_delta(n: float, eps: float) -> float:
    return math.sqrt(0.5 * n * math.log(21.0 / eps))


def gamma_term(eps: float, ratio: float, c: float, d: float) -> float:
    """Random-sampling correction for transferring an error ratio from a
    sample of size ``c`` to one of size ``d`` (zero when the ratio is 0 or 1)."""
    if ratio <= 0.0 or ratio >= 1.0:
        return 0.0
    pq = ratio * (1.0 - ratio)
    arg = (c + d) / (c * d * pq) * (21.0 ** 2 / eps ** 2)
    return math.sqrt((c + d) * pq / (c * d * math.log(2.0)) * math.log2(arg))


def _scaled(counts, source, delta):
    w = np.exp(source.mu) / np.asarray(source.p_mu)
    return w * (counts - delta), w * (counts + delta)


def _vacuum_and_single(counts, source, delta):
    mu1, mu2, mu3 = source.mu
    tau0 = source.photon_number_prob(0)
    tau1 = source.photon_number_prob(1)
    lo, hi = _scaled(np.asarray(counts, dtype=float), source, delta)
    s0 = max(0.0, tau0 * (mu2 * lo[2] - mu3 * hi[1]) / (mu2 - mu3))
    denom = mu1 * (mu2 - mu3) - mu2 ** 2 + mu3 ** 2
    if denom <= 0.0:
        raise ValueError("degenerate intensities: mu1 (mu2 - mu3) must exceed mu2^2 - mu3^2")
    bracket = lo[1] - hi[2] - (mu2 ** 2 - mu3 ** 2) / mu1 ** 2 * (hi[0] - s0 / tau0)
    s1 = max(0.0, tau1 * mu1 * bracket / denom)
    return s0, s1


def decoy_bounds(tallies: TallyTable, source: SourceParams, budget: SecurityBudget = SecurityBudget(),
                 *, fluctuations: bool = True) -> DecoyEstimates:
    """Vacuum/single-photon bounds and the key-basis phase-error bound.

    ``fluctuations=False`` drops the Hoeffding deviations (infinite-statistics
    limit); the sampling correction on the phase error is dropped with them.
    """
    n, m = tallies.n, tallies.m
    n_X, n_Z, m_Z = float(tallies.n_X), float(tallies.n_Z), float(tallies.m_Z)
    delta = hoeffding_delta if fluctuations else (lambda *_: 0.0)

    s_X0, s_X1 = _vacuum_and_single(n[0], source, delta(n_X, budget.eps_sec))
    # lower bounds cannot jointly exceed the observed block
    s_X1 = min(s_X1, max(0.0, n_X - s_X0))
    _, s_Z1 = _vacuum_and_single(n[1], source, delta(n_Z, budget.eps_sec))

    mu1, mu2, mu3 = source.mu
    lo, hi = _scaled(np.asarray(m[1], dtype=float), source, delta(m_Z, budget.eps_sec))
    v_Z1 = max(0.0, source.photon_number_prob(1) * (hi[1] - lo[2]) / (mu2 - mu3))
    if s_Z1 > 0.0:
        v_Z1 = min(v_Z1, s_Z1)

    if n_X <= 0:
        return DecoyEstimates(s_X0, s_X1, s_Z1, v_Z1, 0.5, NO_SIFTED_DATA)
    if s_Z1 <= 0.0:
        return DecoyEstimates(s_X0, s_X1, s_Z1, v_Z1, 0.5, ESTIMATION_FAILED)
    ratio = v_Z1 / s_Z1
    if s_X1 <= 0.0 or ratio >= 0.5:
        phi = 0.5
    else:
        g = gamma_term(budget.eps_sec, ratio, s_Z1, s_X1) if fluctuations else 0.0
        phi = min(0.5, ratio + g)
    return DecoyEstimates(s_X0, s_X1, s_Z1, v_Z1, phi)


def raw_key_length(tallies: TallyTable, est: DecoyEstimates, budget: SecurityBudget = SecurityBudget()) -> float:
    """Unclamped, un-floored key length (useful as a smooth objective)."""
    n_X = float(tallies.n_X)
    if n_X <= 0:
        return -budget.overhead
    e_obs = min(1.0, float(tallies.m_X) / n_X)
    return (est.s_X0 + est.s_X1 - est.s_X1 * binary_entropy(est.phi_X)
            - n_X * budget.f_EC * binary_entropy(e_obs) - budget.overhead)


def key_length(tallies: TallyTable, est: DecoyEstimates, budget: SecurityBudget = SecurityBudget()) -> int:
    """Secure key length in bits, floored and clamped at zero."""
    if not est.ok:
        return 0
    ell = raw_key_length(tallies, est, budget)
    if not math.isfinite(ell):
        raise ValueError("key length is not finite")
    return max(0, math.floor(ell))


def finite_key_rate(ell: float, N: float) -> float:
    if not N > 0:
        raise ValueError("N must be positive")
    return ell / N
