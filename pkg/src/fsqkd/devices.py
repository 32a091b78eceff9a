"""Source parameters, receiver/detector stack, and the per-pulse gain and
error model shared by the simulator and the analytic rate predictor."""
from __future__ import annotations

import math
from dataclasses import dataclass, field, replace
from types import MappingProxyType

import numpy as np

BASES = ("X", "Z")
# H,V measure the rectilinear (key) basis, D,A the diagonal (test) basis
BASIS_DETECTORS = {"X": ("H", "V"), "Z": ("D", "A")}
DETECTOR_BIT = {"H": 0, "V": 1, "D": 0, "A": 1}
DETECTOR_BASIS = {d: b for b, pair in BASIS_DETECTORS.items() for d in pair}
BACKGROUND_ERROR = 0.5
PROB_TOL = 1e-9


@dataclass(frozen=True)
class SourceParams:
    """Alice's settings: basis bias, three intensities (last one vacuum) and
    their probabilities.  ``rep_rate`` is in pulses per second."""

    q_x: float
    mu: tuple[float, float, float]
    p_mu: tuple[float, float, float]
    rep_rate: float = 10e6

    def __post_init__(self):
        mu = tuple(float(m) for m in self.mu)
        p = tuple(float(x) for x in self.p_mu)
        if len(mu) != 3 or len(p) != 3:
            raise ValueError("mu and p_mu need exactly three entries")
        object.__setattr__(self, "mu", mu)
        object.__setattr__(self, "p_mu", p)
        if not 0.0 < self.q_x < 1.0:
            raise ValueError(f"q_x must lie in (0, 1), got {self.q_x}")
        if mu[2] != 0.0:
            raise ValueError(f"mu3 must be the vacuum intensity 0, got {mu[2]}")
        if not mu[0] > mu[1] > mu[2]:
            raise ValueError(f"intensities must satisfy mu1 > mu2 > mu3 = 0, got {mu}")
        if not all(0.0 < x < 1.0 for x in p):
            raise ValueError(f"each p_mu must lie in (0, 1), got {p}")
        if abs(sum(p) - 1.0) > PROB_TOL:
            raise ValueError(f"p_mu must sum to 1, got {sum(p)!r}")
        if not self.rep_rate > 0.0:
            raise ValueError("rep_rate must be positive")

    @classmethod
    def from_free(cls, q_x, mu1, mu2, p_mu1, p_mu2, rep_rate=10e6) -> "SourceParams":
        """Build from the five optimizable numbers; vacuum fills the remainder."""
        return cls(q_x, (mu1, mu2, 0.0), (p_mu1, p_mu2, 1.0 - p_mu1 - p_mu2), rep_rate)

    @property
    def q_z(self) -> float:
        return 1.0 - self.q_x

    @property
    def free(self) -> tuple[float, float, float, float, float]:
        return (self.q_x, self.mu[0], self.mu[1], self.p_mu[0], self.p_mu[1])

    def basis_prob(self, basis: str) -> float:
        return self.q_x if basis == "X" else self.q_z

    def photon_number_prob(self, n: int) -> float:
        """tau_n: probability that a pulse carries n photons, over intensities."""
        return sum(p * math.exp(-m) * m ** n / math.factorial(n) for m, p in zip(self.mu, self.p_mu))


TABLE1 = MappingProxyType({
    37.0: SourceParams.from_free(0.795, 0.678, 0.293, 0.361, 0.429),
    40.0: SourceParams.from_free(0.677, 0.701, 0.281, 0.246, 0.490),
})


@dataclass(frozen=True)
class Detector:
    Y0: float
    b: float = 0.0
    eta_det: float = 1.0

    def __post_init__(self):
        if self.Y0 < 0.0 or self.b < 0.0:
            raise ValueError("background yield and slope must be non-negative")
        if not 0.0 <= self.eta_det <= 1.0:
            raise ValueError("eta_det must lie in [0, 1]")
        if self.Y0 + self.b > 1.0:
            raise ValueError("background click probability Y0 + b*eta exceeds 1 on [0, 1]")

    def background(self, eta):
        return self.Y0 + self.b * np.asarray(eta, dtype=float)


@dataclass(frozen=True)
class DetectorSuite:
    """Bob's receiver: four threshold detectors plus shared optics.

    ``dead_time`` and ``jitter`` are in seconds; jitter is carried for
    reporting only.
    """

    detectors: MappingProxyType
    eta_bob: float
    e_mis: float
    dead_time: float = 0.0
    jitter: float = 0.0
    name: str = field(default="custom", compare=False)

    def __post_init__(self):
        dets = dict(self.detectors)
        if set(dets) != set(DETECTOR_BIT):
            raise ValueError(f"need exactly the detectors {sorted(DETECTOR_BIT)}, got {sorted(dets)}")
        object.__setattr__(self, "detectors", MappingProxyType(dets))
        for name in ("eta_bob", "e_mis"):
            if not 0.0 <= getattr(self, name) <= 1.0:
                raise ValueError(f"{name} must lie in [0, 1]")
        if self.dead_time < 0.0 or self.jitter < 0.0:
            raise ValueError("dead_time and jitter must be non-negative")

    def basis_efficiency(self, basis: str) -> float:
        a, b = BASIS_DETECTORS[basis]
        return 0.5 * (self.detectors[a].eta_det + self.detectors[b].eta_det)

    def background(self, basis: str, eta):
        """Aggregate background click probability of a basis pair, clamped to [0, 1]."""
        a, b = BASIS_DETECTORS[basis]
        total = self.detectors[a].background(eta) + self.detectors[b].background(eta)
        return np.clip(total, 0.0, 1.0)

    def with_overrides(self, **kw) -> "DetectorSuite":
        return replace(self, **kw)


def _suite(name, y0, b, eta_det, e_mis, dead_time, jitter):
    dets = {d: Detector(Y0=y, b=s, eta_det=eta_det) for d, y, s in zip("HVDA", y0, b)}
    return DetectorSuite(MappingProxyType(dets), eta_bob=0.42, e_mis=e_mis,
                         dead_time=dead_time, jitter=jitter, name=name)


NEW_SNSPD = _suite("new-snspd", [7.1e-7, 6.7e-7, 6.2e-7, 6.1e-7], [0.0] * 4,
                   eta_det=0.8, e_mis=0.001, dead_time=80e-9, jitter=50e-12)
OLD_SPAD = _suite("old-spad", [76e-7, 310e-7, 670e-7, 670e-7], [2.6e-4, 1.8e-4, 2.7e-4, 1.8e-4],
                  eta_det=0.1, e_mis=0.003, dead_time=9000e-9, jitter=200e-12)
BUILTIN_SUITES = MappingProxyType({s.name: s for s in (NEW_SNSPD, OLD_SPAD)})


def system_transmittance(suite: DetectorSuite, eta, detector: str = "H"):
    """Channel transmittance times receiver optics times one detector's efficiency."""
    return np.asarray(eta, dtype=float) * suite.eta_bob * suite.detectors[detector].eta_det


def _signal_click(source, suite, eta, k, basis):
    if k not in (1, 2, 3):
        raise ValueError(f"intensity index must be 1, 2 or 3, got {k}")
    eta_sys = np.asarray(eta, dtype=float) * suite.eta_bob * suite.basis_efficiency(basis)
    return -np.expm1(-source.mu[k - 1] * eta_sys)


def expected_gain(source: SourceParams, suite: DetectorSuite, eta, k: int, basis: str = "X"):
    """Q_k(eta) = 1 - (1 - Y_bg(eta)) exp(-mu_k eta_sys)."""
    x = _signal_click(source, suite, eta, k, basis)
    y = suite.background(basis, eta)
    return y + (1.0 - y) * x


def expected_error_rate(source: SourceParams, suite: DetectorSuite, eta, k: int, basis: str = "X"):
    """E_k Q_k = e0 Y_bg(eta) + e_mis (1 - exp(-mu_k eta_sys)), e0 = 1/2."""
    x = _signal_click(source, suite, eta, k, basis)
    return BACKGROUND_ERROR * suite.background(basis, eta) + suite.e_mis * x


def blind_slots(suite: DetectorSuite, rep_rate: float) -> int:
    """Pulse slots a detector misses after a click; 0 when the dead time fits in one period."""
    return max(0, math.ceil(suite.dead_time * rep_rate - 1e-9) - 1)


def detector_click_prob(source: SourceParams, suite: DetectorSuite, eta, detector: str):
    """Per-pulse probability that ``detector`` would fire when Bob measures in its
    basis, averaged over Alice's settings (each pulse favours either detector
    of the pair with probability 1/2)."""
    bg = suite.detectors[detector].background(eta)
    eta_sys = system_transmittance(suite, eta, detector)
    total = 0.0
    for mu, p in zip(source.mu, source.p_mu):
        signal = -0.5 * np.expm1(-mu * eta_sys)
        total = total + p * (1.0 - (1.0 - bg) * (1.0 - signal))
    return np.clip(total, 0.0, 1.0)


def live_fraction(source: SourceParams, suite: DetectorSuite, eta, basis: str, *, passive: bool = False):
    """Steady-state probability that the detectors of ``basis`` are not dead.

    Non-paralyzable dead time of B slots with per-slot firing probability r
    gives one click per B + 1/r slots, so a would-be click is kept with
    probability 1 / (1 + r B).  The two detectors of a pair are averaged.
    """
    blind = blind_slots(suite, source.rep_rate)
    eta = np.asarray(eta, dtype=float)
    if blind == 0:
        return np.ones_like(eta)
    q_bob = 0.5 if passive else source.basis_prob(basis)
    fractions = [1.0 / (1.0 + q_bob * detector_click_prob(source, suite, eta, d) * blind)
                 for d in BASIS_DETECTORS[basis]]
    return 0.5 * (fractions[0] + fractions[1])
