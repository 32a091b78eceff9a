"""Transmittance-threshold post-selection: prefixed-threshold evaluation,
threshold sweeps, the analytic rate predictor and the source optimizer."""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import NamedTuple, Sequence

import numpy as np
from scipy.optimize import minimize

from .devices import BASES, DetectorSuite, SourceParams, expected_error_rate, expected_gain, live_fraction
from .finitekey import SecurityBudget, decoy_bounds, key_length, raw_key_length
from .montecarlo import BinRecords, TallyTable, sifting_probs
from .turbulence import ChannelModel, EmptyPostSelection, truncated_stats

DEFAULT_THRESHOLD = 3e-4


class NoPositiveRate(RuntimeError):
    """No parameter choice in the search box yields a positive key."""


@dataclass(frozen=True)
class ThresholdPolicy:
    mode: str = "prefixed"
    eta_t: float = DEFAULT_THRESHOLD
    grid: tuple = ()

    def __post_init__(self):
        if self.mode not in ("prefixed", "adaptive"):
            raise ValueError(f"unknown threshold mode {self.mode!r}")
        if not 0.0 <= self.eta_t < 1.0:
            raise ValueError("eta_t must lie in [0, 1)")
        g = tuple(float(x) for x in self.grid)
        object.__setattr__(self, "grid", g)
        if self.mode == "adaptive":
            if not g:
                raise ValueError("adaptive policy needs a threshold grid")
            validate_grid(g)


def default_grid(points: int = 40, lo: float = 1e-5, hi: float = 1e-2) -> np.ndarray:
    return np.logspace(math.log10(lo), math.log10(hi), points)


def validate_grid(grid):
    g = np.asarray(grid, dtype=float)
    if g.ndim != 1 or g.size == 0:
        raise ValueError("threshold grid must be a non-empty sequence")
    if np.any(g < 0.0) or np.any(g >= 1.0):
        raise ValueError("grid thresholds must lie in [0, 1)")
    if np.any(np.diff(g) <= 0.0):
        raise ValueError("threshold grid must be strictly increasing")
    return g


POLICIES = {
    "paper-prts": ThresholdPolicy("prefixed", DEFAULT_THRESHOLD),
    "no-cutoff": ThresholdPolicy("prefixed", 0.0),
    "arts": ThresholdPolicy("adaptive", grid=tuple(default_grid())),
}


class Rate(NamedTuple):
    R_sec: float
    ell: int
    N_post: float
    eta_avg: float


@dataclass
class RateCurve:
    """Secure rate against an abscissa (threshold or mean loss in dB)."""

    abscissa_name: str
    points: list = field(default_factory=list)

    def add(self, x: float, rate: Rate):
        if self.points and x <= self.points[-1][0]:
            raise ValueError("curve abscissas must be strictly increasing")
        self.points.append((float(x), rate))

    @property
    def x(self) -> np.ndarray:
        return np.array([p[0] for p in self.points])

    @property
    def R_sec(self) -> np.ndarray:
        return np.array([p[1].R_sec for p in self.points])

    def to_csv(self) -> str:
        lines = [f"{self.abscissa_name},R_sec,l_bits,N_post,eta_avg,log10_R_sec"]
        for x, r in self.points:
            log_r = f"{math.log10(r.R_sec):.9g}" if r.R_sec > 0 else ""
            lines.append(f"{x:.9g},{r.R_sec:.9g},{r.ell},{r.N_post:.9g},{r.eta_avg:.9g},{log_r}")
        return "\n".join(lines) + "\n"


def filter_bins(bins: BinRecords, eta_t: float) -> tuple[TallyTable, int, float]:
    """Keep bins with transmittance >= eta_t.

    Returns the survivors' tallies (with ``N`` = survivors' pulses), the
    number of post-selected pulses and their sent-weighted mean transmittance.
    """
    if len(bins) == 0:
        raise ValueError("no bins to filter")
    keep = bins.eta >= eta_t
    if not keep.any():
        raise EmptyPostSelection(f"no bin reaches eta_t={eta_t:g}")
    sent = bins.sent[keep]
    tallies = TallyTable(int(sent.sum()), bins.n_bk[keep].sum(axis=0), bins.m_bk[keep].sum(axis=0))
    eta_avg = float(np.dot(bins.eta[keep], sent) / sent.sum())
    return tallies, tallies.N, eta_avg


def _distil(post: TallyTable, source, budget) -> int:
    est = decoy_bounds(post, source, budget)
    return key_length(post, est, budget)


def secure_rate(bins: BinRecords, eta_t: float, source: SourceParams,
                budget: SecurityBudget = SecurityBudget()) -> Rate:
    """Post-select at ``eta_t`` and distil: R_sec = l / N over ALL pulses sent."""
    N = int(bins.sent.sum())
    try:
        post, N_post, eta_avg = filter_bins(bins, eta_t)
    except EmptyPostSelection:
        return Rate(0.0, 0, 0, math.nan)
    ell = _distil(post, source, budget)
    return Rate(ell / N, ell, N_post, eta_avg)


class _SortedBins:
    """Suffix sums over bins sorted by transmittance, for fast sweeps."""

    def __init__(self, bins: BinRecords):
        order = np.argsort(bins.eta, kind="stable")
        self.eta = bins.eta[order]
        rev = order[::-1]
        self.sent = np.concatenate([[0], np.cumsum(bins.sent[rev])])
        self.weighted = np.concatenate([[0.0], np.cumsum(bins.eta[rev] * bins.sent[rev])])
        self.n = np.concatenate([np.zeros((1, 2, 3), np.int64), np.cumsum(bins.n_bk[rev], axis=0)])
        self.m = np.concatenate([np.zeros((1, 2, 3), np.int64), np.cumsum(bins.m_bk[rev], axis=0)])
        self.N = int(self.sent[-1])

    def survivors(self, eta_t):
        kept = self.eta.size - int(np.searchsorted(self.eta, eta_t, side="left"))
        return kept, TallyTable(int(self.sent[kept]), self.n[kept], self.m[kept])


def arts_sweep(bins: BinRecords, grid: Sequence[float], source: SourceParams,
               budget: SecurityBudget = SecurityBudget()) -> tuple[RateCurve, float | None]:
    """Evaluate the secure rate at every grid threshold on the same data.

    Returns the curve and the rate-maximizing threshold (smallest one on
    ties), or ``None`` when every point yields zero key.
    """
    grid = validate_grid(grid)
    sb = _SortedBins(bins)
    curve = RateCurve("threshold")
    for t in grid:
        kept, post = sb.survivors(t)
        if kept == 0:
            curve.add(t, Rate(0.0, 0, 0, math.nan))
            continue
        ell = _distil(post, source, budget)
        eta_avg = float(sb.weighted[kept] / sb.sent[kept])
        curve.add(t, Rate(ell / sb.N, ell, post.N, eta_avg))
    r = curve.R_sec
    best = None if r.max() <= 0.0 else float(grid[int(np.argmax(r))])
    return curve, best


def expected_tallies(source: SourceParams, suite: DetectorSuite, eta: float, N_post: float,
                     *, passive: bool = False) -> TallyTable:
    """Real-valued tallies N_post * P(sifted b, k) * {Q_k, E_k Q_k} at one transmittance,
    thinned by the detector live fraction."""
    probs = sifting_probs(source, passive)[:6].reshape(2, 3)
    n = np.empty((2, 3))
    m = np.empty((2, 3))
    for b, basis in enumerate(BASES):
        live = float(live_fraction(source, suite, eta, basis, passive=passive))
        for k in range(3):
            n[b, k] = N_post * probs[b, k] * live * expected_gain(source, suite, eta, k + 1, basis)
            m[b, k] = N_post * probs[b, k] * live * expected_error_rate(source, suite, eta, k + 1, basis)
    return TallyTable(N_post, n, np.minimum(m, n))


def _predicted(model, eta_t, source, suite, budget, N, passive):
    F, eta_avg = truncated_stats(model, eta_t)
    post = expected_tallies(source, suite, eta_avg, N * F, passive=passive)
    est = decoy_bounds(post, source, budget)
    return post, est, eta_avg


def predicted_rate(model: ChannelModel, eta_t: float, source: SourceParams, suite: DetectorSuite,
                   budget: SecurityBudget = SecurityBudget(), N: float = 3e10,
                   *, passive: bool = False) -> Rate:
    """Sampling-free rate: expected tallies at the post-selected mean
    transmittance, scaled by the surviving pulse count."""
    try:
        post, est, eta_avg = _predicted(model, eta_t, source, suite, budget, N, passive)
    except EmptyPostSelection:
        return Rate(0.0, 0, 0.0, math.nan)
    ell = key_length(post, est, budget)
    return Rate(ell / N, ell, float(post.N), eta_avg)


def predicted_raw_length(model, eta_t, source, suite, budget=SecurityBudget(), N=3e10, *, passive=False) -> float:
    """Unclamped key length of the analytic path (optimizer objective)."""
    try:
        post, est, _ = _predicted(model, eta_t, source, suite, budget, N, passive)
    except EmptyPostSelection:
        return -budget.overhead
    return raw_key_length(post, est, budget)


# --- source optimization ------------------------------------------------------

Q_X_BOUNDS = (0.1, 0.95)
P_SUM_MAX = 0.999
_BOX = [Q_X_BOUNDS, (1e-3, 1.0), (1e-3, 0.999), (1e-3, P_SUM_MAX - 1e-3), (1e-3, 0.999)]
_STARTS = (
    (0.7, 0.7, 0.4, 0.3, 0.65),
    (0.8, 0.68, 0.43, 0.36, 0.67),
    (0.6, 0.75, 0.36, 0.2, 0.63),
    (0.5, 0.5, 0.3, 0.5, 0.5),
    (0.9, 0.9, 0.2, 0.6, 0.7),
)


def _decode(x, rep_rate):
    q_x, mu1, ratio, p1, share = (float(v) for v in x)
    return SourceParams.from_free(q_x, mu1, ratio * mu1, p1, share * (P_SUM_MAX - p1), rep_rate)


def _encode(src: SourceParams):
    q_x, mu1, mu2, p1, p2 = src.free
    return np.array([q_x, mu1, mu2 / mu1, p1, p2 / (P_SUM_MAX - p1)])


@dataclass(frozen=True)
class OptimizationResult:
    source: SourceParams
    rate: Rate
    raw_length: float


def optimize_params(model: ChannelModel, suite: DetectorSuite, budget: SecurityBudget = SecurityBudget(),
                    N: float = 3e10, eta_t: float = DEFAULT_THRESHOLD, *, seed: int = 0, restarts: int = 4,
                    rep_rate: float = 10e6, passive: bool = False, extra_starts=()) -> OptimizationResult:
    """Maximize the predicted key over (q_x, mu1, mu2, p_mu1, p_mu2).

    Multi-start bounded Nelder-Mead on the unclamped key length, using the
    reparametrization mu2 = r*mu1, p_mu2 = s*(0.999 - p_mu1) so the box is
    rectangular.  Starts: a fixed set, ``extra_starts`` and ``restarts``
    uniform draws from ``seed``.  The winner is the largest objective, ties
    broken by the lexicographically smallest parameter vector, so start
    order does not matter.
    """
    def objective(x):
        try:
            src = _decode(x, rep_rate)
        except ValueError:
            return 1e30
        return -predicted_raw_length(model, eta_t, src, suite, budget, N, passive=passive)

    rng = np.random.default_rng([int(seed), 7])
    lo = np.array([b[0] for b in _BOX])
    hi = np.array([b[1] for b in _BOX])
    starts = [np.array(s, dtype=float) for s in _STARTS]
    starts += [_encode(s) for s in extra_starts]
    starts += [lo + (hi - lo) * rng.random(5) for _ in range(restarts)]

    results = []
    for x0 in starts:
        res = minimize(objective, np.clip(x0, lo, hi), method="Nelder-Mead", bounds=_BOX,
                       options=dict(maxiter=3000, maxfev=6000, xatol=1e-7, fatol=1e-4))
        results.append((float(res.fun), tuple(np.round(res.x, 12))))
    fun, xbest = min(results)
    src = _decode(xbest, rep_rate)
    rate = predicted_rate(model, eta_t, src, suite, budget, N, passive=passive)
    if rate.ell <= 0:
        raise NoPositiveRate(f"no positive key at {model.loss_db:.3g} dB (best raw length {-fun:.4g} bits)")
    return OptimizationResult(src, rate, -fun)


def max_tolerable_loss(sigma: float, eta_t: float, suite: DetectorSuite,
                       budget: SecurityBudget = SecurityBudget(), N: float = 3e10,
                       source: SourceParams | None = None, *, lo: float = 20.0, hi: float = 60.0,
                       tol: float = 0.01, seed: int = 0) -> float:
    """Largest mean channel loss (dB) with positive predicted key, by bisection.

    With ``source=None`` the source parameters are re-optimized at every loss.
    """
    def positive(loss):
        model = ChannelModel.from_loss_db(loss, sigma)
        if source is not None:
            return predicted_rate(model, eta_t, source, suite, budget, N).ell > 0
        try:
            optimize_params(model, suite, budget, N, eta_t, seed=seed, restarts=0)
        except NoPositiveRate:
            return False
        return True

    if not positive(lo):
        raise NoPositiveRate(f"no positive key even at {lo} dB")
    if positive(hi):
        return hi
    while hi - lo > tol:
        mid = 0.5 * (lo + hi)
        if positive(mid):
            lo = mid
        else:
            hi = mid
    return lo
