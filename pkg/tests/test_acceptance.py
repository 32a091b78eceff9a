"""End-to-end acceptance checks.

Each check prints one ``[PASS]`` or ``[FAIL]`` line with the measured numbers.
Run under pytest or directly with ``python tests/test_acceptance.py``.
"""
from __future__ import annotations

import math
import sys
from functools import lru_cache

import numpy as np
import pytest
from scipy.stats import chi2_contingency

from fsqkd.devices import NEW_SNSPD, OLD_SPAD, TABLE1, expected_error_rate, expected_gain, live_fraction
from fsqkd.finitekey import SecurityBudget, decoy_bounds
from fsqkd.montecarlo import brute_force_bin, sifting_probs, simulate_bins, simulate_photon_resolved
from fsqkd.postselect import (
    NoPositiveRate, arts_sweep, default_grid, max_tolerable_loss, optimize_params, predicted_rate, secure_rate,
)
from fsqkd.turbulence import (
    AtmosphericPath, ChannelModel, TransmittanceTrace, rytov_variance, sample_trace, truncated_stats,
    truncated_stats_quad,
)

BUDGET = SecurityBudget()
N_TOTAL = 3e10
ETA_T = 3e-4


def _mc_records(loss_db: float, seed: int, pulses_per_bin: int = 10_000):
    model = ChannelModel.from_loss_db(loss_db, 1.0)
    n_bins = round(N_TOTAL / pulses_per_bin)
    trace = sample_trace(model, n_bins, pulses_per_bin / 10e6, pulses_per_bin, seed=seed)
    return simulate_bins(trace, TABLE1[loss_db], NEW_SNSPD, seed=seed)[0]


def criterion_1():
    sets = [AtmosphericPath(1e-17, 100e3, 1550e-9), AtmosphericPath(6.2e-15, 3e3, 1550e-9)]
    s2 = [rytov_variance(p) for p in sets]
    ok = all(abs(v / 0.924 - 1) <= 0.01 for v in s2)
    return ok, "sigma2 = " + ", ".join(f"{v:.6f}" for v in s2) + " (target 0.924 +- 1%)"


def criterion_2(seeds=range(1, 101)):
    positive = 0
    ells = []
    for seed in seeds:
        r = secure_rate(_mc_records(40.0, seed), ETA_T, TABLE1[40.0], BUDGET)
        ells.append(r.ell)
        positive += r.ell > 0
    ok = positive >= 95
    pred = predicted_rate(ChannelModel.from_loss_db(40.0, 1.0), ETA_T, TABLE1[40.0], NEW_SNSPD, BUDGET, N_TOTAL)
    return ok, (f"{positive}/{len(ells)} seeds with l > 0 (need 95); max l = {max(ells)}; "
                f"predicted l = {pred.ell}")


@lru_cache(maxsize=None)
def _sweep(loss_db: float, seed: int = 1):
    records = _mc_records(loss_db, seed)
    grid = default_grid()
    curve, best = arts_sweep(records, grid, TABLE1[loss_db], BUDGET)
    at_t = secure_rate(records, ETA_T, TABLE1[loss_db], BUDGET)
    return curve, best, at_t


def criterion_3():
    ok = True
    parts = []
    for loss in (37.0, 40.0):
        curve, best, at_t = _sweep(loss)
        peak = float(curve.R_sec.max())
        in_window = best is not None and 1e-4 <= best <= 7e-4
        close = peak > 0 and at_t.R_sec >= 0.95 * peak
        ok &= in_window and close
        best_s = "none" if best is None else f"{best:.3g}"
        ratio = at_t.R_sec / peak if peak > 0 else math.nan
        parts.append(f"{loss:g} dB: argmax {best_s}, R(3e-4)/max = {ratio:.3f}")
    return ok, "; ".join(parts)


def criterion_4():
    zero = max_tolerable_loss(1.0, 0.0, NEW_SNSPD, BUDGET, N_TOTAL, lo=25.0, hi=50.0, tol=0.01)
    prts = max_tolerable_loss(1.0, ETA_T, NEW_SNSPD, BUDGET, N_TOTAL, lo=25.0, hi=50.0, tol=0.01)
    gap = prts - zero
    ok = abs(gap - 1.85) <= 0.35
    return ok, f"max loss {zero:.2f} dB (no cutoff) vs {prts:.2f} dB (3e-4): gap {gap:.2f} dB (target 1.85 +- 0.35)"


def criterion_5():
    ok = True
    parts = []
    for loss in (37.0, 40.0):
        model = ChannelModel.from_loss_db(loss, 1.0)
        table = predicted_rate(model, ETA_T, TABLE1[loss], NEW_SNSPD, BUDGET, N_TOTAL)
        try:
            opt = optimize_params(model, NEW_SNSPD, BUDGET, N_TOTAL, ETA_T, seed=0, restarts=4).rate
        except NoPositiveRate:
            opt = None
        opt_ell = 0 if opt is None else opt.ell
        ok &= opt_ell >= 0.99 * table.ell
        parts.append(f"{loss:g} dB: optimized l = {opt_ell}, table l = {table.ell}")
    return ok, "; ".join(parts)


def _cells(sent_bk, n_bk, m_bk, mismatched):
    return np.concatenate([(n_bk - m_bk).ravel(), m_bk.ravel(), (sent_bk - n_bk).ravel(), [mismatched]])


def _two_sample_p(a, b, pool=20):
    big = (a + b) >= pool
    A = np.append(a[big], a[~big].sum())
    B = np.append(b[big], b[~big].sum())
    if A[-1] + B[-1] == 0:
        A, B = A[:-1], B[:-1]
    return chi2_contingency(np.vstack([A, B]))[1]


def criterion_6():
    eta = 0.3
    p_min = 1.0
    for loss in (37.0, 40.0):
        src = TABLE1[loss]
        for seed in range(20):
            bf = brute_force_bin(eta, 100_000, src, NEW_SNSPD, seed)
            rec, _ = simulate_bins(TransmittanceTrace(np.array([eta]), 1e-2, 100_000), src, NEW_SNSPD, seed)
            a = _cells(bf.sent_bk, bf.n_bk, bf.m_bk, bf.mismatched)
            b = _cells(rec.sent_bk[0], rec.n_bk[0], rec.m_bk[0], rec.mismatched[0])
            p_min = min(p_min, _two_sample_p(a, b))
    worst = 0.0
    src = TABLE1[40.0]
    for suite, eta in ((NEW_SNSPD, 1e-3), (OLD_SPAD, 2e-3)):
        _, t = simulate_bins(TransmittanceTrace(np.full(10_000, eta), 1e-3, 10_000), src, suite, seed=5)
        probs = sifting_probs(src)[:6].reshape(2, 3)
        for b, basis in enumerate("XZ"):
            live = float(live_fraction(src, suite, eta, basis))
            for k in range(3):
                for obs, f in ((t.n[b, k], expected_gain), (t.m[b, k], expected_error_rate)):
                    p = probs[b, k] * live * f(src, suite, eta, k + 1, basis)
                    mean = t.N * p
                    worst = max(worst, abs(obs - mean) / math.sqrt(mean * (1 - p)))
    ok = p_min > 1e-3 and worst < 4.0
    return ok, f"min chi-square p over 40 runs = {p_min:.3g} (need > 1e-3); worst deviation at 1e8 pulses = {worst:.2f} sigma"


def criterion_7():
    model = ChannelModel(1e-4, 1.0)
    eta = sample_trace(model, 1_000_000, seed=7).bins
    F, avg = truncated_stats(model, ETA_T)
    kept = eta[eta >= ETA_T]
    zF = abs(kept.size / eta.size - F) / math.sqrt(F * (1 - F) / eta.size)
    zA = abs(kept.mean() - avg) / (kept.std(ddof=1) / math.sqrt(kept.size))
    rel = 0.0
    for t in np.logspace(-6, -1, 26):
        cf = truncated_stats(model, t)
        qd = truncated_stats_quad(model, t)
        rel = max(rel, *(abs(x / y - 1) for x, y in zip(cf, qd)))
    ok = zF < 4 and zA < 4 and rel < 1e-6 and abs(F - 0.0550) < 5e-5 and abs(avg - 4.99e-4) < 1e-6
    return ok, (f"F = {F:.6f} (z {zF:.2f}), eta_avg = {avg:.6g} (z {zA:.2f}), "
                f"closed form vs quadrature max rel {rel:.1e}")


def criterion_8(runs=500):
    model = ChannelModel.from_loss_db(40.0, 1.0)
    src = TABLE1[40.0]
    ppb = 100_000
    s1_ok = phi_ok = nontrivial = 0
    for seed in range(runs):
        trace = sample_trace(model, round(N_TOTAL / ppb), 1e-2, ppb, seed=seed)
        pr = simulate_photon_resolved(trace, src, NEW_SNSPD, seed, eta_t=ETA_T)
        est = decoy_bounds(pr.tallies, src, BUDGET)
        s1_ok += est.s_X1 <= pr.s_X1
        phi_ok += est.phi_X >= pr.phi_X
        nontrivial += est.s_X1 > 0 and est.phi_X < 0.5
    need = math.ceil(0.99 * runs)
    ok = s1_ok >= need and phi_ok >= need and nontrivial > 0
    return ok, f"s_X1 bound held {s1_ok}/{runs}, phi_X bound held {phi_ok}/{runs}, non-trivial {nontrivial}/{runs}"


CRITERIA = {
    1: ("Rytov variance of both paths", criterion_1),
    2: ("positive key at 40 dB in >= 95/100 seeds", criterion_2),
    3: ("optimal threshold window", criterion_3),
    4: ("prefixed-threshold loss gain", criterion_4),
    5: ("optimizer vs reference source rows", criterion_5),
    6: ("binned simulator vs oracles", criterion_6),
    7: ("post-selection statistics", criterion_7),
    8: ("decoy bound coverage", criterion_8),
}


def _report(n):
    title, fn = CRITERIA[n]
    ok, detail = fn()
    line = f"[{'PASS' if ok else 'FAIL'}] C{n} {title}: {detail}"
    return ok, line


@pytest.mark.parametrize("n", sorted(CRITERIA))
def test_criterion(n, capsys):
    ok, line = _report(n)
    with capsys.disabled():
        print("\n" + line)
    assert ok, line


if __name__ == "__main__":
    results = [_report(n) for n in sorted(CRITERIA)]
    for _, line in results:
        print(line)
    sys.exit(0 if all(ok for ok, _ in results) else 1)
