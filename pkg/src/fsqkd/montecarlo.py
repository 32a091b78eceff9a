"""Tally-level simulation of the protocol run, a per-pulse oracle, a
photon-number-resolved oracle, and ingestion of recorded event tapes."""
from __future__ import annotations

import csv
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .devices import (
    BASES, BASIS_DETECTORS, BACKGROUND_ERROR, DETECTOR_BASIS, DETECTOR_BIT,
    DetectorSuite, SourceParams, blind_slots, expected_error_rate, expected_gain, live_fraction,
)
from .rng import chunk_generator
from .turbulence import TransmittanceTrace

SIM_STREAM = 1
PROBE_STREAM = 2
ORACLE_STREAM = 3
CHUNK_BINS = 1 << 15
BRUTE_FORCE_CAP = 10 ** 6
COUNTER_LIMIT = np.iinfo(np.int64).max


@dataclass(frozen=True, eq=False)
class TallyTable:
    """Aggregate sifted detections ``n[b, k]`` and errors ``m[b, k]``.

    Row ``b`` is the basis (0 = X, 1 = Z), column ``k`` the intensity index
    minus one.  Arrays are integer for simulated or recorded data and may be
    real-valued for expected tallies.
    """

    N: float
    n: np.ndarray
    m: np.ndarray

    def __post_init__(self):
        n = np.asarray(self.n)
        m = np.asarray(self.m)
        if n.shape != (2, 3) or m.shape != (2, 3):
            raise ValueError("tally arrays must have shape (2, 3)")
        if np.any(m < 0) or np.any(m > n):
            raise ValueError("need 0 <= m <= n for every basis and intensity")
        object.__setattr__(self, "n", n)
        object.__setattr__(self, "m", m)

    @classmethod
    def empty(cls, N=0):
        z = np.zeros((2, 3), dtype=np.int64)
        return cls(N, z, z.copy())

    @property
    def n_X(self):
        return self.n[0].sum()

    @property
    def m_X(self):
        return self.m[0].sum()

    @property
    def n_Z(self):
        return self.n[1].sum()

    @property
    def m_Z(self):
        return self.m[1].sum()

    @property
    def e_obs(self) -> float:
        return float(self.m_X / self.n_X) if self.n_X > 0 else math.nan

    def __add__(self, other: "TallyTable") -> "TallyTable":
        return TallyTable(self.N + other.N, self.n + other.n, self.m + other.m)

    def __eq__(self, other):
        if not isinstance(other, TallyTable):
            return NotImplemented
        return (self.N == other.N and np.array_equal(self.n, other.n)
                and np.array_equal(self.m, other.m))

    def to_csv(self) -> str:
        rows = ["N,basis,intensity_index,detections,errors"]
        for b, basis in enumerate(BASES):
            for k in range(3):
                rows.append(f"{int(self.N)},{basis},{k + 1},{_fmt(self.n[b, k])},{_fmt(self.m[b, k])}")
        return "\n".join(rows) + "\n"


def _fmt(x):
    if isinstance(x, (int, np.integer)):
        return str(int(x))
    return f"{float(x):.9g}"


@dataclass(frozen=True)
class BinRecord:
    """One transmittance bin.  ``sent_bk`` counts pulses whose basis was
    matched by Bob (eligible for sifting); ``mismatched`` the rest."""

    eta: float
    sent: int
    sent_bk: np.ndarray
    n_bk: np.ndarray
    m_bk: np.ndarray
    mismatched: int


@dataclass(eq=False)
class BinRecords:
    """Columnar store for many bins.

    ``eta`` is the transmittance the receiver knows for each bin; with the
    default noiseless probe it equals the true value.
    """

    eta: np.ndarray
    sent: np.ndarray
    sent_bk: np.ndarray
    n_bk: np.ndarray
    m_bk: np.ndarray
    mismatched: np.ndarray
    diagnostics: dict = field(default_factory=dict)

    def __len__(self):
        return self.eta.size

    def __getitem__(self, i) -> BinRecord:
        return BinRecord(float(self.eta[i]), int(self.sent[i]), self.sent_bk[i].copy(),
                         self.n_bk[i].copy(), self.m_bk[i].copy(), int(self.mismatched[i]))

    def __iter__(self):
        return (self[i] for i in range(len(self)))

    def select(self, mask) -> "BinRecords":
        return BinRecords(self.eta[mask], self.sent[mask], self.sent_bk[mask],
                          self.n_bk[mask], self.m_bk[mask], self.mismatched[mask])

    def tally(self) -> TallyTable:
        return TallyTable(int(self.sent.sum()), self.n_bk.sum(axis=0), self.m_bk.sum(axis=0))

    def to_csv(self) -> str:
        cols = ["bin_index", "eta", "sent", "mismatched"]
        cols += [f"{w}_{b}{k}" for w in ("sent", "n", "m") for b in BASES for k in (1, 2, 3)]
        lines = [",".join(cols)]
        for i in range(len(self)):
            vals = [str(i), f"{self.eta[i]:.9g}", str(self.sent[i]), str(self.mismatched[i])]
            for arr in (self.sent_bk, self.n_bk, self.m_bk):
                vals.extend(str(v) for v in arr[i].ravel())
            lines.append(",".join(vals))
        return "\n".join(lines) + "\n"


def sifting_probs(source: SourceParams, passive: bool = False) -> np.ndarray:
    """Category probabilities [X1, X2, X3, Z1, Z2, Z3, mismatched] for one pulse.

    Bob's basis bias equals Alice's ``q_x`` unless ``passive`` (50:50 splitter).
    """
    probs = []
    for basis in BASES:
        qa = source.basis_prob(basis)
        qb = 0.5 if passive else qa
        probs.extend(qa * qb * p for p in source.p_mu)
    probs.append(max(0.0, 1.0 - sum(probs)))
    return np.asarray(probs)


def _click_probs(source, suite, eta, passive=False):
    """Per-bin sifted detection probability Q[b, k] (dead time included) and
    conditional error probability E[b, k]."""
    eta = np.asarray(eta, dtype=float)
    Q = np.empty(eta.shape + (2, 3))
    EQ = np.empty_like(Q)
    for b, basis in enumerate(BASES):
        live = live_fraction(source, suite, eta, basis, passive=passive)
        for k in range(3):
            Q[..., b, k] = expected_gain(source, suite, eta, k + 1, basis)
            EQ[..., b, k] = expected_error_rate(source, suite, eta, k + 1, basis)
        Q[..., b, :] *= live[..., None]
        EQ[..., b, :] *= live[..., None]
    with np.errstate(invalid="ignore", divide="ignore"):
        E = np.where(Q > 0.0, EQ / Q, 0.0)
    np.clip(E, 0.0, 1.0, out=E)
    return Q, E


def _check_counters(*arrays):
    for a in arrays:
        if a.size and a.max() >= COUNTER_LIMIT:
            raise OverflowError("64-bit tally counter overflow")


def _probe(eta_true, probe_sigma, seed, chunk):
    if probe_sigma <= 0.0:
        return eta_true
    z = chunk_generator(seed, PROBE_STREAM, chunk).standard_normal(eta_true.size)
    return np.clip(eta_true * np.exp(probe_sigma * z - 0.5 * probe_sigma ** 2), np.finfo(float).tiny, 1.0)


def _simulate_chunk(eta, sent, probs, source, suite, seed, chunk, probe_sigma, passive):
    rng = chunk_generator(seed, SIM_STREAM, chunk)
    split = rng.multinomial(sent, probs)
    sent_bk = split[:, :6].reshape(-1, 2, 3)
    Q, E = _click_probs(source, suite, eta, passive)
    n_bk = rng.binomial(sent_bk, Q)
    m_bk = rng.binomial(n_bk, E)
    return _probe(eta, probe_sigma, seed, chunk), sent_bk, n_bk, m_bk, split[:, 6]


def _run_chunks(fn, n_bins, chunk_bins, threads):
    starts = list(range(0, n_bins, chunk_bins))
    jobs = [(c, s, min(s + chunk_bins, n_bins)) for c, s in enumerate(starts)]
    if threads is not None and threads > 1 and len(jobs) > 1:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            return list(pool.map(lambda j: fn(*j), jobs))
    return [fn(*j) for j in jobs]


def simulate_bins(
    trace: TransmittanceTrace,
    source: SourceParams,
    suite: DetectorSuite,
    seed: int,
    *,
    passive: bool = False,
    probe_sigma: float = 0.0,
    threads: int | None = None,
    chunk_bins: int = CHUNK_BINS,
) -> tuple[BinRecords, TallyTable]:
    """Draw sifted detection and error tallies for every bin of ``trace``.

    Per bin the pulses are split multinomially over (basis, intensity) plus a
    mismatched-basis bucket; detections are binomial with the analytic gain
    and errors binomial with the conditional error rate.  Bins are processed
    in chunks keyed on ``(seed, chunk index)``; ``chunk_bins`` is part of the
    random-stream definition, ``threads`` is not.
    """
    eta = trace.bins
    sent = np.full(eta.size, trace.pulses_per_bin, dtype=np.int64)
    probs = sifting_probs(source, passive)

    def work(c, lo, hi):
        return _simulate_chunk(eta[lo:hi], sent[lo:hi], probs, source, suite, seed, c, probe_sigma, passive)

    parts = _run_chunks(work, eta.size, chunk_bins, threads)
    records = BinRecords(
        eta=np.concatenate([p[0] for p in parts]),
        sent=sent,
        sent_bk=np.concatenate([p[1] for p in parts]),
        n_bk=np.concatenate([p[2] for p in parts]),
        m_bk=np.concatenate([p[3] for p in parts]),
        mismatched=np.concatenate([p[4] for p in parts]),
    )
    tallies = records.tally()
    _check_counters(tallies.n, tallies.m, np.asarray([tallies.N]))
    return records, tallies


def brute_force_bin(
    eta: float,
    n_pulses: int,
    source: SourceParams,
    suite: DetectorSuite,
    seed: int,
    *,
    passive: bool = False,
) -> BinRecord:
    """Pulse-by-pulse reference simulation of a single bin.

    Each pulse gets Alice's basis, bit and intensity, Bob's basis, a Poisson
    photon number, per-photon survival, a misalignment flip and independent
    background clicks on both detectors of Bob's basis; double clicks are
    settled by a fair coin.  A detector that fired stays blind for the
    following dead-time slots.
    """
    if n_pulses > BRUTE_FORCE_CAP:
        raise ValueError(f"brute_force_bin is capped at {BRUTE_FORCE_CAP} pulses")
    rng = np.random.default_rng([int(seed), ORACLE_STREAM])
    n = int(n_pulses)
    a_basis = (rng.random(n) >= source.q_x).astype(np.int8)
    b_basis = (rng.random(n) >= (0.5 if passive else source.q_x)).astype(np.int8)
    k = rng.choice(3, size=n, p=np.asarray(source.p_mu))
    bit = rng.integers(0, 2, size=n)
    photons = rng.poisson(np.asarray(source.mu)[k])

    eta_det = np.array([[suite.detectors[d].eta_det for d in BASIS_DETECTORS[b]] for b in BASES])
    flip = rng.random(n) < suite.e_mis
    target = np.where(flip, 1 - bit, bit)  # detector index within Bob's pair
    p_survive = eta * suite.eta_bob * eta_det[b_basis, target]
    # a photon meant for the other basis lands on a random detector of Bob's pair
    target = np.where(a_basis == b_basis, target, rng.integers(0, 2, size=n))
    signal = rng.binomial(photons, p_survive) > 0

    pbg = np.array([[float(suite.detectors[d].background(eta)) for d in BASIS_DETECTORS[b]] for b in BASES])
    bg0 = rng.random(n) < pbg[b_basis, 0]
    bg1 = rng.random(n) < pbg[b_basis, 1]
    click0 = bg0 | (signal & (target == 0))
    click1 = bg1 | (signal & (target == 1))
    blind = blind_slots(suite, source.rep_rate)
    if blind:
        free_at = [0] * 4
        for i in np.flatnonzero(click0 | click1):
            base = 2 * int(b_basis[i])
            for j, arr in ((0, click0), (1, click1)):
                if arr[i]:
                    if i < free_at[base + j]:
                        arr[i] = False
                    else:
                        free_at[base + j] = i + blind + 1
    coin = rng.integers(0, 2, size=n)
    detected = click0 | click1
    outcome = np.where(click0 & click1, coin, np.where(click1, 1, 0))
    error = detected & (outcome != bit)

    matched = a_basis == b_basis
    sent_bk = np.zeros((2, 3), dtype=np.int64)
    n_bk = np.zeros((2, 3), dtype=np.int64)
    m_bk = np.zeros((2, 3), dtype=np.int64)
    np.add.at(sent_bk, (a_basis[matched], k[matched]), 1)
    sel = matched & detected
    np.add.at(n_bk, (a_basis[sel], k[sel]), 1)
    sel = matched & error
    np.add.at(m_bk, (a_basis[sel], k[sel]), 1)
    return BinRecord(float(eta), n, sent_bk, n_bk, m_bk, int((~matched).sum()))


@dataclass(frozen=True)
class PhotonResolvedTally:
    """Observed tallies plus the ground truth only an oracle can see."""

    tallies: TallyTable
    s_X0: int
    s_X1: int
    s_Z1: int
    phase_errors_X1: int

    @property
    def phi_X(self) -> float:
        return self.phase_errors_X1 / self.s_X1 if self.s_X1 > 0 else 0.0


def _photon_class_rates(source, suite, eta, basis):
    """Per-bin yield and error probability for photon classes 0, 1, >=2.

    Returns (class_prob[k, c], yield[..., k, c], err[..., k, c]).
    """
    eta_sys = np.asarray(eta, dtype=float) * suite.eta_bob * suite.basis_efficiency(basis)
    y = suite.background(basis, eta)
    cls_p = np.empty((3, 3))
    Y = np.empty(eta_sys.shape + (3, 3))
    E = np.empty_like(Y)
    for k, mu in enumerate(source.mu):
        p0, p1 = math.exp(-mu), mu * math.exp(-mu)
        cls_p[k] = (p0, p1, max(0.0, 1.0 - p0 - p1))
        Q = expected_gain(source, suite, eta, k + 1, basis)
        EQ = expected_error_rate(source, suite, eta, k + 1, basis)
        y1 = 1.0 - (1.0 - y) * (1.0 - eta_sys)
        e1 = BACKGROUND_ERROR * y + suite.e_mis * eta_sys
        Y[..., k, 0], E[..., k, 0] = y, BACKGROUND_ERROR * y
        Y[..., k, 1], E[..., k, 1] = y1, e1
        if cls_p[k, 2] > 0.0:
            # the multi-photon class takes whatever the mixture leaves over
            Y[..., k, 2] = np.clip((Q - p0 * y - p1 * y1) / cls_p[k, 2], 0.0, 1.0)
            E[..., k, 2] = np.clip((EQ - p0 * BACKGROUND_ERROR * y - p1 * e1) / cls_p[k, 2], 0.0, 1.0)
        else:
            Y[..., k, 2] = E[..., k, 2] = 0.0
    with np.errstate(invalid="ignore", divide="ignore"):
        err = np.where(Y > 0.0, E / Y, 0.0)
    return cls_p, Y, np.clip(err, 0.0, 1.0)


def simulate_photon_resolved(
    trace: TransmittanceTrace,
    source: SourceParams,
    suite: DetectorSuite,
    seed: int,
    *,
    eta_t: float = 0.0,
    passive: bool = False,
) -> PhotonResolvedTally:
    """Oracle simulator that tracks the photon number behind every detection.

    Only bins with transmittance >= ``eta_t`` are simulated.  The true phase
    errors of key-basis single-photon detections are drawn with the
    single-photon error rate of the conjugate basis.
    """
    keep = trace.bins >= eta_t
    eta = trace.bins[keep]
    if eta.size == 0:
        return PhotonResolvedTally(TallyTable.empty(), 0, 0, 0, 0)
    rng = np.random.default_rng([int(seed), ORACLE_STREAM, 1])
    sent = np.full(eta.size, trace.pulses_per_bin, dtype=np.int64)
    split = rng.multinomial(sent, sifting_probs(source, passive))[:, :6].reshape(-1, 2, 3)
    n = np.zeros((2, 3), dtype=np.int64)
    m = np.zeros((2, 3), dtype=np.int64)
    truth = {}
    for b, basis in enumerate(BASES):
        cls_p, Y, err = _photon_class_rates(source, suite, eta, basis)
        per_class = np.stack([rng.multinomial(split[:, b, k], cls_p[k]) for k in range(3)], axis=1)
        det = rng.binomial(per_class, Y)
        errs = rng.binomial(det, err)
        n[b] = det.sum(axis=(0, 2))
        m[b] = errs.sum(axis=(0, 2))
        truth[basis] = det.sum(axis=1)  # (bins, photon class)
    # a key-basis single photon measured in the conjugate basis errs at that basis' rate
    _, _, err_z = _photon_class_rates(source, suite, eta, "Z")
    phase = int(rng.binomial(truth["X"][:, 1], err_z[:, 0, 1]).sum())
    s_X = truth["X"].sum(axis=0)
    s_Z = truth["Z"].sum(axis=0)
    tallies = TallyTable(int(sent.sum()), n, m)
    return PhotonResolvedTally(tallies, int(s_X[0]), int(s_X[1]), int(s_Z[1]), phase)


# --- event tapes -------------------------------------------------------------

class TapeError(ValueError):
    """Malformed or inconsistent event tape; message carries file and line."""


@dataclass
class TapeDiagnostics:
    detections: int = 0
    matched: int = 0
    out_of_slot: int = 0
    double_clicks: int = 0
    basis_mismatch: int = 0

    def to_csv(self) -> str:
        keys = list(self.__dataclass_fields__)
        return ",".join(keys) + "\n" + ",".join(str(getattr(self, k)) for k in keys) + "\n"


def _read_rows(path, header):
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        first = next(reader, None)
        if first is None or [c.strip() for c in first] != header:
            raise TapeError(f"{path}:1: expected header {','.join(header)}")
        for lineno, row in enumerate(reader, start=2):
            if not row:
                continue
            if len(row) != len(header):
                raise TapeError(f"{path}:{lineno}: expected {len(header)} fields, got {len(row)}")
            yield lineno, [c.strip() for c in row]


def read_alice_tape(path):
    """Return slot, basis (0/1), intensity index (1..3) and bit arrays."""
    slots, bases, ks, bits = [], [], [], []
    prev = -1
    for lineno, (slot, basis, k, bit) in _read_rows(path, ["slot", "basis", "intensity_index", "bit"]):
        try:
            s, kk, bb = int(slot), int(k), int(bit)
        except ValueError:
            raise TapeError(f"{path}:{lineno}: non-integer field") from None
        if basis not in BASES or kk not in (1, 2, 3) or bb not in (0, 1):
            raise TapeError(f"{path}:{lineno}: bad basis/intensity/bit {basis},{k},{bit}")
        if s != prev + 1:
            raise TapeError(f"{path}:{lineno}: slots must be consecutive from 0 (got {s} after {prev})")
        prev = s
        slots.append(s)
        bases.append(BASES.index(basis))
        ks.append(kk)
        bits.append(bb)
    return (np.asarray(slots, dtype=np.int64), np.asarray(bases, dtype=np.int8),
            np.asarray(ks, dtype=np.int8), np.asarray(bits, dtype=np.int8))


def read_detection_tape(path):
    times, dets = [], []
    prev = None
    for lineno, (ts, det) in _read_rows(path, ["timestamp_ps", "detector"]):
        try:
            t = int(ts)
        except ValueError:
            raise TapeError(f"{path}:{lineno}: timestamp is not an integer: {ts!r}") from None
        if det not in DETECTOR_BIT:
            raise TapeError(f"{path}:{lineno}: unknown detector {det!r}")
        if prev is not None and t < prev:
            raise TapeError(f"{path}:{lineno}: timestamps not sorted ({t} < {prev})")
        prev = t
        times.append(t)
        dets.append(det)
    return np.asarray(times, dtype=np.int64), dets


def ingest_event_tape(
    alice_tape,
    detection_tape,
    trace: TransmittanceTrace,
    rep_rate: float = 10e6,
    *,
    seed: int = 0,
    gate_ps: int | None = None,
) -> tuple[BinRecords, TallyTable, TapeDiagnostics]:
    """Tally recorded detections per transmittance bin.

    Pulse slot ``i`` is centred at ``i * period``.  A detection belongs to
    the nearest slot (ties go to the earlier one) if it lies within
    ``gate_ps`` of it (default: half a period).  Bob's basis is the basis of
    the detector that clicked; several clicks in one slot are settled by a
    fair coin drawn from ``seed``.

    In the returned records ``sent_bk`` counts Alice's prepared pulses per
    (basis, intensity), since Bob's basis is unknown for slots without a
    click, and ``mismatched`` is zero.
    """
    period = round(1e12 / rep_rate)
    gate = period // 2 if gate_ps is None else int(gate_ps)
    slots, a_basis, a_k, a_bit = read_alice_tape(alice_tape)
    times, dets = read_detection_tape(detection_tape)
    if slots.size != trace.total_pulses:
        raise TapeError(f"{alice_tape}: {slots.size} slots but trace covers {trace.total_pulses} pulses")
    lo, hi = -(period // 2), trace.total_pulses * period
    if times.size and (times[0] < lo or times[-1] >= hi):
        bad = int(np.argmax((times < lo) | (times >= hi)))
        raise TapeError(f"{detection_tape}:{bad + 2}: timestamp {times[bad]} outside trace span [{lo}, {hi})")

    diag = TapeDiagnostics(detections=int(times.size))
    # nearest slot, ties to the earlier one
    slot = (times + (period + 1) // 2 - 1) // period
    offset = np.abs(times - slot * period)
    ok = (offset <= gate) & (slot >= 0) & (slot < slots.size)
    diag.out_of_slot = int((~ok).sum())
    slot, dets_ok = slot[ok], [d for d, keep in zip(dets, ok) if keep]

    rng = np.random.default_rng([int(seed), ORACLE_STREAM, 2])
    chosen_slot, chosen_det = [], []
    i = 0
    while i < slot.size:
        j = i
        while j + 1 < slot.size and slot[j + 1] == slot[i]:
            j += 1
        group = sorted(set(dets_ok[i:j + 1]))
        if len(group) > 1:
            diag.double_clicks += 1
            det = group[int(rng.integers(len(group)))]
        else:
            det = group[0]
        chosen_slot.append(int(slot[i]))
        chosen_det.append(det)
        i = j + 1

    ppb = trace.pulses_per_bin
    nb = len(trace)
    sent_bk = np.zeros((nb, 2, 3), dtype=np.int64)
    np.add.at(sent_bk, (slots // ppb, a_basis, a_k - 1), 1)
    n_bk = np.zeros((nb, 2, 3), dtype=np.int64)
    m_bk = np.zeros((nb, 2, 3), dtype=np.int64)
    for s, det in zip(chosen_slot, chosen_det):
        b = BASES.index(DETECTOR_BASIS[det])
        if b != a_basis[s]:
            diag.basis_mismatch += 1
            continue
        diag.matched += 1
        idx = (s // ppb, b, a_k[s] - 1)
        n_bk[idx] += 1
        if DETECTOR_BIT[det] != a_bit[s]:
            m_bk[idx] += 1
    records = BinRecords(trace.bins.copy(), np.full(nb, ppb, dtype=np.int64), sent_bk, n_bk, m_bk,
                         np.zeros(nb, dtype=np.int64), diagnostics=vars(diag).copy())
    return records, records.tally(), diag


def synthesize_tapes(records: BinRecords, rep_rate: float, seed: int, alice_path, detection_path,
                     *, jitter_ps: int = 0) -> None:
    """Write Alice and detection tapes whose ingestion reproduces ``records``.

    Mismatched-basis pulses get a random Alice basis and no click.  Slot
    order inside a bin is shuffled from ``seed``.
    """
    period = round(1e12 / rep_rate)
    rng = np.random.default_rng([int(seed), ORACLE_STREAM, 3])
    with open(alice_path, "w", newline="") as fa, open(detection_path, "w", newline="") as fd:
        fa.write("slot,basis,intensity_index,bit\n")
        fd.write("timestamp_ps,detector\n")
        slot0 = 0
        for i in range(len(records)):
            rows = []  # (basis, k, kind) with kind 0 no click, 1 correct, 2 error
            for b in range(2):
                for k in range(3):
                    s, n, m = (int(records.sent_bk[i, b, k]), int(records.n_bk[i, b, k]),
                               int(records.m_bk[i, b, k]))
                    rows += [(b, k, 2)] * m + [(b, k, 1)] * (n - m) + [(b, k, 0)] * (s - n)
            rows += [(int(rng.integers(2)), int(rng.integers(3)), 0)
                     for _ in range(int(records.mismatched[i]))]
            if len(rows) != int(records.sent[i]):
                raise ValueError(f"bin {i}: per-category counts do not add up to sent")
            order = rng.permutation(len(rows))
            for j, idx in enumerate(order):
                b, k, kind = rows[idx]
                bit = int(rng.integers(2))
                slot = slot0 + j
                fa.write(f"{slot},{BASES[b]},{k + 1},{bit}\n")
                if kind:
                    out_bit = bit if kind == 1 else 1 - bit
                    det = BASIS_DETECTORS[BASES[b]][out_bit]
                    t = slot * period + (int(rng.integers(-jitter_ps, jitter_ps + 1)) if jitter_ps else 0)
                    fd.write(f"{t},{det}\n")
            slot0 += int(records.sent[i])
