"""Log-normal fading channel: density, truncated moments, trace sampling and
AWG-style waveform export."""
from __future__ import annotations

import math
import os
import tempfile
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from scipy import integrate
from scipy.special import ndtr

from .rng import chunk_generator

DEFAULT_WAVELENGTH = 1550.5e-9
DEFAULT_BIN_DURATION = 1e-3
TRACE_STREAM = 0
CHUNK_BINS = 1 << 16
WAVEFORM_MAX = 65535


class EmptyPostSelection(ValueError):
    """No transmittance mass (or no bins) survives the threshold."""


@dataclass(frozen=True)
class ChannelModel:
    """Log-normal fading channel with mean transmittance ``eta_o`` and
    log-amplitude spread ``sigma`` (sigma**2 is the Rytov variance)."""

    eta_o: float
    sigma: float

    def __post_init__(self):
        if not (0.0 < self.eta_o <= 1.0):
            raise ValueError(f"eta_o must lie in (0, 1], got {self.eta_o}")
        if not self.sigma > 0.0:
            raise ValueError(f"sigma must be positive, got {self.sigma}")

    @classmethod
    def from_loss_db(cls, loss_db: float, sigma: float) -> "ChannelModel":
        return cls(eta_o=loss_db_to_eta(loss_db), sigma=sigma)

    @property
    def rytov(self) -> float:
        return self.sigma ** 2

    @property
    def loss_db(self) -> float:
        return -10.0 * math.log10(self.eta_o)


@dataclass(frozen=True)
class AtmosphericPath:
    """Horizontal path: structure constant (m^-2/3), wavelength and length (m)."""

    cn2: float
    distance: float
    wavelength: float = DEFAULT_WAVELENGTH

    def __post_init__(self):
        for name in ("cn2", "distance", "wavelength"):
            if not getattr(self, name) > 0.0:
                raise ValueError(f"{name} must be positive, got {getattr(self, name)}")

    @property
    def wavenumber(self) -> float:
        return 2.0 * math.pi / self.wavelength


@dataclass(frozen=True, eq=False)
class TransmittanceTrace:
    bins: np.ndarray
    bin_duration: float
    pulses_per_bin: int
    seed: int | None = None

    def __post_init__(self):
        bins = np.asarray(self.bins, dtype=float)
        if bins.ndim != 1 or bins.size == 0:
            raise ValueError("trace needs a non-empty 1-d array of bins")
        if np.any(bins <= 0.0) or np.any(bins > 1.0):
            raise ValueError("every bin transmittance must lie in (0, 1]")
        if self.pulses_per_bin < 1:
            raise ValueError("pulses_per_bin must be >= 1")
        if not self.bin_duration > 0.0:
            raise ValueError("bin_duration must be positive")
        object.__setattr__(self, "bins", bins)

    def __len__(self):
        return self.bins.size

    @property
    def total_pulses(self) -> int:
        return self.bins.size * self.pulses_per_bin


def loss_db_to_eta(loss_db: float) -> float:
    return 10.0 ** (-loss_db / 10.0)


def rytov_variance(path: AtmosphericPath) -> float:
    """Plane-wave Rytov variance 1.23 Cn2 k^(7/6) L^(11/6)."""
    return 1.23 * path.cn2 * path.wavenumber ** (7.0 / 6.0) * path.distance ** (11.0 / 6.0)


def _standardize(model: ChannelModel, eta):
    with np.errstate(divide="ignore"):
        return (np.log(np.asarray(eta, dtype=float) / model.eta_o) + 0.5 * model.sigma ** 2) / model.sigma


def pdf(model: ChannelModel, eta):
    """Log-normal transmittance density; accepts scalars or arrays."""
    eta_arr = np.asarray(eta, dtype=float)
    if np.any(eta_arr <= 0.0):
        raise ValueError("pdf is defined for eta > 0 only")
    z = _standardize(model, eta_arr)
    out = np.exp(-0.5 * z * z) / (math.sqrt(2.0 * math.pi) * model.sigma * eta_arr)
    return float(out) if out.ndim == 0 else out


def cdf(model: ChannelModel, eta):
    """P(transmittance <= eta) for the untruncated distribution."""
    eta_arr = np.asarray(eta, dtype=float)
    out = np.where(eta_arr > 0.0, ndtr(_standardize(model, np.maximum(eta_arr, 1e-300))), 0.0)
    return float(out) if out.ndim == 0 else out


def _partial_moments(model: ChannelModel, lo: float, hi: float = 1.0):
    """Zeroth and first partial moments over [lo, hi] via Gaussian tails."""
    s = model.sigma
    a_lo = -math.inf if lo <= 0.0 else float(_standardize(model, lo))
    a_hi = float(_standardize(model, hi))
    # survival differences written with ndtr(-x) to keep precision in the upper tail
    mass = ndtr(-a_lo) - ndtr(-a_hi)
    first = model.eta_o * (ndtr(-(a_lo - s)) - ndtr(-(a_hi - s)))
    return float(mass), float(first)


def truncated_stats(model: ChannelModel, eta_t: float) -> tuple[float, float]:
    """Survival fraction F and conditional mean transmittance above ``eta_t``.

    Integrals run over [eta_t, 1] of the untruncated density (no
    renormalization of the mass above 1).
    """
    if not (0.0 <= eta_t < 1.0):
        raise ValueError(f"threshold must lie in [0, 1), got {eta_t}")
    mass, first = _partial_moments(model, eta_t)
    if mass <= 0.0:
        raise EmptyPostSelection(f"no transmittance mass above eta_t={eta_t:g}")
    return mass, first / mass


def truncated_stats_quad(model: ChannelModel, eta_t: float) -> tuple[float, float]:
    """Same quantities as :func:`truncated_stats`, by adaptive quadrature."""
    if not (0.0 <= eta_t < 1.0):
        raise ValueError(f"threshold must lie in [0, 1), got {eta_t}")
    s = model.sigma
    mu = math.log(model.eta_o) - 0.5 * s * s
    lo = -math.inf if eta_t <= 0.0 else math.log(eta_t)

    # integrate in u = ln(eta); the density becomes a plain Gaussian
    def dens(u):
        return math.exp(-0.5 * ((u - mu) / s) ** 2) / (math.sqrt(2.0 * math.pi) * s)

    # the Gaussian is negligible beyond 40 sigma; a finite range lets quad see the peak
    lo = max(lo, mu - 40.0 * s)
    if lo >= 0.0:
        raise EmptyPostSelection(f"no transmittance mass above eta_t={eta_t:g}")
    opts = dict(epsabs=1e-14, epsrel=1e-12, limit=400)
    if lo < mu < 0.0:
        opts["points"] = [mu]
    mass, _ = integrate.quad(dens, lo, 0.0, **opts)
    first, _ = integrate.quad(lambda u: math.exp(u) * dens(u), lo, 0.0, **opts)
    if mass <= 0.0:
        raise EmptyPostSelection(f"no transmittance mass above eta_t={eta_t:g}")
    return mass, first / mass


def truncated_second_moment(model: ChannelModel, eta_t: float) -> float:
    """E[eta^2 | eta_t <= eta <= 1]; used for sampling-error estimates."""
    s = model.sigma
    a_lo = -math.inf if eta_t <= 0.0 else float(_standardize(model, eta_t))
    a_hi = float(_standardize(model, 1.0))
    mass, _ = _partial_moments(model, eta_t)
    second = model.eta_o ** 2 * math.exp(s * s) * (ndtr(-(a_lo - 2 * s)) - ndtr(-(a_hi - 2 * s)))
    return second / mass


def sample_trace(
    model: ChannelModel,
    n_bins: int,
    bin_duration: float = DEFAULT_BIN_DURATION,
    pulses_per_bin: int = 10_000,
    seed: int = 0,
) -> TransmittanceTrace:
    """Draw ``n_bins`` i.i.d. log-normal transmittances, clamped to 1.

    Bins are generated in fixed-size chunks, each keyed on ``(seed, chunk)``,
    so any prefix of a longer trace equals the shorter trace.
    """
    if n_bins < 1:
        raise ValueError("n_bins must be >= 1")
    s = model.sigma
    out = np.empty(n_bins)
    for c, start in enumerate(range(0, n_bins, CHUNK_BINS)):
        stop = min(start + CHUNK_BINS, n_bins)
        z = chunk_generator(seed, TRACE_STREAM, c).standard_normal(CHUNK_BINS)[: stop - start]
        out[start:stop] = model.eta_o * np.exp(s * z - 0.5 * s * s)
    np.minimum(out, 1.0, out=out)
    # guard against exp underflow for extreme sigma
    np.maximum(out, np.finfo(float).tiny, out=out)
    return TransmittanceTrace(out, bin_duration, int(pulses_per_bin), seed)


def _atomic_write(destination, payload: bytes) -> None:
    dest = Path(destination)
    fd, tmp = tempfile.mkstemp(dir=dest.parent, prefix=f".{dest.name}.")
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(payload)
        os.replace(tmp, dest)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def quantize(trace: TransmittanceTrace, full_scale: float) -> np.ndarray:
    if not full_scale > 0.0:
        raise ValueError("full_scale must be positive")
    if trace.bins.max() > full_scale:
        raise ValueError(f"full_scale {full_scale:g} is below the trace maximum {trace.bins.max():g}")
    return np.rint(trace.bins / full_scale * WAVEFORM_MAX).astype("<u2")


def export_waveform(trace: TransmittanceTrace, full_scale: float, destination) -> Path:
    """Write the trace as 16-bit AOM drive samples behind a short text header.

    Header lines (ASCII, newline terminated)::

        # samples=<n>
        # bin_duration_s=<float>
        # full_scale=<float>
        # seed=<u64>

    followed by ``n`` little-endian uint16 samples ``round(eta/full_scale*65535)``.
    """
    samples = quantize(trace, full_scale)
    seed = "" if trace.seed is None else str(int(trace.seed))
    header = (
        f"# samples={samples.size}\n"
        f"# bin_duration_s={trace.bin_duration!r}\n"
        f"# full_scale={float(full_scale)!r}\n"
        f"# seed={seed}\n"
    ).encode("ascii")
    _atomic_write(destination, header + samples.tobytes())
    return Path(destination)


def import_waveform(source, pulses_per_bin: int = 1):
    """Read a waveform file back; returns (samples, trace)."""
    raw = Path(source).read_bytes()
    meta = {}
    pos = 0
    for _ in range(4):
        end = raw.index(b"\n", pos)
        line = raw[pos:end].decode("ascii")
        if not line.startswith("# ") or "=" not in line:
            raise ValueError(f"malformed waveform header line: {line!r}")
        key, value = line[2:].split("=", 1)
        meta[key] = value
        pos = end + 1
    n = int(meta["samples"])
    samples = np.frombuffer(raw, dtype="<u2", offset=pos)
    if samples.size != n:
        raise ValueError(f"header announces {n} samples, file holds {samples.size}")
    full_scale = float(meta["full_scale"])
    eta = samples.astype(float) / WAVEFORM_MAX * full_scale
    seed = int(meta["seed"]) if meta["seed"] else None
    # zero samples cannot form a valid trace; keep the smallest positive level
    eta = np.maximum(eta, np.finfo(float).tiny)
    trace = TransmittanceTrace(eta, float(meta["bin_duration_s"]), pulses_per_bin, seed)
    return samples, trace


def trace_to_csv(trace: TransmittanceTrace) -> str:
    lines = ["bin_index,eta"]
    lines.extend(f"{i},{v:.9g}" for i, v in enumerate(trace.bins))
    return "\n".join(lines) + "\n"


def trace_from_csv(path, bin_duration: float, pulses_per_bin: int) -> TransmittanceTrace:
    data = np.loadtxt(path, delimiter=",", skiprows=1, ndmin=2)
    idx = data[:, 0].astype(np.int64)
    if not np.array_equal(idx, np.arange(idx.size)):
        raise ValueError(f"{path}: bin_index column must run 0..n-1")
    return TransmittanceTrace(data[:, 1], bin_duration, pulses_per_bin)
