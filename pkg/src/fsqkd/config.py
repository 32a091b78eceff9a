"""Run configuration: an INI-style file of ``[section]`` headers and
``key = value`` lines.

Grammar
-------
* ``#`` or ``;`` start a comment (whole line or after a value).
* Values are numbers (``3e10``), booleans (``true``/``false``), bare or
  double-quoted strings, or comma-separated lists of numbers.
* Sections: ``[channel]``, ``[source]``, ``[detectors]``,
  ``[detectors.<H|V|D|A>]``, ``[security]``, ``[run]``, ``[waveform]``.

See README.md for every key.
"""
from __future__ import annotations

import configparser
import math
from dataclasses import dataclass, field
from types import MappingProxyType

import numpy as np

from .devices import BUILTIN_SUITES, TABLE1, Detector, DetectorSuite, SourceParams
from .finitekey import SecurityBudget
from .postselect import POLICIES, ThresholdPolicy, default_grid
from .turbulence import DEFAULT_BIN_DURATION, AtmosphericPath, ChannelModel, rytov_variance

SOURCE_BUILTINS = {"table1-37db": TABLE1[37.0], "table1-40db": TABLE1[40.0]}

KNOWN_KEYS = {
    "channel": {"eta_o", "loss_db", "sigma", "cn2", "wavelength", "distance"},
    "source": {"builtin", "optimize", "q_x", "mu1", "mu2", "p_mu1", "p_mu2", "p_mu3", "rep_rate",
               "restarts"},
    "detectors": {"builtin", "eta_bob", "e_mis", "dead_time", "jitter"},
    "detector": {"Y0", "b", "eta_det"},
    "security": {"eps_sec", "eps_cor", "f_ec"},
    "run": {"pulses", "bin_duration", "seed", "policy", "threshold", "grid_min", "grid_max",
            "grid_points", "out", "passive", "probe_sigma", "losses_db", "monte_carlo", "write_tapes",
            "write_bins"},
    "waveform": {"full_scale"},
}


class ConfigError(ValueError):
    """Invalid configuration; the message names the offending field."""


def parse_value(text: str):
    s = text.strip()
    if len(s) >= 2 and s[0] == s[-1] == '"':
        return s[1:-1]
    low = s.lower()
    if low in ("true", "yes", "on"):
        return True
    if low in ("false", "no", "off"):
        return False
    if "," in s:
        return [parse_value(p) for p in s.split(",") if p.strip()]
    try:
        return int(s)
    except ValueError:
        pass
    try:
        return float(s)
    except ValueError:
        return s


@dataclass
class RunConfig:
    sections: dict
    text: str = ""
    overrides: dict = field(default_factory=dict)

    @classmethod
    def from_text(cls, text: str) -> "RunConfig":
        parser = configparser.ConfigParser(inline_comment_prefixes=("#", ";"), interpolation=None)
        parser.optionxform = str
        try:
            parser.read_string(text)
        except configparser.Error as exc:
            raise ConfigError(f"config syntax: {exc}") from None
        sections = {}
        for name in parser.sections():
            kind = "detector" if name.startswith("detectors.") else name
            if kind not in KNOWN_KEYS:
                raise ConfigError(f"[{name}]: unknown section")
            if kind == "detector" and name.split(".", 1)[1] not in "HVDA":
                raise ConfigError(f"[{name}]: detector must be one of H, V, D, A")
            sec = {}
            for key, raw in parser.items(name):
                if key not in KNOWN_KEYS[kind]:
                    raise ConfigError(f"{name}.{key}: unknown key")
                sec[key] = parse_value(raw)
            sections[name] = sec
        return cls(sections, text)

    @classmethod
    def from_file(cls, path) -> "RunConfig":
        with open(path) as fh:
            return cls.from_text(fh.read())

    # -- helpers -------------------------------------------------------------
    def _sec(self, name):
        return self.sections.get(name, {})

    def get(self, section, key, default=None, *, required=False, kind=float):
        sec = self._sec(section)
        if key not in sec:
            if required:
                raise ConfigError(f"{section}.{key}: missing required field")
            return default
        value = sec[key]
        try:
            if kind is float:
                if isinstance(value, bool):
                    raise TypeError
                return float(value)
            if kind is int:
                if isinstance(value, bool):
                    raise TypeError
                f = float(value)
                if f != int(f):
                    raise ValueError
                return int(value) if isinstance(value, int) else int(f)
            if kind is bool:
                if not isinstance(value, bool):
                    raise TypeError
                return value
            if kind is list:
                return [float(v) for v in (value if isinstance(value, list) else [value])]
            return str(value)
        except (TypeError, ValueError):
            raise ConfigError(f"{section}.{key}: invalid value {value!r}") from None

    # -- channel ---------------------------------------------------------------
    def paths(self) -> list[AtmosphericPath]:
        cn2 = self.get("channel", "cn2", required=True, kind=list)
        dist = self.get("channel", "distance", required=True, kind=list)
        lam = self.get("channel", "wavelength", required=True)
        if len(cn2) != len(dist):
            raise ConfigError("channel.distance: needs as many entries as channel.cn2")
        try:
            return [AtmosphericPath(c, d, lam) for c, d in zip(cn2, dist)]
        except ValueError as exc:
            raise ConfigError(f"channel: {exc}") from None

    def sigma(self) -> float:
        sec = self._sec("channel")
        has_sigma = "sigma" in sec
        has_path = any(k in sec for k in ("cn2", "distance", "wavelength"))
        if has_sigma == has_path:
            raise ConfigError("channel.sigma: give exactly one of sigma or path physics (cn2, wavelength, distance)")
        if has_sigma:
            return self.get("channel", "sigma")
        paths = self.paths()
        if len(paths) != 1:
            raise ConfigError("channel.cn2: a single path is required outside the rytov command")
        return math.sqrt(rytov_variance(paths[0]))

    def channel(self, loss_db: float | None = None) -> ChannelModel:
        sec = self._sec("channel")
        sigma = self.sigma()
        if loss_db is not None:
            return ChannelModel.from_loss_db(loss_db, sigma)
        if ("eta_o" in sec) == ("loss_db" in sec):
            raise ConfigError("channel.eta_o: give exactly one of eta_o or loss_db")
        try:
            if "eta_o" in sec:
                return ChannelModel(self.get("channel", "eta_o"), sigma)
            return ChannelModel.from_loss_db(self.get("channel", "loss_db"), sigma)
        except ValueError as exc:
            raise ConfigError(f"channel: {exc}") from None

    def loss_db(self) -> float:
        return self.channel().loss_db

    # -- source ----------------------------------------------------------------
    @property
    def optimize_source(self) -> bool:
        return bool(self.get("source", "optimize", False, kind=bool))

    @property
    def rep_rate(self) -> float:
        return self.get("source", "rep_rate", 10e6)

    def source(self) -> SourceParams:
        sec = self._sec("source")
        if "builtin" in sec:
            name = self.get("source", "builtin", kind=str)
            if name not in SOURCE_BUILTINS:
                raise ConfigError(f"source.builtin: unknown set {name!r} (choose from {sorted(SOURCE_BUILTINS)})")
            base = SOURCE_BUILTINS[name]
            return SourceParams(base.q_x, base.mu, base.p_mu, self.rep_rate)
        vals = {k: self.get("source", k, required=True) for k in ("q_x", "mu1", "mu2", "p_mu1", "p_mu2")}
        if not 0.0 < vals["q_x"] < 1.0:
            raise ConfigError("source.q_x: must lie in (0, 1)")
        if vals["mu2"] >= vals["mu1"]:
            raise ConfigError("source.mu2: must be smaller than source.mu1")
        if vals["mu2"] <= 0.0:
            raise ConfigError("source.mu2: must be positive")
        for k in ("p_mu1", "p_mu2"):
            if not 0.0 < vals[k] < 1.0:
                raise ConfigError(f"source.{k}: must lie in (0, 1)")
        p3 = 1.0 - vals["p_mu1"] - vals["p_mu2"]
        if "p_mu3" in sec and abs(self.get("source", "p_mu3") - p3) > 1e-9:
            raise ConfigError("source.p_mu3: p_mu1 + p_mu2 + p_mu3 must equal 1")
        if not 0.0 < p3 < 1.0:
            raise ConfigError("source.p_mu2: p_mu1 + p_mu2 must be below 1 (vacuum needs probability)")
        return SourceParams.from_free(vals["q_x"], vals["mu1"], vals["mu2"], vals["p_mu1"],
                                      vals["p_mu2"], self.rep_rate)

    # -- receiver ----------------------------------------------------------------
    def suite(self) -> DetectorSuite:
        name = self.get("detectors", "builtin", "new-snspd", kind=str)
        if name not in BUILTIN_SUITES:
            raise ConfigError(f"detectors.builtin: unknown set {name!r} (choose from {sorted(BUILTIN_SUITES)})")
        base = BUILTIN_SUITES[name]
        dets = dict(base.detectors)
        for d in "HVDA":
            sec = f"detectors.{d}"
            if sec in self.sections:
                cur = dets[d]
                try:
                    dets[d] = Detector(self.get(sec, "Y0", cur.Y0), self.get(sec, "b", cur.b),
                                       self.get(sec, "eta_det", cur.eta_det))
                except ValueError as exc:
                    raise ConfigError(f"{sec}: {exc}") from None
        kw = {k: self.get("detectors", k, getattr(base, k)) for k in ("eta_bob", "e_mis", "dead_time", "jitter")}
        try:
            return DetectorSuite(MappingProxyType(dets), name=name if name else "custom", **kw)
        except ValueError as exc:
            raise ConfigError(f"detectors: {exc}") from None

    def budget(self) -> SecurityBudget:
        try:
            return SecurityBudget(self.get("security", "eps_sec", 1e-9), self.get("security", "eps_cor", 1e-15),
                                  self.get("security", "f_ec", 1.16))
        except ValueError as exc:
            raise ConfigError(f"security: {exc}") from None

    # -- run ---------------------------------------------------------------------
    @property
    def seed(self) -> int:
        if "seed" in self.overrides:
            return self.overrides["seed"]
        seed = self.get("run", "seed", required=True, kind=int)
        if seed < 0 or seed >= 2 ** 64:
            raise ConfigError("run.seed: must be an unsigned 64-bit integer")
        return seed

    @property
    def pulses(self) -> int:
        n = self.get("run", "pulses", required=True, kind=int)
        if n < 1:
            raise ConfigError("run.pulses: must be >= 1")
        return n

    @property
    def bin_duration(self) -> float:
        d = self.get("run", "bin_duration", DEFAULT_BIN_DURATION)
        if not d > 0.0:
            raise ConfigError("run.bin_duration: must be positive")
        return d

    @property
    def pulses_per_bin(self) -> int:
        return max(1, round(self.rep_rate * self.bin_duration))

    @property
    def n_bins(self) -> int:
        nb = round(self.pulses / self.pulses_per_bin)
        if nb < 1:
            raise ConfigError("run.pulses: fewer pulses than one bin holds (empty bin count)")
        return nb

    @property
    def passive(self) -> bool:
        return self.get("run", "passive", False, kind=bool)

    @property
    def probe_sigma(self) -> float:
        return self.get("run", "probe_sigma", 0.0)

    def flag(self, key) -> bool:
        return self.get("run", key, False, kind=bool)

    def policy(self) -> ThresholdPolicy:
        sec = self._sec("run")
        name = self.get("run", "policy", None, kind=str)
        if "threshold" in sec:
            if name not in (None, "prefixed"):
                raise ConfigError("run.threshold: conflicts with run.policy")
            try:
                return ThresholdPolicy("prefixed", self.get("run", "threshold"))
            except ValueError as exc:
                raise ConfigError(f"run.threshold: {exc}") from None
        if name is None:
            return POLICIES["paper-prts"]
        if name not in POLICIES:
            raise ConfigError(f"run.policy: unknown policy {name!r} (choose from {sorted(POLICIES)})")
        return POLICIES[name]

    def grid(self) -> np.ndarray:
        lo = self.get("run", "grid_min", 1e-5)
        hi = self.get("run", "grid_max", 1e-2)
        pts = self.get("run", "grid_points", 40, kind=int)
        if pts < 1:
            raise ConfigError("run.grid_points: must be >= 1")
        if pts == 1:
            return np.array([lo])
        if not 0.0 < lo < hi < 1.0:
            raise ConfigError("run.grid_min: need 0 < grid_min < grid_max < 1")
        return default_grid(pts, lo, hi)

    def losses_db(self) -> list[float]:
        return self.get("run", "losses_db", required=True, kind=list)

    def full_scale(self):
        return self.get("waveform", "full_scale", None)

    def out_dir(self):
        return self.get("run", "out", "results", kind=str)
