"""Command-line driver.

Every command reads a run configuration (see config.py), writes its CSV
artifacts atomically into an output directory together with a copy of the
configuration and ``manifest.json``, and exits with 0 (success),
2 (invalid input) or 3 (runtime or estimation failure).
"""
from __future__ import annotations

import argparse
import hashlib
import json
import math
import os
import platform
import sys
from pathlib import Path

import numpy as np
import scipy

from . import __version__
from .config import ConfigError, RunConfig
from .montecarlo import TapeError, ingest_event_tape, simulate_bins, synthesize_tapes
from .postselect import (DEFAULT_THRESHOLD, NoPositiveRate, arts_sweep, optimize_params, predicted_rate,
                         secure_rate)
from .turbulence import (ChannelModel, _atomic_write, export_waveform, rytov_variance, sample_trace,
                         trace_from_csv, trace_to_csv)

OUTPUT_ENV = "FSQKD_OUTPUT_DIR"
TAPE_PULSE_CAP = 10 ** 7

EXIT_OK, EXIT_INVALID, EXIT_FAILURE = 0, 2, 3


class Run:
    """Output directory bookkeeping for one command invocation."""

    def __init__(self, command: str, cfg: RunConfig, out: Path):
        self.command = command
        self.cfg = cfg
        self.out = out
        self.outputs: dict[str, str] = {}

    def write(self, name: str, payload: str | bytes):
        self.out.mkdir(parents=True, exist_ok=True)
        data = payload.encode() if isinstance(payload, str) else payload
        _atomic_write(self.out / name, data)
        self.outputs[name] = hashlib.sha256(data).hexdigest()

    def path(self, name: str) -> Path:
        self.out.mkdir(parents=True, exist_ok=True)
        return self.out / name

    def register(self, name: str):
        # for files the module writes itself
        self.outputs[name] = hashlib.sha256((self.out / name).read_bytes()).hexdigest()

    def finish(self, extra: dict | None = None):
        self.write("config.ini", self.cfg.text)
        manifest = {
            "command": self.command,
            "seed": self.cfg.overrides.get("seed", self.cfg.sections.get("run", {}).get("seed")),
            "rerun": f"fsqkd {self.command} --config config.ini" + _seed_flag(self.cfg),
            "versions": {"fsqkd": __version__, "numpy": np.__version__, "scipy": scipy.__version__,
                         "python": platform.python_version()},
            "outputs": dict(sorted(self.outputs.items())),
        }
        if extra:
            manifest.update(extra)
        _atomic_write(self.out / "manifest.json", (json.dumps(manifest, indent=2, sort_keys=True) + "\n").encode())


def _seed_flag(cfg):
    return f" --seed {cfg.overrides['seed']}" if "seed" in cfg.overrides else ""


def _g(x) -> str:
    return f"{x:.9g}"


def _trace(cfg: RunConfig, model: ChannelModel):
    return sample_trace(model, cfg.n_bins, cfg.bin_duration, cfg.pulses_per_bin, cfg.seed)


def _source_for(cfg: RunConfig, model: ChannelModel, eta_t: float):
    if cfg.optimize_source:
        return optimize_params(model, cfg.suite(), cfg.budget(), cfg.pulses, eta_t, seed=cfg.seed,
                               rep_rate=cfg.rep_rate, passive=cfg.passive).source
    return cfg.source()


def _design_threshold(cfg: RunConfig) -> float:
    """Threshold the source is optimized for when ``optimize = true``."""
    policy = cfg.policy()
    return policy.eta_t if policy.mode == "prefixed" else DEFAULT_THRESHOLD


def _prefixed_threshold(cfg: RunConfig) -> float:
    policy = cfg.policy()
    if policy.mode != "prefixed":
        raise ConfigError("run.policy: this command needs a prefixed threshold (paper-prts, no-cutoff or threshold = ...)")
    return policy.eta_t


# --- commands ------------------------------------------------------------------

def cmd_rytov(cfg: RunConfig, run: Run, args):
    rows = ["cn2,wavelength_m,distance_m,sigma2"]
    for path in cfg.paths():
        s2 = rytov_variance(path)
        print(f"C_n^2={path.cn2:g} L={path.distance:g} m -> sigma^2={s2:.6g}")
        rows.append(f"{_g(path.cn2)},{_g(path.wavelength)},{_g(path.distance)},{_g(s2)}")
    run.write("rytov.csv", "\n".join(rows) + "\n")


def cmd_sample(cfg: RunConfig, run: Run, args):
    trace = _trace(cfg, cfg.channel())
    run.write("trace.csv", trace_to_csv(trace))
    print(f"{len(trace)} bins, mean transmittance {trace.bins.mean():.6g}")


def cmd_simulate(cfg: RunConfig, run: Run, args):
    model = cfg.channel()
    if cfg.flag("write_tapes") and cfg.pulses > TAPE_PULSE_CAP:
        raise ConfigError(f"run.write_tapes: event tapes are limited to {TAPE_PULSE_CAP} pulses")
    source = _source_for(cfg, model, _design_threshold(cfg))
    trace = _trace(cfg, model)
    records, tallies = simulate_bins(trace, source, cfg.suite(), cfg.seed, passive=cfg.passive,
                                     probe_sigma=cfg.probe_sigma, threads=args.threads)
    run.write("tallies.csv", tallies.to_csv())
    run.write("trace.csv", trace_to_csv(trace))
    if cfg.flag("write_bins"):
        run.write("bins.csv", records.to_csv())
    if cfg.flag("write_tapes"):
        tmp_a = run.path(".alice_tape.csv.tmp")
        tmp_d = run.path(".detections.csv.tmp")
        synthesize_tapes(records, source.rep_rate, cfg.seed, tmp_a, tmp_d)
        os.replace(tmp_a, run.out / "alice_tape.csv")
        os.replace(tmp_d, run.out / "detections.csv")
        run.register("alice_tape.csv")
        run.register("detections.csv")
    print(f"sifted X detections {int(tallies.n_X)}, Z detections {int(tallies.n_Z)}")


def cmd_ingest(cfg: RunConfig, run: Run, args):
    missing = [f"--{n}" for n in ("alice", "detections", "trace") if getattr(args, n) is None]
    if missing:
        raise ConfigError(f"ingest: missing {', '.join(missing)}")
    trace = trace_from_csv(args.trace, cfg.bin_duration, cfg.pulses_per_bin)
    records, tallies, diag = ingest_event_tape(args.alice, args.detections, trace, cfg.rep_rate,
                                               seed=cfg.seed, gate_ps=args.gate_ps)
    run.write("tallies.csv", tallies.to_csv())
    run.write("diagnostics.csv", diag.to_csv())
    print(f"{diag.matched} sifted of {diag.detections} detections, {diag.out_of_slot} out of slot")


def cmd_sweep_threshold(cfg: RunConfig, run: Run, args):
    model = cfg.channel()
    source = _source_for(cfg, model, _design_threshold(cfg))
    trace = _trace(cfg, model)
    records, _ = simulate_bins(trace, source, cfg.suite(), cfg.seed, passive=cfg.passive,
                               probe_sigma=cfg.probe_sigma, threads=args.threads)
    curve, best = arts_sweep(records, cfg.grid(), source, cfg.budget())
    run.write("threshold_curve.csv", curve.to_csv())
    if best is None:
        run.finish({"best_threshold": None})
        raise NoPositiveRate("no threshold on the grid yields a positive key")
    print(f"best threshold {best:.4g}, R_sec {curve.R_sec.max():.4g}")
    return {"best_threshold": best}


def cmd_keyrate_vs_loss(cfg: RunConfig, run: Run, args):
    eta_t = _prefixed_threshold(cfg)
    sigma = cfg.sigma()
    suite, budget, N = cfg.suite(), cfg.budget(), cfg.pulses
    grid = cfg.grid()
    monte_carlo = cfg.get("run", "monte_carlo", True, kind=bool)
    losses = sorted(cfg.losses_db())
    rows = ["loss_db,R_sec_zero_cutoff,R_sec_prts,R_sec_arts_opt,R_sec_mc_prts"]
    for loss in losses:
        model = ChannelModel.from_loss_db(loss, sigma)
        values = []
        sources = {}
        for t in (0.0, eta_t):
            try:
                src = _source_for(cfg, model, t)
            except NoPositiveRate:
                values.append(0.0)
                continue
            sources[t] = src
            values.append(predicted_rate(model, t, src, suite, budget, N, passive=cfg.passive).R_sec)
        src = sources.get(eta_t)
        if src is None:
            values += [0.0, 0.0]
        else:
            values.append(max(predicted_rate(model, t, src, suite, budget, N, passive=cfg.passive).R_sec
                              for t in grid))
            if monte_carlo:
                trace = _trace(cfg, model)
                records, _ = simulate_bins(trace, src, suite, cfg.seed, passive=cfg.passive,
                                           probe_sigma=cfg.probe_sigma, threads=args.threads)
                values.append(secure_rate(records, eta_t, src, budget).R_sec)
            else:
                values.append(math.nan)
        rows.append(",".join([_g(loss)] + [_g(v) if math.isfinite(v) else "" for v in values]))
        print(f"{loss:g} dB: zero cutoff {values[0]:.4g}, prefixed {values[1]:.4g}")
    run.write("keyrate_vs_loss.csv", "\n".join(rows) + "\n")


def cmd_optimize(cfg: RunConfig, run: Run, args):
    eta_t = _prefixed_threshold(cfg)
    sigma = cfg.sigma()
    losses = cfg.losses_db() if "losses_db" in cfg.sections.get("run", {}) else [cfg.loss_db()]
    rows = ["loss_db,eta_t,q_x,mu1,mu2,p_mu1,p_mu2,p_mu3,R_sec,l_bits"]
    for loss in sorted(losses):
        model = ChannelModel.from_loss_db(loss, sigma)
        res = optimize_params(model, cfg.suite(), cfg.budget(), cfg.pulses, eta_t, seed=cfg.seed,
                              restarts=cfg.get("source", "restarts", 4, kind=int),
                              rep_rate=cfg.rep_rate, passive=cfg.passive)
        s = res.source
        vals = [loss, eta_t, s.q_x, s.mu[0], s.mu[1], *s.p_mu, res.rate.R_sec]
        rows.append(",".join(_g(v) for v in vals) + f",{res.rate.ell}")
        print(f"{loss:g} dB: q_x={s.q_x:.3f} mu=({s.mu[0]:.3f}, {s.mu[1]:.3f}) "
              f"p=({s.p_mu[0]:.3f}, {s.p_mu[1]:.3f}) R_sec={res.rate.R_sec:.4g}")
    run.write("source_params.csv", "\n".join(rows) + "\n")


def cmd_export_waveform(cfg: RunConfig, run: Run, args):
    if args.trace is not None:
        trace = trace_from_csv(args.trace, cfg.bin_duration, cfg.pulses_per_bin)
    else:
        trace = _trace(cfg, cfg.channel())
    full_scale = cfg.full_scale()
    if full_scale is None:
        full_scale = float(trace.bins.max())
    elif full_scale < trace.bins.max():
        raise ConfigError(f"waveform.full_scale: {full_scale:g} is below the trace maximum {trace.bins.max():g}")
    export_waveform(trace, full_scale, run.path("waveform.bin"))
    run.register("waveform.bin")
    print(f"wrote {len(trace)} samples, full scale {full_scale:.6g}")


COMMANDS = {
    "rytov": cmd_rytov,
    "sample": cmd_sample,
    "simulate": cmd_simulate,
    "ingest": cmd_ingest,
    "sweep-threshold": cmd_sweep_threshold,
    "keyrate-vs-loss": cmd_keyrate_vs_loss,
    "optimize": cmd_optimize,
    "export-waveform": cmd_export_waveform,
}


def _u64(text):
    try:
        v = int(text)
    except ValueError:
        raise argparse.ArgumentTypeError(f"not an integer: {text!r}") from None
    if not 0 <= v < 2 ** 64:
        raise argparse.ArgumentTypeError("seed must be an unsigned 64-bit integer")
    return v


def _positive_int(text):
    try:
        v = int(text)
    except ValueError:
        raise argparse.ArgumentTypeError(f"not an integer: {text!r}") from None
    if v < 1:
        raise argparse.ArgumentTypeError("must be >= 1")
    return v


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="fsqkd", description="Free-space decoy-state QKD with transmittance post-selection")
    sub = parser.add_subparsers(dest="command", required=True)
    for name in COMMANDS:
        p = sub.add_parser(name)
        p.add_argument("--config", required=True, type=Path, help="run configuration file")
        p.add_argument("--seed", type=_u64, help="override run.seed")
        p.add_argument("--out", type=Path, help=f"output directory (else ${OUTPUT_ENV}, else run.out)")
        p.add_argument("--threads", type=_positive_int, default=None, help="worker threads (default: all cores)")
        if name in ("ingest", "export-waveform"):
            p.add_argument("--trace", type=Path, help="transmittance trace CSV (bin_index,eta)")
        if name == "ingest":
            p.add_argument("--alice", type=Path, help="Alice tape CSV (slot,basis,intensity_index,bit)")
            p.add_argument("--detections", type=Path, help="detection tape CSV (timestamp_ps,detector)")
            p.add_argument("--gate-ps", type=int, default=None, help="acceptance half-width around each slot")
    return parser


def _output_dir(args, cfg: RunConfig) -> Path:
    if args.out is not None:
        return args.out
    env = os.environ.get(OUTPUT_ENV)
    if env:
        return Path(env)
    return Path(cfg.out_dir())


def main(argv: list[str] | None = None) -> int:
    argv = list(sys.argv[1:] if argv is None else argv)
    args = build_parser().parse_args(argv)
    try:
        cfg = RunConfig.from_file(args.config)
        if args.seed is not None:
            cfg.overrides["seed"] = args.seed
        out = _output_dir(args, cfg)
        run = Run(args.command, cfg, out)
        extra = COMMANDS[args.command](cfg, run, args)
        run.finish(extra)
    except (ConfigError, TapeError, FileNotFoundError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_INVALID
    except NoPositiveRate as exc:
        print(f"no positive rate: {exc}", file=sys.stderr)
        return EXIT_FAILURE
    except (ValueError, ArithmeticError, RuntimeError) as exc:
        print(f"failed: {exc}", file=sys.stderr)
        return EXIT_FAILURE
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
