import json

import numpy as np
import pytest

from fsqkd.cli import main
from fsqkd.config import ConfigError, RunConfig, parse_value
from fsqkd.devices import NEW_SNSPD, OLD_SPAD, TABLE1
from fsqkd.turbulence import WAVEFORM_MAX, import_waveform

SIM = """
[channel]
loss_db = 30   # mean loss
sigma = 1
[source]
builtin = table1-37db
[detectors]
builtin = new-snspd
[run]
pulses = 5e5
bin_duration = 1e-4
seed = 5
write_tapes = true
"""


def write(tmp_path, text, name="run.ini"):
    p = tmp_path / name
    p.write_text(text)
    return p


def run(tmp_path, cmd, text, *extra, out="out"):
    cfg = write(tmp_path, text)
    code = main([cmd, "--config", str(cfg), "--out", str(tmp_path / out), *extra])
    return code, tmp_path / out


def test_parse_value():
    assert parse_value("3e10") == 3e10
    assert parse_value("42") == 42
    assert parse_value("true") is True and parse_value("False") is False
    assert parse_value('"new-snspd"') == "new-snspd"
    assert parse_value("1e-17, 6.2e-15") == [1e-17, 6.2e-15]
    assert parse_value("arts") == "arts"


def test_config_sections():
    cfg = RunConfig.from_text(SIM)
    assert cfg.channel().eta_o == pytest.approx(1e-3)
    assert cfg.source() == TABLE1[37.0]
    assert cfg.suite() == NEW_SNSPD
    assert cfg.seed == 5 and cfg.pulses == 500_000
    assert cfg.pulses_per_bin == 1000 and cfg.n_bins == 500
    assert cfg.policy().eta_t == 3e-4


def test_explicit_source_and_detector_overrides():
    cfg = RunConfig.from_text("""
[source]
q_x = 0.677
mu1 = 0.701
mu2 = 0.281
p_mu1 = 0.246
p_mu2 = 0.49
p_mu3 = 0.264
[detectors]
builtin = old-spad
e_mis = 0.01
[detectors.H]
Y0 = 1e-6
""")
    assert cfg.source() == TABLE1[40.0]
    suite = cfg.suite()
    assert suite.e_mis == 0.01
    assert suite.detectors["H"].Y0 == 1e-6 and suite.detectors["H"].b == OLD_SPAD.detectors["H"].b
    assert suite.detectors["V"] == OLD_SPAD.detectors["V"]


def test_path_physics_sigma():
    cfg = RunConfig.from_text("[channel]\neta_o = 1e-4\ncn2 = 1e-17\ndistance = 1e5\nwavelength = 1550e-9\n")
    assert cfg.sigma() ** 2 == pytest.approx(0.924, rel=0.01)


@pytest.mark.parametrize("text,field", [
    ("[channel]\nloss_db = 30\neta_o = 1e-3\nsigma = 1\n", "channel.eta_o"),
    ("[channel]\nloss_db = 30\n", "channel.sigma"),
    ("[channel]\nloss_db = 30\nsigma = 1\ncn2 = 1e-15\n", "channel.sigma"),
    ("[channel]\nloss_db = 30\ncn2 = 1e-15\ndistance = 1e3\n", "channel.wavelength"),
    ("[channel]\nloss_db = 30\nsigma = x\n", "channel.sigma"),
])
def test_channel_validation(text, field):
    with pytest.raises(ConfigError, match=field):
        RunConfig.from_text(text).channel()


@pytest.mark.parametrize("body,field", [
    ("q_x = 0.5\nmu1 = 0.3\nmu2 = 0.5\np_mu1 = 0.3\np_mu2 = 0.3\n", "source.mu2"),
    ("q_x = 0.5\nmu1 = 0.5\nmu2 = 0.3\np_mu1 = 0.3\np_mu2 = 0.3\np_mu3 = 0.5\n", "source.p_mu3"),
    ("q_x = 0.5\nmu1 = 0.5\nmu2 = 0.3\np_mu1 = 0.6\np_mu2 = 0.5\n", "source.p_mu2"),
    ("q_x = 1.5\nmu1 = 0.5\nmu2 = 0.3\np_mu1 = 0.3\np_mu2 = 0.3\n", "source.q_x"),
    ("q_x = 0.5\nmu2 = 0.3\np_mu1 = 0.3\np_mu2 = 0.3\n", "source.mu1"),
    ("builtin = table9\n", "source.builtin"),
])
def test_source_validation(body, field):
    with pytest.raises(ConfigError, match=field):
        RunConfig.from_text("[source]\n" + body).source()


@pytest.mark.parametrize("text,field", [
    ("[run]\npulses = 0\nseed = 1\n", "run.pulses"),
    ("[run]\npulses = 10\nseed = 1\n", "run.pulses"),
    ("[run]\npulses = 1e6\n", "run.seed"),
    ("[run]\npulses = 1e6\nseed = -3\n", "run.seed"),
    ("[run]\npulses = 1e6\nseed = 1\npolicy = sometimes\n", "run.policy"),
])
def test_run_validation(text, field):
    cfg = RunConfig.from_text(text)
    with pytest.raises(ConfigError, match=field):
        cfg.seed, cfg.n_bins, cfg.policy()


def test_unknown_keys_and_sections():
    with pytest.raises(ConfigError, match="channel.eta"):
        RunConfig.from_text("[channel]\neta = 1\n")
    with pytest.raises(ConfigError, match="unknown section"):
        RunConfig.from_text("[optics]\nx = 1\n")
    with pytest.raises(ConfigError, match="detectors.Q"):
        RunConfig.from_text("[detectors.Q]\nY0 = 1\n")
    with pytest.raises(ConfigError, match="syntax"):
        RunConfig.from_text("no section here\n")


def test_detector_validation():
    with pytest.raises(ConfigError, match="detectors.builtin"):
        RunConfig.from_text("[detectors]\nbuiltin = geiger\n").suite()
    with pytest.raises(ConfigError, match="detectors.H"):
        RunConfig.from_text("[detectors.H]\neta_det = 2\n").suite()


def test_rytov_command(tmp_path, capsys):
    text = "[channel]\ncn2 = 1e-17, 6.2e-15\ndistance = 100e3, 3e3\nwavelength = 1550e-9\n"
    code, out = run(tmp_path, "rytov", text)
    assert code == 0
    rows = (out / "rytov.csv").read_text().splitlines()
    assert rows[0] == "cn2,wavelength_m,distance_m,sigma2" and len(rows) == 3
    for row in rows[1:]:
        assert float(row.split(",")[3]) == pytest.approx(0.924, rel=0.01)
    assert "sigma^2=0.924" in capsys.readouterr().out
    manifest = json.loads((out / "manifest.json").read_text())
    assert manifest["command"] == "rytov" and "rytov.csv" in manifest["outputs"]
    assert (out / "config.ini").read_text() == text


def test_rytov_missing_wavelength(tmp_path, capsys):
    code, out = run(tmp_path, "rytov", "[channel]\ncn2 = 1e-17\ndistance = 1e5\n")
    assert code == 2
    assert "channel.wavelength" in capsys.readouterr().err
    assert not out.exists()


def test_simulate_then_ingest_round_trip(tmp_path):
    code, sim = run(tmp_path, "simulate", SIM)
    assert code == 0
    code, ing = run(tmp_path, "ingest", SIM, "--alice", str(sim / "alice_tape.csv"),
                    "--detections", str(sim / "detections.csv"), "--trace", str(sim / "trace.csv"), out="ing")
    assert code == 0
    assert (sim / "tallies.csv").read_bytes() == (ing / "tallies.csv").read_bytes()
    assert (ing / "diagnostics.csv").exists()


def test_ingest_reports_bad_tape(tmp_path, capsys):
    code, sim = run(tmp_path, "simulate", SIM)
    bad = tmp_path / "d.csv"
    lines = (sim / "detections.csv").read_text().splitlines()
    bad.write_text("\n".join([lines[0], lines[2], lines[1]] + lines[3:]) + "\n")
    code, _ = run(tmp_path, "ingest", SIM, "--alice", str(sim / "alice_tape.csv"), "--detections", str(bad),
                  "--trace", str(sim / "trace.csv"), out="ing")
    assert code == 2
    assert "d.csv:3" in capsys.readouterr().err


def test_simulate_deterministic_and_seed_override(tmp_path):
    text = SIM.replace("write_tapes = true", "write_bins = true")
    _, a = run(tmp_path, "simulate", text, out="a")
    _, b = run(tmp_path, "simulate", text, "--threads", "3", out="b")
    _, c = run(tmp_path, "simulate", text, "--seed", "6", out="c")
    for name in ("tallies.csv", "bins.csv", "trace.csv", "manifest.json"):
        assert (a / name).read_bytes() == (b / name).read_bytes()
    assert (a / "bins.csv").read_bytes() != (c / "bins.csv").read_bytes()
    assert json.loads((c / "manifest.json").read_text())["seed"] == 6


def test_output_directory_from_environment(tmp_path, monkeypatch):
    cfg = write(tmp_path, SIM.replace("write_tapes = true", ""))
    monkeypatch.setenv("FSQKD_OUTPUT_DIR", str(tmp_path / "env"))
    assert main(["sample", "--config", str(cfg)]) == 0
    assert (tmp_path / "env" / "trace.csv").exists()


def test_sweep_threshold(tmp_path):
    text = SIM.replace("pulses = 5e5", "pulses = 1e10").replace("bin_duration = 1e-4", "bin_duration = 1e-3")
    text = text.replace("write_tapes = true", "grid_points = 12\ngrid_min = 3e-5\ngrid_max = 3e-3")
    code, a = run(tmp_path, "sweep-threshold", text, out="a")
    assert code == 0
    rows = (a / "threshold_curve.csv").read_text().splitlines()
    assert rows[0].startswith("threshold,R_sec,l_bits,N_post,eta_avg") and len(rows) == 13
    best = json.loads((a / "manifest.json").read_text())["best_threshold"]
    assert 3e-5 <= best <= 3e-3
    code, b = run(tmp_path, "sweep-threshold", text, out="b")
    assert (a / "threshold_curve.csv").read_bytes() == (b / "threshold_curve.csv").read_bytes()
    one = text.replace("grid_points = 12", "grid_points = 1")
    code, c = run(tmp_path, "sweep-threshold", one, out="c")
    assert code == 0 and len((c / "threshold_curve.csv").read_text().splitlines()) == 2


def test_keyrate_vs_loss(tmp_path):
    text = """
[channel]
sigma = 1
[source]
builtin = table1-37db
[run]
pulses = 3e10
seed = 2
losses_db = 0, 37
monte_carlo = false
"""
    code, out = run(tmp_path, "keyrate-vs-loss", text)
    assert code == 0
    rows = [r.split(",") for r in (out / "keyrate_vs_loss.csv").read_text().splitlines()]
    assert rows[0] == ["loss_db", "R_sec_zero_cutoff", "R_sec_prts", "R_sec_arts_opt", "R_sec_mc_prts"]
    zero, prts, arts = (float(x) for x in rows[1][1:4])
    assert zero > 0 and prts > 0 and zero <= prts + 1 / 3e10 and arts >= prts
    assert float(rows[2][2]) > float(rows[2][1]) > 0
    assert rows[2][4] == ""


def test_keyrate_vs_loss_rejects_adaptive_policy(tmp_path, capsys):
    code, _ = run(tmp_path, "keyrate-vs-loss", "[channel]\nsigma = 1\n[run]\npulses = 1e6\nseed = 1\n"
                  "losses_db = 30\npolicy = arts\n")
    assert code == 2 and "run.policy" in capsys.readouterr().err


def test_optimize_command(tmp_path):
    text = "[channel]\nloss_db = 37\nsigma = 1\n[source]\noptimize = true\nrestarts = 0\n[run]\npulses = 3e10\nseed = 1\n"
    code, out = run(tmp_path, "optimize", text)
    assert code == 0
    rows = (out / "source_params.csv").read_text().splitlines()
    assert rows[0] == "loss_db,eta_t,q_x,mu1,mu2,p_mu1,p_mu2,p_mu3,R_sec,l_bits"
    vals = [float(x) for x in rows[1].split(",")]
    assert sum(vals[5:8]) == pytest.approx(1.0, abs=1e-8)
    assert vals[9] > 0


def test_optimize_infeasible_exit(tmp_path, capsys):
    text = "[channel]\nloss_db = 80\nsigma = 1\n[source]\noptimize = true\nrestarts = 0\n[run]\npulses = 3e10\nseed = 1\n"
    code, _ = run(tmp_path, "optimize", text)
    assert code == 3
    assert "no positive rate" in capsys.readouterr().err


def test_export_waveform_full_scale(tmp_path):
    trace = tmp_path / "t.csv"
    trace.write_text("bin_index,eta\n" + "".join(f"{i},0.25\n" for i in range(16)))
    code, out = run(tmp_path, "export-waveform", "[run]\nseed = 1\npulses = 1\n[waveform]\nfull_scale = 0.25\n",
                    "--trace", str(trace))
    assert code == 0
    samples, back = import_waveform(out / "waveform.bin")
    assert np.all(samples == WAVEFORM_MAX) and samples.size == 16


def test_export_waveform_sampled_and_scale_check(tmp_path, capsys):
    base = "[channel]\nloss_db = 30\nsigma = 1\n[run]\npulses = 1e7\nseed = 3\n"
    code, out = run(tmp_path, "export-waveform", base)
    assert code == 0
    samples, _ = import_waveform(out / "waveform.bin")
    assert samples.size == 1000 and samples.max() == WAVEFORM_MAX
    code, _ = run(tmp_path, "export-waveform", base + "[waveform]\nfull_scale = 1e-6\n", out="o2")
    assert code == 2 and "waveform.full_scale" in capsys.readouterr().err


def test_missing_config_file(tmp_path):
    assert main(["sample", "--config", str(tmp_path / "none.ini")]) == 2


def test_bad_arguments(tmp_path):
    cfg = write(tmp_path, SIM)
    with pytest.raises(SystemExit) as exc:
        main(["simulate", "--config", str(cfg), "--seed", "-1"])
    assert exc.value.code == 2
    with pytest.raises(SystemExit):
        main(["fly", "--config", str(cfg)])
