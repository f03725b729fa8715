import json
import math

import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from twistwire import cli
from twistwire.cli import ConfigError, default_window, main, parse_angle, parse_config
from twistwire.linalg import SingularMatrixError


def write(tmp_path, text, name="run.toml"):
    p = tmp_path / name
    p.write_text(text)
    return p


def body(path):
    return [line for line in path.read_text().splitlines() if not line.startswith("#")]


def test_minimal_config_defaults():
    cfg = parse_config('mode = "levels"\nnu = 2.95\n')
    s = cfg.spec
    assert (s.L_y, s.L_z, s.lam, s.L_p, s.mass_ratio, s.Phi) == (20.0, 10.0, 17.5, 10.0, 0.067, 0.0)
    assert cfg.resolution == 1.0 and cfg.tol_unitarity == 1e-4


@pytest.mark.parametrize(
    "text,match",
    [
        ('mode = "levels"\nnu = -1\n', "nu"),
        ('mode = "levels"\nnu = 1\nL_y = 10\nL_z = 10\n', "square"),
        ('mode = "levels"\nnu = 1\ncolour = 3\n', "colour: unknown key"),
        ('mode = "levels"\nnu = 1\n[grid]\nspacing = 1\n', "grid.spacing: unknown key"),
        ('nu = 1\n', "mode: required"),
        ('mode = "levels"\n', "nu: required"),
        ('mode = "dance"\nnu = 1\n', "mode"),
        ('mode = "trace"\nnu = 1\n', "trace.Phi_list"),
        ('mode = "trace"\nnu = 1\n[trace]\nPhi_list = []\n', "trace.Phi_list"),
        ('mode = "trace"\nnu = 1\n[trace]\nPhi_list = ["pi", "pi/2"]\n', "sorted"),
        ('mode = "cscale"\nnu = 1\n[cscale]\ntheta_im = 0.7\n', "theta_im"),
        ('mode = "sweep"\nnu = 1\n[sweep]\nwindow = [90, 80]\n', "sweep.window"),
        ('mode = "sweep"\nnu = 1\n[sweep]\npoints = 1\n', "sweep.points"),
        ('mode = "sweep"\nnu = 1\nPhi = "banana"\n', "Phi"),
        ('mode = = "x"', "config"),
    ],
)
def test_config_errors(text, match):
    with pytest.raises(ConfigError, match=match):
        parse_config(text)


def test_phi_range_expands():
    cfg = parse_config('mode = "trace"\nnu = 2.95\n[trace]\nPhi_range = [0, "pi", "pi/8"]\n')
    assert len(cfg.Phi_list) == 9 and cfg.Phi_list[-1] == pytest.approx(math.pi)


@pytest.mark.parametrize(
    "text,value",
    [("pi/2", math.pi / 2), ("0.85pi", 0.85 * math.pi), ("3*pi/8", 3 * math.pi / 8), ("pi", math.pi), (1.25, 1.25)],
)
def test_parse_angle(text, value):
    assert parse_angle(text, "Phi") == pytest.approx(value, rel=1e-15)


@settings(max_examples=40, deadline=None)
@given(a=st.integers(0, 40), b=st.integers(1, 16))
def test_parse_angle_fractions(a, b):
    assert parse_angle(f"{a}*pi/{b}", "x") == pytest.approx(a * math.pi / b, rel=1e-14)


def test_default_windows():
    cfg = parse_config('mode = "sweep"\nnu = 2.95\n')
    lo, hi = default_window(cfg.spec, "sweep")
    assert 70.155 < lo < 71 and 112 < hi < 112.248
    lo_c, _ = default_window(cfg.spec, "cscale")
    assert lo_c < 70.155 - 49.49


def test_levels_mode(tmp_path):
    cfg = write(tmp_path, 'mode = "levels"\nnu = 3.95\n')
    assert main(["--config", str(cfg), "--out", str(tmp_path / "o")]) == 0
    rows = body(tmp_path / "o" / "levels.csv")
    assert rows[0] == "n,n_y,n_z,j,E_n_meV,mu_j_meV,eps_meV,in_window"
    inside = {(r.split(",")[1], r.split(",")[2], r.split(",")[3]) for r in rows[1:] if r.endswith(",1")}
    assert inside == {("2", "1", "3"), ("2", "1", "4"), ("3", "1", "1")}
    thresholds = body(tmp_path / "o" / "thresholds.csv")
    assert float(thresholds[1].split(",")[3]) == pytest.approx(70.155, abs=1e-3)
    manifest = json.loads((tmp_path / "o" / "manifest.json").read_text())
    assert manifest["status"] == "ok" and manifest["tolerances"]["unitarity"] == 1e-4
    assert manifest["config"]["spec"]["nu"] == 3.95


def test_exit_codes_for_bad_input(tmp_path, capsys):
    assert main(["--config", str(tmp_path / "missing.toml")]) == 2
    bad = write(tmp_path, 'mode = "levels"\nnu = 1\nL_y = 10\nL_z = 10\n')
    assert main(["--config", str(bad)]) == 2
    assert "square" in capsys.readouterr().err
    ok = write(tmp_path, 'mode = "levels"\nnu = 1\n', "ok.toml")
    assert main(["--config", str(ok), "--mode", "trace"]) == 2
    assert main(["--config", str(ok), "--workers", "0"]) == 2
    assert main(["--config", str(ok), "--resolution", "-1"]) == 2


SWEEP = """
mode = "sweep"
nu = 2.95
Phi = "pi/2"
[grid]
x_resolution = 2.0
[sweep]
window = [80.0, 100.0]
points = 5
adaptive = false
[run]
workers = 1
cache = false
"""


def test_sweep_mode_is_deterministic(tmp_path):
    cfg = write(tmp_path, SWEEP)
    for name in ("a", "b"):
        assert main(["--config", str(cfg), "--out", str(tmp_path / name)]) == 0
    name = "spectrum_Phi1.570796_nu2.95_ch1.csv"
    a, b = (tmp_path / d / name for d in ("a", "b"))
    assert body(a)[0] == "E_meV,T_1,theta_1_rad,R_sum,unitarity_defect,flagged"
    assert len(body(a)) == 6
    assert a.read_bytes() == b.read_bytes()
    manifest = json.loads((tmp_path / "a" / "manifest.json").read_text())
    assert manifest["unitarity"]["flagged_rows"] == 0 and manifest["grid"]["N_x"] == 100
    assert (tmp_path / "a" / "resonances.csv").exists()


def test_solver_failure_exit_code(tmp_path, monkeypatch):
    import twistwire.spectra

    def fail(*a, **k):
        raise SingularMatrixError("zero pivot", pivot=3)

    monkeypatch.setattr(twistwire.spectra, "sweep_energy", fail)
    cfg = write(tmp_path, SWEEP)
    assert main(["--config", str(cfg), "--out", str(tmp_path / "o")]) == 3
    manifest = json.loads((tmp_path / "o" / "manifest.json").read_text())
    assert manifest["status"] == "solver_failure" and manifest["partial"]


def test_postprocessing_failure_exit_code(tmp_path, monkeypatch):
    import twistwire.resonance

    def fail(*a, **k):
        raise ValueError("broken fit")

    monkeypatch.setattr(twistwire.resonance, "analyze_spectrum", fail)
    cfg = write(tmp_path, SWEEP)
    assert main(["--config", str(cfg), "--out", str(tmp_path / "o")]) == 4
    assert (tmp_path / "o" / "spectrum_Phi1.570796_nu2.95_ch1.csv").exists()


def test_cscale_mode(tmp_path):
    cfg = write(
        tmp_path,
        'mode = "cscale"\nnu = 2.95\n[cscale]\nseeds = [89.5]\nwindow = [85.0, 95.0]\nextrapolate = false\n',
    )
    assert main(["--config", str(cfg), "--out", str(tmp_path / "o")]) == 0
    rows = body(tmp_path / "o" / "cscale.csv")
    assert rows[0] == ",".join(cli.CSCALE_HEADER)
    first = rows[1].split(",")
    assert (first[2], first[3]) == ("2", "2")
    assert float(first[4]) == pytest.approx(89.7, abs=0.2)
