"""Acceptance criteria 1-13, each at its stated tolerance.

Every test records one PASS/FAIL line (printed in the pytest terminal
summary). Run standalone with ``python3 tests/test_acceptance.py [numbers]``.
Criterion 12 belongs to the extended suite (TWISTWIRE_EXTENDED=1).
"""

import functools
import itertools
import math
import os
import sys
from pathlib import Path

import numpy as np
import pytest

from twistwire.cli import main as cli_main
from twistwire.complex_scaling import (
    assemble_mode_space_operator,
    extrapolated_resonances,
    lattice_channel_thresholds,
    locate_resonances,
    richardson,
)
from twistwire.discretization import assemble_metric_hamiltonian, assemble_twistframe_hamiltonian, build_grid
from twistwire.model import WaveguideSpec, level_table, potential_value, reference_transmission_1d, subband_energy
from twistwire.resonance import PhaseJump, analyze_spectrum, lifetime
from twistwire.scattering import lattice_thresholds, solve_scattering, unitarity_defect
from twistwire.spectra import sweep_energy, sweep_twist

sys.path.insert(0, str(Path(__file__).parent))
from oracles import subband, well_levels, well_minimum  # noqa: E402

E1 = subband(1, 1)
E2 = subband(2, 1)


def _problem(resolution=1.0, **kw):
    spec = WaveguideSpec(**kw)
    grid = build_grid(spec, resolution)
    return spec, grid, assemble_twistframe_hamiltonian(grid, spec)


def criterion_1(tmp):
    out = Path(tmp) / "levels"
    cfg = Path(tmp) / "levels.toml"
    cfg.write_text('mode = "levels"\nnu = 2.95\n')
    code = cli_main(["--config", str(cfg), "--out", str(out)])
    rows = [r.split(",") for r in (out / "thresholds.csv").read_text().splitlines() if not r.startswith("#")][1:]
    got = [float(r[3]) for r in rows[:3]]
    err = max(abs(g - e) for g, e in zip(got, (70.155, 112.248, 182.403)))
    return code == 0 and err < 1e-3, f"E_1..3 = {got[0]:.4f}, {got[1]:.4f}, {got[2]:.4f} meV (max dev {err:.1e})"


def criterion_2(tmp=None):
    a = potential_value(0.0, WaveguideSpec(nu=2.95))
    b = potential_value(0.0, WaveguideSpec(nu=3.95))
    ok = abs(a + 66.262) < 1e-3 and abs(b + 111.186) < 1e-3
    return ok, f"V(0) = {a:.4f} (nu=2.95), {b:.4f} (nu=3.95) meV; closed form {well_minimum(2.95):.4f}, {well_minimum(3.95):.4f}"


def criterion_3(tmp=None):
    table = level_table(WaveguideSpec(nu=3.95), subband_energy(2, 1, WaveguideSpec()))
    inside = table.in_window()
    labels = sorted((table.thresholds[l.n - 1].n_y, table.thresholds[l.n - 1].n_z, l.j) for l in inside)
    ok = len(inside) == 3 and {(ny, nz) for ny, nz, _ in labels} == {(2, 1), (3, 1)} and {
        (n, j) for n, j in ((l.n, l.j) for l in inside)
    } == {(2, 3), (2, 4), (3, 1)}
    return ok, f"{len(inside)} levels in (E_1, E_2): " + ", ".join(f"eps_{l.n},{l.j}={l.energy:.2f}" for l in inside)


def criterion_4(tmp=None):
    spec, grid, H = _problem(nu=0.0, Phi=0.0)
    worst_T = worst_off = worst_u = 0.0
    for E in np.linspace(E1 + 0.5, E2 - 0.5, 20):
        s = solve_scattering(H, grid, spec, float(E))
        worst_T = max(worst_T, abs(s.T[0] - 1.0))
        worst_off = max(worst_off, float(np.max(s.T[1:], initial=0.0)), float(np.max(s.R)))
        worst_u = max(worst_u, unitarity_defect(s))
    ok = worst_T < 1e-3 and worst_off < 1e-6 and worst_u < 1e-4
    return ok, f"max|T_11-1| = {worst_T:.1e}, max other T/R = {worst_off:.1e}, max defect = {worst_u:.1e}"


def criterion_5(tmp=None):
    # the discrete lead's first threshold is the zero of kinetic energy on the grid
    spec, grid, H = _problem(nu=2.95, Phi=0.0)
    E1h = lattice_thresholds(grid, spec, 1)[0]
    worst = 0.0
    for E in np.linspace(E1h + 3.0, E2 - 1.0, 20):
        s = solve_scattering(H, grid, spec, float(E))
        worst = max(worst, abs(s.T[0] - reference_transmission_1d(float(E) - E1h, spec)))
    return worst < 1e-3, f"max|T_11 - T_1D| = {worst:.1e} over 20 energies (E_kin from lattice E_1 = {E1h:.3f})"


def criterion_6(tmp=None):
    worst = 0.0
    for Phi in (math.pi / 2, math.pi):
        spec, grid, H = _problem(nu=2.95, Phi=Phi)
        M = assemble_metric_hamiltonian(grid, spec)
        for E in np.linspace(E1 + 1.0, E2 + 12.0, 10):
            a = solve_scattering(H, grid, spec, float(E))
            b = solve_scattering(M, grid, spec, float(E))
            worst = max(worst, float(np.max(np.abs(a.T - b.T))))
    return worst < 1e-6, f"max|T_twist - T_metric| = {worst:.1e} (Phi = pi/2, pi; 10 energies each)"


@functools.lru_cache(maxsize=None)
def _fig4_spectrum():
    spec = WaveguideSpec(nu=2.95, Phi=math.pi / 2)
    return sweep_energy(spec, 1, (E1 + 0.05, E2 - 0.05), 60, True)


def criterion_7(tmp=None):
    s = _fig4_spectrum()
    found, unfit = analyze_spectrum(s)
    ok = len(found) == 2 and all(r.phase_jump is PhaseJump.ABRUPT_PI and r.T_min < 0.01 for r in found)
    detail = f"{len(found)} resonances in (E_1, E_2) from {len(s)} adaptive points, min T_11 = {np.nanmin(s.T[:, 0]):.4f}"
    if found:
        detail += "; " + ", ".join(f"E_r={r.E_r:.3f} {r.phase_jump.value} T_min={r.T_min:.3g}" for r in found)
    return ok, detail


def _track_level(spec, label, Phi_target, step=math.pi / 8, window=(55.0, 140.0)):
    """eps_{n,j} continued from zero twist to Phi_target on the complex-scaling route (1 nm, dx-extrapolated)."""
    Phis = list(np.arange(0.0, Phi_target + 1e-9, step))
    tracks = sweep_twist(spec, Phis, 1, window, method="complex_scaling", seeds=[label])
    tr = next(t for t in tracks if t.label == label)
    return tr


def criterion_8(tmp=None):
    spec = WaveguideSpec(nu=2.95, Phi=math.pi)
    tr = _track_level(spec.with_(Phi=0.0), (2, 1), math.pi)
    if tr.closed or abs(tr.samples[-1].Phi - math.pi) > 1e-9:
        return False, f"eps_2,1 track lost before Phi = pi ({tr.close_reason})"
    E_cs = tr.samples[-1].E_r
    if not E1 + 0.2 < E_cs < E2:
        return False, f"eps_2,1 at Phi = pi sits at {E_cs:.3f} meV, outside the one-channel window"
    s = sweep_energy(spec, 1, (E_cs - 0.5, E_cs + 0.5), 15, True, resolution=0.5)
    found, _ = analyze_spectrum(s)
    near = [r for r in found if abs(r.E_r - E_cs) < 0.5]
    detail = (
        f"eps_2,1 at {E_cs:.3f} meV (complex scaling, Gamma = {tr.samples[-1].Gamma:.2e}); 0.5 nm sweep: {len(s)} points, "
        f"min T_11 = {np.nanmin(s.T[:, 0]):.6f}, {len(near)} fitted"
    )
    if not near:
        return False, detail
    G = near[0].Gamma
    return 0.004 / 3 <= G <= 0.012, detail + f", Gamma = {G * 1e3:.2f} ueV"


def criterion_9(tmp=None):
    tau = lifetime(0.004)
    return abs(tau - 164.6) <= 0.1, f"hbar/Gamma(4 ueV) = {tau:.3f} ps"


def criterion_10(tmp=None):
    # zero twist: the transverse modes are exact, so the mode-space operator is the full one
    spec = WaveguideSpec(nu=2.95, Phi=0.0)
    exact = [E2 + mu for mu in well_levels(2.95)]
    values = []
    for res in (1.0, 0.5):
        grid = build_grid(spec, res)
        E2h = lattice_thresholds(grid, spec, 2)[1]
        K = assemble_mode_space_operator(grid, spec, 0.3j, 4)
        ths = lattice_channel_thresholds(grid, spec, 200.0)
        row = []
        for mu in well_levels(2.95):
            found, _ = locate_resonances(K, (40.0, 112.0), [E2h + mu], thresholds=ths, theta=0.3j, k=2)
            row.append(min(found, key=lambda f: abs(f.value - (E2h + mu))).value)
        values.append(row)
    extr = [richardson(c, f) for c, f in zip(*values)]
    dev = max(abs(v.real - e) for v, e in zip(extr, exact))
    im = max(abs(v.imag) for v in extr)
    detail = ", ".join(f"{v.real:.4f}{v.imag:+.1e}i (exact {e:.4f})" for v, e in zip(extr, exact))
    return dev < 0.01 and im < 0.01, f"max|Re-exact| = {dev:.1e}, max|Im| = {im:.1e}: {detail}"


def criterion_11(tmp=None):
    spec = WaveguideSpec(nu=2.95, Phi=math.pi / 2)
    grid = build_grid(spec, 1.0)
    found, _ = analyze_spectrum(_fig4_spectrum())
    table = level_table(spec, E2)
    seeds = [lev.energy for lev in table.in_window()]
    per_theta = []
    for th in (0.2, 0.3, 0.4):
        got, _ = extrapolated_resonances(grid, spec, complex(0, th), seeds, (E1, E2), k=3)
        per_theta.append({r.label if r.label else i: r.value for i, r in enumerate(got)})
    drifts = []
    for i, seed in enumerate(seeds):
        vals = [min(d.values(), key=lambda v: abs(v - seed)) for d in per_theta if d]
        drifts.append(max(abs(a - b) for a, b in itertools.combinations(vals, 2)) if len(vals) == 3 else math.inf)
    cs = [min(per_theta[1].values(), key=lambda v: abs(v - s)) for s in seeds] if per_theta[1] else []
    detail = "complex scaling: " + ", ".join(f"{v.real:.3f}{v.imag:+.2e}i" for v in cs)
    detail += f"; theta drift = {', '.join(f'{d:.1e}' for d in drifts)} meV; scattering fits: {len(found)}"
    if len(found) < 2 or len(cs) < 2:
        return False, detail
    ok = all(d < 0.05 for d in drifts)
    for lam in cs:
        fit = min(found, key=lambda r: abs(r.E_r - lam.real))
        G_cs = -2 * lam.imag
        ok &= abs(lam.real - fit.E_r) < 0.5 and G_cs > 0 and 0.5 <= G_cs / fit.Gamma <= 2.0
    return ok, detail


def criterion_12(tmp=None):
    spec = WaveguideSpec(nu=2.95)
    Phis = list(np.arange(0.0, 3 * math.pi + 1e-9, math.pi / 8))
    tracks = sweep_twist(spec, Phis, 1, (55.0, 140.0), method="complex_scaling")
    E2h = lattice_thresholds(build_grid(spec, 1.0), spec, 2)[1]
    return check_trajectories(tracks, E2h)


def check_trajectories(tracks, E2h):
    by_label = {tr.label: tr for tr in tracks}
    notes, ok = [], True
    mono = [tr.label for tr in tracks if not tr.is_monotone(slack=0.05)]
    ok &= not mono
    notes.append(f"non-monotone: {mono or 'none'}")
    for label in ((2, 2), (2, 3)):
        tr = by_label.get(label)
        if tr is None:
            ok = False
            notes.append(f"{label} missing")
            continue
        last = tr.samples[-1]
        at_E2 = tr.threshold is not None and abs(tr.threshold - E2h) < 1e-6
        ends = tr.closed and at_E2 and last.E_r < E2h and last.Gamma < 1e-3
        ok &= ends
        notes.append(f"{label} last E_r={last.E_r:.2f} Gamma={last.Gamma:.1e} ({tr.close_reason or 'open'})")
    tr = by_label.get((2, 1))
    if tr is None:
        return False, "; ".join(notes + ["(2, 1) missing"])
    below = [s for s in tr.samples if s.E_r < E2h]
    above = [s for s in tr.samples if s.E_r > E2h]
    if not below or not above:
        ok = False
        notes.append(f"(2, 1) does not cross E_2 (max E_r {tr.E_r.max():.2f})")
    else:
        g0, g1 = below[-1].Gamma, max(s.Gamma for s in above)
        ok &= g1 > 0 and g1 >= 10 * g0
        notes.append(f"(2, 1) Gamma {g0:.1e} -> {g1:.1e} across E_2")
    return ok, "; ".join(notes)


SWEEP_CONFIG = """
mode = "sweep"
nu = 3.95
Phi = "pi/2"
[sweep]
window = [92.0, 97.0]
points = 21
[run]
workers = 1
cache = false
"""


def criterion_13(tmp):
    cfg = Path(tmp) / "sweep.toml"
    cfg.write_text(SWEEP_CONFIG)
    bodies = []
    for name in ("first", "second"):
        out = Path(tmp) / name
        code = cli_main(["--config", str(cfg), "--out", str(out)])
        if code != 0:
            return False, f"sweep exited with {code}"
        files = sorted(out.glob("*.csv"))
        bodies.append({f.name: [l for l in f.read_text().splitlines() if not l.startswith("#")] for f in files})
    same = bodies[0] == bodies[1]
    rows = sum(len(v) for v in bodies[0].values())
    return same, f"{len(bodies[0])} CSV files, {rows} lines, identical = {same}"


CRITERIA = {n: globals()[f"criterion_{n}"] for n in range(1, 14)}


def _run(number, tmp_path, report):
    ok, detail = CRITERIA[number](tmp_path)
    report(number, ok, detail)


@pytest.mark.parametrize("number", [1, 2, 3, 9])
def test_instant_criteria(number, tmp_path, report):
    _run(number, tmp_path, report)


@pytest.mark.slow
@pytest.mark.parametrize("number", [4, 5, 6, 7, 8, 10, 11, 13])
def test_computed_criteria(number, tmp_path, report):
    _run(number, tmp_path, report)


@pytest.mark.extended
def test_trajectory_criterion(tmp_path, report):
    _run(12, tmp_path, report)


if __name__ == "__main__":
    import tempfile

    wanted = [int(a) for a in sys.argv[1:]] or sorted(CRITERIA)
    if "12" not in sys.argv[1:] and not os.environ.get("TWISTWIRE_EXTENDED"):
        wanted = [n for n in wanted if n != 12]
    with tempfile.TemporaryDirectory() as tmp:
        for n in wanted:
            ok, detail = CRITERIA[n](tmp)
            print(f"criterion {n:>2}: {'PASS' if ok else 'FAIL'}  {detail}", flush=True)
