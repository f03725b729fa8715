"""Command-line driver: configuration, run modes and file outputs.

A run is described by a TOML document; ``mode`` and ``nu`` are required and
everything else defaults to the reference wire (20 x 10 nm GaAs section,
L_p = 10 nm, lam = 17.5 nm). Example::

    mode = "sweep"
    nu = 2.95
    Phi = "pi/2"

    [sweep]
    window = [85.0, 112.0]
    points = 60
"""

from __future__ import annotations

import argparse
import json
import logging
import math
import os
import platform
import re
import sys
import time
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

try:
    import tomllib
except ModuleNotFoundError:  # Python < 3.11
    import tomli as tomllib

from . import __version__
from .linalg import ConvergenceError, SingularMatrixError
from .model import WaveguideSpec, bound_levels, level_table, subband_energy
from .resonance import FitError

logger = logging.getLogger(__name__)

MODES = ("levels", "sweep", "trace", "cscale")
EXIT_OK, EXIT_CONFIG, EXIT_SOLVER, EXIT_POST = 0, 2, 3, 4

_SPEC_KEYS = {"L_y", "L_z", "mass_ratio", "nu", "L_p", "Phi", "lam", "x_half"}
_SECTIONS = {
    "grid": {"resolution", "x_resolution", "M", "solver"},
    "sweep": {"window", "points", "adaptive", "channel", "min_step", "max_points"},
    "trace": {"Phi_list", "Phi_range", "method", "window", "points"},
    "cscale": {"theta_im", "seeds", "window", "extrapolate"},
    "tolerances": {"unitarity", "fit", "theta_drift"},
    "run": {"out", "workers", "cache"},
}


class ConfigError(ValueError):
    pass


@dataclass
class RunConfig:
    mode: str
    spec: WaveguideSpec
    resolution: float = 1.0
    x_resolution: float | None = None
    M: int | None = None
    solver: str = "auto"
    window: tuple[float, float] | None = None
    points: int = 50
    adaptive: bool = True
    channel: int = 1
    min_step: float = 1e-5
    max_points: int = 4000
    Phi_list: list[float] = field(default_factory=list)
    trace_method: str = "scattering"
    theta_im: list[float] = field(default_factory=lambda: [0.3])
    seeds: list[float] | None = None
    extrapolate: bool = True
    out: str = "out"
    workers: int = field(default_factory=lambda: os.cpu_count() or 1)
    cache: bool = True
    tol_unitarity: float = 1e-4
    tol_fit: float = 0.05
    tol_theta_drift: float = 0.05

    def to_dict(self) -> dict:
        d = asdict(self)
        d["spec"] = self.spec.to_dict()
        return d


_PI_RE = re.compile(r"^\s*([0-9]*\.?[0-9]*)\s*\*?\s*pi\s*(?:/\s*([0-9]*\.?[0-9]+))?\s*$")


def parse_angle(value, path: str) -> float:
    """Angle in rad from a number or a string like ``"pi/2"``, ``"0.85pi"``, ``"3*pi/8"``."""
    if isinstance(value, bool):
        raise ConfigError(f"{path}: expected an angle, got {value!r}")
    if isinstance(value, (int, float)):
        return float(value)
    if isinstance(value, str):
        m = _PI_RE.match(value)
        if m:
            factor = float(m.group(1)) if m.group(1) not in ("", ".") else 1.0
            denom = float(m.group(2)) if m.group(2) else 1.0
            return factor * math.pi / denom
    raise ConfigError(f"{path}: cannot read angle {value!r}")


def _number(value, path, *, positive=False, integer=False, minimum=None):
    if isinstance(value, bool) or not isinstance(value, (int, float)):
        raise ConfigError(f"{path}: expected a number, got {value!r}")
    if integer and int(value) != value:
        raise ConfigError(f"{path}: expected an integer, got {value!r}")
    if not math.isfinite(value):
        raise ConfigError(f"{path}: must be finite")
    if positive and value <= 0:
        raise ConfigError(f"{path}: must be positive, got {value!r}")
    if minimum is not None and value < minimum:
        raise ConfigError(f"{path}: must be >= {minimum}, got {value!r}")
    return int(value) if integer else float(value)


def _window(value, path):
    if not isinstance(value, list) or len(value) != 2:
        raise ConfigError(f"{path}: expected [E_lo, E_hi]")
    lo, hi = (_number(v, f"{path}[{i}]") for i, v in enumerate(value))
    if not hi > lo:
        raise ConfigError(f"{path}: empty window [{lo}, {hi}]")
    return (lo, hi)


def parse_config(text: str) -> RunConfig:
    """Validated :class:`RunConfig` from a TOML document."""
    try:
        doc = tomllib.loads(text)
    except tomllib.TOMLDecodeError as exc:
        raise ConfigError(f"config: {exc}") from exc
    for key in doc:
        if key not in _SPEC_KEYS and key not in _SECTIONS and key != "mode":
            raise ConfigError(f"{key}: unknown key")
    for section, allowed in _SECTIONS.items():
        if section in doc:
            if not isinstance(doc[section], dict):
                raise ConfigError(f"{section}: expected a table")
            for key in doc[section]:
                if key not in allowed:
                    raise ConfigError(f"{section}.{key}: unknown key")
    for key in ("mode", "nu"):
        if key not in doc:
            raise ConfigError(f"{key}: required key missing")
    mode = doc["mode"]
    if mode not in MODES:
        raise ConfigError(f"mode: must be one of {', '.join(MODES)}, got {mode!r}")

    spec_kwargs = {}
    for key in _SPEC_KEYS & doc.keys():
        path = key
        if key == "Phi":
            spec_kwargs[key] = parse_angle(doc[key], path)
        else:
            spec_kwargs[key] = _number(doc[key], path)
    try:
        spec = WaveguideSpec(**spec_kwargs)
    except ValueError as exc:
        raise ConfigError(f"spec: {exc}") from exc

    cfg = RunConfig(mode=mode, spec=spec)
    g = doc.get("grid", {})
    if "resolution" in g:
        cfg.resolution = _number(g["resolution"], "grid.resolution", positive=True)
    if "x_resolution" in g:
        cfg.x_resolution = _number(g["x_resolution"], "grid.x_resolution", positive=True)
    if "M" in g:
        cfg.M = _number(g["M"], "grid.M", integer=True, minimum=1)
    if "solver" in g:
        if g["solver"] not in ("auto", "direct", "sweep"):
            raise ConfigError(f"grid.solver: must be auto, direct or sweep, got {g['solver']!r}")
        cfg.solver = g["solver"]

    s = doc.get("sweep", {})
    if "window" in s:
        cfg.window = _window(s["window"], "sweep.window")
    if "points" in s:
        cfg.points = _number(s["points"], "sweep.points", integer=True, minimum=2)
    if "adaptive" in s:
        if not isinstance(s["adaptive"], bool):
            raise ConfigError("sweep.adaptive: expected true or false")
        cfg.adaptive = s["adaptive"]
    if "channel" in s:
        cfg.channel = _number(s["channel"], "sweep.channel", integer=True, minimum=1)
    if "min_step" in s:
        cfg.min_step = _number(s["min_step"], "sweep.min_step", positive=True)
    if "max_points" in s:
        cfg.max_points = _number(s["max_points"], "sweep.max_points", integer=True, minimum=2)

    tr = doc.get("trace", {})
    if "Phi_list" in tr and "Phi_range" in tr:
        raise ConfigError("trace: give either Phi_list or Phi_range, not both")
    if "Phi_list" in tr:
        if not isinstance(tr["Phi_list"], list):
            raise ConfigError("trace.Phi_list: expected a list")
        cfg.Phi_list = [parse_angle(v, f"trace.Phi_list[{i}]") for i, v in enumerate(tr["Phi_list"])]
    if "Phi_range" in tr:
        r = tr["Phi_range"]
        if not isinstance(r, list) or len(r) != 3:
            raise ConfigError("trace.Phi_range: expected [start, stop, step]")
        start, stop, step = (parse_angle(v, f"trace.Phi_range[{i}]") for i, v in enumerate(r))
        if step <= 0 or stop < start:
            raise ConfigError("trace.Phi_range: need step > 0 and stop >= start")
        n = int(math.floor((stop - start) / step + 1e-9)) + 1
        cfg.Phi_list = [start + i * step for i in range(n)]
    if any(b < a for a, b in zip(cfg.Phi_list[:-1], cfg.Phi_list[1:])):
        raise ConfigError("trace.Phi_list: angles must be sorted")
    if any(p < 0 for p in cfg.Phi_list):
        raise ConfigError("trace.Phi_list: angles must be >= 0")
    if "method" in tr:
        if tr["method"] not in ("scattering", "complex_scaling"):
            raise ConfigError(f"trace.method: must be scattering or complex_scaling, got {tr['method']!r}")
        cfg.trace_method = tr["method"]
    if "window" in tr:
        cfg.window = _window(tr["window"], "trace.window")
    if "points" in tr:
        cfg.points = _number(tr["points"], "trace.points", integer=True, minimum=2)
    if mode == "trace" and not cfg.Phi_list:
        raise ConfigError("trace.Phi_list: at least one angle required in trace mode")

    c = doc.get("cscale", {})
    if "theta_im" in c:
        vals = c["theta_im"] if isinstance(c["theta_im"], list) else [c["theta_im"]]
        cfg.theta_im = [_number(v, f"cscale.theta_im[{i}]", positive=True) for i, v in enumerate(vals)]
        if any(v > 0.5 for v in cfg.theta_im):
            raise ConfigError("cscale.theta_im: values must lie in (0, 0.5]")
    if "seeds" in c:
        if not isinstance(c["seeds"], list):
            raise ConfigError("cscale.seeds: expected a list of energies")
        cfg.seeds = [_number(v, f"cscale.seeds[{i}]") for i, v in enumerate(c["seeds"])]
    if "window" in c:
        cfg.window = _window(c["window"], "cscale.window")
    if "extrapolate" in c:
        if not isinstance(c["extrapolate"], bool):
            raise ConfigError("cscale.extrapolate: expected true or false")
        cfg.extrapolate = c["extrapolate"]

    t = doc.get("tolerances", {})
    if "unitarity" in t:
        cfg.tol_unitarity = _number(t["unitarity"], "tolerances.unitarity", positive=True)
    if "fit" in t:
        cfg.tol_fit = _number(t["fit"], "tolerances.fit", positive=True)
    if "theta_drift" in t:
        cfg.tol_theta_drift = _number(t["theta_drift"], "tolerances.theta_drift", positive=True)

    r = doc.get("run", {})
    if "out" in r:
        if not isinstance(r["out"], str):
            raise ConfigError("run.out: expected a path string")
        cfg.out = r["out"]
    if "workers" in r:
        cfg.workers = _number(r["workers"], "run.workers", integer=True, minimum=1)
    if "cache" in r:
        if not isinstance(r["cache"], bool):
            raise ConfigError("run.cache: expected true or false")
        cfg.cache = r["cache"]

    return cfg


def default_window(spec: WaveguideSpec, mode: str) -> tuple[float, float]:
    """One-channel window (E_1, E_2); cscale also covers the bound levels below E_1."""
    E1 = subband_energy(1, 1, spec)
    E2 = level_table(spec, E1 + 1.0).thresholds[1].energy
    if mode == "cscale":
        mus = bound_levels(spec)
        return (E1 + (mus[0] if mus else 0.0) - 1.0, E2)
    return (E1 + 0.5, E2 - 0.01)


# ---------------------------------------------------------------- output


def _fmt(v) -> str:
    if isinstance(v, (bool, np.bool_)):
        return "1" if v else "0"
    if isinstance(v, (int, np.integer)):
        return str(int(v))
    if isinstance(v, (float, np.floating)):
        v = float(v)
        if math.isnan(v):
            return "nan"
        return f"{v:.12g}"
    return str(v)


def write_csv(path: Path, header: list[str], rows, meta: dict) -> None:
    """CSV with a ``#`` metadata block, one header line and fixed 12-digit floats."""
    lines = [f"# {k}: {json.dumps(meta[k], sort_keys=True)}" for k in sorted(meta)]
    lines.append(",".join(header))
    lines.extend(",".join(_fmt(v) for v in row) for row in rows)
    path.write_text("\n".join(lines) + "\n")


def spectrum_rows(spectrum):
    n = spectrum.n_channels
    header = ["E_meV"] + [f"T_{m}" for m in range(1, n + 1)] + [f"theta_{m}_rad" for m in range(1, n + 1)]
    header += ["R_sum", "unitarity_defect", "flagged"]
    rows = []
    for i in range(len(spectrum)):
        rows.append(
            [spectrum.E[i], *spectrum.T[i], *spectrum.theta[i], spectrum.R_sum[i], spectrum.defect[i], bool(spectrum.flagged[i])]
        )
    return header, rows


RESONANCE_HEADER = ["Phi", "nu", "channel", "E_r_meV", "Gamma_meV", "q", "type", "phase_jump", "lifetime_ps"]


def resonance_rows(resonances):
    rows = []
    for r in resonances:
        rows.append([
            r.Phi, r.nu, f"{r.channel[0]}-{r.channel[1]}", r.E_r, r.Gamma,
            float("nan") if r.q is None else r.q, r.type.value, r.phase_jump.value, r.lifetime_ps,
        ])
    return rows


CSCALE_HEADER = ["Phi", "nu", "label_n", "label_j", "Re_meV", "Im_meV", "theta_im", "residual"]


# ---------------------------------------------------------------- modes


def _run_levels(cfg, out, manifest):
    spec = cfg.spec
    E1 = subband_energy(1, 1, spec)
    table = level_table(spec, max(E1 + 200.0, E1 + 1.0))
    E2 = table.threshold(2)
    rows = []
    mus = dict((b.j, b.energy) for b in table.bound)
    for lev in table.combined:
        th = table.thresholds[lev.n - 1]
        rows.append([lev.n, th.n_y, th.n_z, lev.j, th.energy, mus[lev.j], lev.energy, lev.in_window])
    write_csv(
        out / "levels.csv",
        ["n", "n_y", "n_z", "j", "E_n_meV", "mu_j_meV", "eps_meV", "in_window"],
        rows,
        {"spec": spec.to_dict(), "E_1": E1, "E_2": E2},
    )
    write_csv(
        out / "thresholds.csv",
        ["n", "n_y", "n_z", "E_n_meV"],
        [[t.n, t.n_y, t.n_z, t.energy] for t in table.thresholds],
        {"spec": spec.to_dict()},
    )
    manifest["outputs"] += ["levels.csv", "thresholds.csv"]
    manifest["in_window"] = [[lev.n, lev.j, lev.energy] for lev in table.in_window()]


def _run_sweep(cfg, out, manifest):
    from .resonance import analyze_spectrum
    from .spectra import sweep_energy

    cache = out / "cache" / f"sweep_ch{cfg.channel}.jsonl" if cfg.cache else None
    spectrum = sweep_energy(
        cfg.spec, cfg.channel, cfg.window, cfg.points, cfg.adaptive,
        resolution=cfg.resolution, x_resolution=cfg.x_resolution, M=cfg.M, solver=cfg.solver,
        workers=cfg.workers, cache_path=cache, min_step=cfg.min_step, max_points=cfg.max_points,
        tolerance=cfg.tol_unitarity,
    )
    name = f"spectrum_Phi{cfg.spec.Phi:.6f}_nu{cfg.spec.nu:g}_ch{cfg.channel}.csv"
    header, rows = spectrum_rows(spectrum)
    write_csv(out / name, header, rows, {"spec": cfg.spec.to_dict(), "channel": cfg.channel, **spectrum.meta})
    manifest["outputs"].append(name)
    manifest["unitarity"] = {
        "max_defect": float(np.max(spectrum.defect)) if len(spectrum) else 0.0,
        "flagged_rows": int(np.sum(spectrum.flagged)),
        "rows": len(spectrum),
    }
    try:
        resonances, unfit = analyze_spectrum(spectrum)
    except Exception as exc:  # post-processing is reported separately from the solve
        raise _PostProcessingError(str(exc)) from exc
    write_csv(out / "resonances.csv", RESONANCE_HEADER, resonance_rows(resonances), {"spec": cfg.spec.to_dict()})
    manifest["outputs"].append("resonances.csv")
    manifest["unfit_windows"] = [[list(map(float, w)), msg] for w, msg, _ in unfit]


def _run_trace(cfg, out, manifest):
    from .spectra import sweep_twist

    tracks = sweep_twist(
        cfg.spec, cfg.Phi_list, cfg.channel, cfg.window, method=cfg.trace_method,
        base_points=cfg.points, resolution=cfg.resolution, workers=cfg.workers,
        cache_dir=(out / "cache") if cfg.cache else None, theta=complex(0.0, cfg.theta_im[0]),
    )
    rows = []
    for k, tr in enumerate(tracks):
        n, j = tr.label if tr.label is not None else (0, 0)
        for s in tr.samples:
            rows.append([k, n, j, s.Phi, s.E_r, s.Gamma, s.type, tr.closed, tr.ambiguous])
    write_csv(
        out / "trajectories.csv",
        ["track", "label_n", "label_j", "Phi", "E_r_meV", "Gamma_meV", "type", "closed", "ambiguous"],
        rows,
        {"spec": cfg.spec.to_dict(), "channel": cfg.channel, "method": cfg.trace_method},
    )
    manifest["outputs"].append("trajectories.csv")
    manifest["tracks"] = [
        {"label": tr.label, "samples": len(tr.samples), "closed": tr.closed, "reason": tr.close_reason,
         "monotone": tr.is_monotone(0.05)}
        for tr in tracks
    ]


def _run_cscale(cfg, out, manifest):
    from .complex_scaling import extrapolated_resonances, nearest_label, scaled_resonances
    from .discretization import build_grid

    spec = cfg.spec
    grid = build_grid(spec, cfg.resolution, cfg.x_resolution)
    lo, hi = cfg.window
    if cfg.seeds is None:
        table = level_table(spec, hi)
        seeds = [lev.energy for lev in table.combined if lo <= lev.energy <= hi]
    else:
        seeds = cfg.seeds
    rows = []
    unmatched_all = []
    for th in cfg.theta_im:
        theta = complex(0.0, th)
        if cfg.extrapolate:
            found, unmatched = extrapolated_resonances(grid, spec, theta, seeds, (lo, hi), k=3)
        else:
            found, unmatched = scaled_resonances(grid, spec, theta, seeds, (lo, hi), k=3)
        unmatched_all += [[th, u] for u in unmatched]
        for f in found:
            n, j = f.label or nearest_label(f.value, spec) or (0, 0)
            rows.append([spec.Phi, spec.nu, n, j, f.value.real, f.value.imag, th, f.residual])
    rows.sort(key=lambda r: (r[6], r[4]))
    write_csv(out / "cscale.csv", CSCALE_HEADER, rows, {"spec": spec.to_dict(), "grid": [grid.N_x, grid.N_y, grid.N_z],
                                                       "extrapolated": cfg.extrapolate})
    manifest["outputs"].append("cscale.csv")
    manifest["unmatched_seeds"] = unmatched_all


class _PostProcessingError(RuntimeError):
    pass


def run(cfg: RunConfig) -> int:
    """Execute one configured run; returns the process exit status."""
    out = Path(cfg.out)
    out.mkdir(parents=True, exist_ok=True)
    start = time.perf_counter()
    manifest = {
        "version": __version__,
        "config": cfg.to_dict(),
        "tolerances": {"unitarity": cfg.tol_unitarity, "fit": cfg.tol_fit, "theta_drift": cfg.tol_theta_drift},
        "python": platform.python_version(),
        "numpy": np.__version__,
        "outputs": [],
        "status": "running",
        "partial": False,
    }
    if cfg.mode != "levels":
        from .discretization import build_grid

        g = build_grid(cfg.spec, cfg.resolution, cfg.x_resolution)
        manifest["grid"] = {"N_x": g.N_x, "N_y": g.N_y, "N_z": g.N_z, "dx": g.dx, "dy": g.dy, "dz": g.dz, "unknowns": g.size}
    if cfg.window is None and cfg.mode != "levels":
        cfg.window = default_window(cfg.spec, cfg.mode)
        manifest["config"]["window"] = list(cfg.window)
    handlers = {"levels": _run_levels, "sweep": _run_sweep, "trace": _run_trace, "cscale": _run_cscale}
    status = EXIT_OK
    try:
        handlers[cfg.mode](cfg, out, manifest)
        manifest["status"] = "ok"
    except (SingularMatrixError, ConvergenceError, np.linalg.LinAlgError, MemoryError) as exc:
        logger.error("solver failure: %s", exc)
        manifest.update(status="solver_failure", error=str(exc), partial=True)
        status = EXIT_SOLVER
    except (FitError, _PostProcessingError) as exc:
        logger.error("post-processing failure: %s", exc)
        manifest.update(status="postprocessing_failure", error=str(exc), partial=True)
        status = EXIT_POST
    manifest["wall_time_s"] = time.perf_counter() - start
    (out / "manifest.json").write_text(json.dumps(manifest, indent=2, sort_keys=True, default=str) + "\n")
    return status


def main(argv=None) -> int:
    parser = argparse.ArgumentParser(prog="twistwire", description="Transport through a twisted quantum wire.")
    parser.add_argument("--config", required=True, help="TOML run configuration")
    parser.add_argument("--mode", choices=MODES, help="override the configured mode")
    parser.add_argument("--out", help="output directory")
    parser.add_argument("--workers", type=int, help="worker processes for energy points")
    parser.add_argument("--resolution", type=float, help="grid spacing in nm")
    parser.add_argument("-v", "--verbose", action="store_true")
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(name)s: %(message)s")
    try:
        text = Path(args.config).read_text()
        cfg = parse_config(text)
        if args.mode:
            if args.mode == "trace" and not cfg.Phi_list:
                raise ConfigError("trace.Phi_list: at least one angle required in trace mode")
            cfg.mode = args.mode
        if args.out:
            cfg.out = args.out
        if args.workers is not None:
            if args.workers < 1:
                raise ConfigError("--workers: must be >= 1")
            cfg.workers = args.workers
        if args.resolution is not None:
            if not args.resolution > 0:
                raise ConfigError("--resolution: must be positive")
            cfg.resolution = args.resolution
    except (OSError, ConfigError) as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    return run(cfg)


if __name__ == "__main__":
    sys.exit(main())
