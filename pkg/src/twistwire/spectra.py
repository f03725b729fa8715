"""Energy sweeps with adaptive refinement and resonance tracking over the twist angle."""

from __future__ import annotations

import hashlib
import json
import logging
import warnings
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy.interpolate import AAA

from .discretization import build_grid, assemble_twistframe_hamiltonian, assemble_metric_hamiltonian
from .linalg import SingularMatrixError
from .model import WaveguideSpec, level_table, subband_energy
from .scattering import lattice_thresholds, solve_scattering, unitarity_defect

logger = logging.getLogger(__name__)

DT_THRESHOLD = 0.05
DTHETA_THRESHOLD = 0.3  # rad
MIN_STEP = 1e-5  # meV
THRESHOLD_GUARD = 1e-6  # meV
UNITARITY_TOLERANCE = 1e-4


@dataclass(frozen=True)
class SpectrumPoint:
    """One solved energy: outgoing amplitudes for every open channel."""

    E: float
    t: np.ndarray
    T: np.ndarray
    R_sum: float
    defect: float


@dataclass
class TransmissionSpectrum:
    """Channel-resolved transmission of one incoming channel on a sorted energy grid.

    ``T`` and ``theta`` have one column per outgoing channel; entries for
    channels closed at a given energy are NaN. ``theta`` is unwrapped along E.
    """

    spec: WaveguideSpec
    channel: int
    resolution: float
    E: np.ndarray
    T: np.ndarray
    theta: np.ndarray
    t: np.ndarray
    R_sum: np.ndarray
    defect: np.ndarray
    tolerance: float = UNITARITY_TOLERANCE
    meta: dict = field(default_factory=dict)

    @property
    def flagged(self) -> np.ndarray:
        return ~(self.defect < self.tolerance)

    @property
    def n_channels(self) -> int:
        return self.T.shape[1]

    def __len__(self) -> int:
        return self.E.size

    def window(self, lo: float, hi: float) -> "TransmissionSpectrum":
        sel = (self.E >= lo) & (self.E <= hi)
        return TransmissionSpectrum(
            self.spec, self.channel, self.resolution, self.E[sel], self.T[sel], self.theta[sel],
            self.t[sel], self.R_sum[sel], self.defect[sel], self.tolerance, dict(self.meta),
        )

    @classmethod
    def from_points(cls, spec, channel, resolution, points, tolerance=UNITARITY_TOLERANCE, meta=None):
        points = sorted(points, key=lambda p: p.E)
        n = len(points)
        width = max((p.t.size for p in points), default=0)
        t = np.full((n, width), np.nan + 0j)
        T = np.full((n, width), np.nan)
        for i, p in enumerate(points):
            t[i, : p.t.size] = p.t
            T[i, : p.T.size] = p.T
        theta = np.full((n, width), np.nan)
        for m in range(width):
            ok = np.isfinite(T[:, m])
            theta[ok, m] = np.unwrap(np.angle(t[ok, m]))
        E = np.array([p.E for p in points])
        if n > 1 and np.any(np.diff(E) <= 0):
            raise ValueError("spectrum energies must be strictly increasing")
        return cls(
            spec, channel, resolution, E, T, theta, t,
            np.array([p.R_sum for p in points]), np.array([p.defect for p in points]),
            tolerance, dict(meta or {}),
        )


class _Evaluator:
    """Assembled problem for one (spec, resolution); evaluates single energies."""

    def __init__(self, spec, channel, resolution, x_resolution=None, M=None, solver="auto", assembly="twist"):
        self.spec = spec
        self.channel = channel
        self.grid = build_grid(spec, resolution, x_resolution)
        if assembly == "twist":
            self.H = assemble_twistframe_hamiltonian(self.grid, spec)
        elif assembly == "metric":
            self.H = assemble_metric_hamiltonian(self.grid, spec)
        else:
            raise ValueError(f"unknown assembly {assembly!r}")
        self.M = M
        self.solver = solver

    def __call__(self, E: float) -> SpectrumPoint:
        try:
            sol = solve_scattering(self.H, self.grid, self.spec, E, self.channel, M=self.M, solver=self.solver)
        except SingularMatrixError:
            E = E * (1.0 + 1e-9)
            logger.info("singular system, retrying at E=%.12g", E)
            sol = solve_scattering(self.H, self.grid, self.spec, E, self.channel, M=self.M, solver=self.solver)
        mask = sol.open_mask
        return SpectrumPoint(float(E), sol.t[mask].copy(), sol.T[mask].copy(), float(np.sum(sol.R[mask])), unitarity_defect(sol))


_WORKER: _Evaluator | None = None


def _init_worker(args):
    global _WORKER
    _WORKER = _Evaluator(*args)


def _work(E):
    return _WORKER(E)


class _PointCache:
    """Append-only JSON-lines store of solved points, keyed by the problem definition."""

    def __init__(self, path, key: dict):
        self.path = Path(path) if path is not None else None
        self.key = hashlib.sha256(json.dumps(key, sort_keys=True).encode()).hexdigest()[:16]
        self.points: dict[float, SpectrumPoint] = {}
        if self.path is not None and self.path.exists():
            with open(self.path) as fh:
                for line in fh:
                    rec = json.loads(line)
                    if rec.get("key") != self.key:
                        continue
                    t = np.array(rec["t_re"]) + 1j * np.array(rec["t_im"])
                    p = SpectrumPoint(rec["E"], t, np.array(rec["T"]), rec["R_sum"], rec["defect"])
                    self.points[rec["E_req"]] = p

    def get(self, E):
        return self.points.get(E)

    def put(self, E_req, p: SpectrumPoint):
        self.points[E_req] = p
        if self.path is None:
            return
        rec = {
            "key": self.key, "E_req": E_req, "E": p.E, "t_re": p.t.real.tolist(), "t_im": p.t.imag.tolist(),
            "T": p.T.tolist(), "R_sum": p.R_sum, "defect": p.defect,
        }
        self.path.parent.mkdir(parents=True, exist_ok=True)
        with open(self.path, "a") as fh:
            fh.write(json.dumps(rec) + "\n")


class _Runner:
    def __init__(self, args, workers, cache):
        self.args = args
        self.workers = max(1, int(workers))
        self.cache = cache
        self.pool = None
        self.local = None

    def __enter__(self):
        return self

    def __exit__(self, *exc):
        if self.pool is not None:
            self.pool.shutdown()

    def evaluate(self, energies) -> list[SpectrumPoint]:
        energies = [float(e) for e in energies]
        todo = [e for e in energies if self.cache.get(e) is None]
        if todo:
            if self.workers == 1:
                if self.local is None:
                    self.local = _Evaluator(*self.args)
                results = [self.local(e) for e in todo]
            else:
                if self.pool is None:
                    self.pool = ProcessPoolExecutor(self.workers, initializer=_init_worker, initargs=(self.args,))
                results = list(self.pool.map(_work, todo))
            for e, p in zip(todo, results):
                self.cache.put(e, p)
        return [self.cache.get(e) for e in energies]


def _needs_split(a: SpectrumPoint, b: SpectrumPoint) -> bool:
    n = min(a.T.size, b.T.size)
    if n == 0:
        return False
    if np.any(np.abs(a.T[:n] - b.T[:n]) > DT_THRESHOLD):
        return True
    dtheta = np.angle(b.t[:n] * np.conj(a.t[:n]))
    return bool(np.any(np.abs(dtheta) > DTHETA_THRESHOLD))


def _bisection_targets(points, min_step):
    out = []
    for a, b in zip(points[:-1], points[1:]):
        if b.E - a.E > 2 * min_step and _needs_split(a, b):
            out.append(0.5 * (a.E + b.E))
    return out


def _pole_targets(points, channel_index, lo, hi, min_step):
    """New energies around poles of an AAA fit of the diagonal amplitude that the samples do not resolve."""
    E = np.array([p.E for p in points])
    f = np.array([p.t[channel_index] if p.t.size > channel_index else np.nan for p in points])
    ok = np.isfinite(f)
    if ok.sum() < 6:
        return []
    try:
        with warnings.catch_warnings():
            # a non-converged fit still carries the poles we want
            warnings.simplefilter("ignore", RuntimeWarning)
            r = AAA(E[ok], f[ok], rtol=1e-12, max_terms=min(100, int(ok.sum()) // 2))
            poles, residues = r.poles(), r.residues()
    except (ValueError, np.linalg.LinAlgError) as exc:
        logger.debug("AAA fit failed: %s", exc)
        return []
    out = []
    for p, res in zip(poles, residues):
        width = abs(p.imag)
        if not (lo < p.real < hi) or p.imag >= 0 or width > 0.25 * (hi - lo):
            continue
        if abs(res) < 1e-3 * width:
            continue  # spurious pole-zero pair
        near = np.abs(E - p.real) <= 2 * width
        if near.sum() >= 5:
            continue
        width = max(width, min_step)
        for s in (-4.0, -2.0, -1.0, -0.5, 0.0, 0.5, 1.0, 2.0, 4.0):
            e = p.real + s * width
            if lo <= e <= hi:
                out.append(e)
    return out


def _guard_thresholds(energies, thresholds):
    out = []
    for e in energies:
        for th in thresholds:
            if abs(e - th) < THRESHOLD_GUARD:
                e = th + THRESHOLD_GUARD
        out.append(e)
    return out


def sweep_energy(
    spec: WaveguideSpec,
    channel: int,
    window,
    base_points: int = 50,
    adaptive: bool = True,
    *,
    resolution: float = 1.0,
    x_resolution: float | None = None,
    M: int | None = None,
    solver: str = "auto",
    assembly: str = "twist",
    workers: int = 1,
    cache_path=None,
    min_step: float = MIN_STEP,
    max_points: int = 4000,
    pole_rounds: int = 6,
    extra_energies=(),
    tolerance: float = UNITARITY_TOLERANCE,
) -> TransmissionSpectrum:
    """Transmission of incoming ``channel`` over ``window`` = (E_lo, E_hi) in meV.

    The base grid has ``base_points`` equally spaced energies. With
    ``adaptive`` the sweep then alternates two refinements until neither adds
    points: bisection of every interval where some T changes by more than
    0.05 or some phase by more than 0.3 rad (down to ``min_step``), and
    insertion of energies around poles of a rational (AAA) fit of the
    diagonal amplitude that the samples do not yet resolve. Results are
    deterministic for a given input; ``cache_path`` makes a sweep resumable.
    """
    lo, hi = (float(v) for v in window)
    if not hi > lo:
        raise ValueError(f"empty energy window {window}")
    if base_points < 2:
        raise ValueError("base_points must be >= 2")
    grid = build_grid(spec, resolution, x_resolution)
    ths = lattice_thresholds(grid, spec, max(channel + 8, 16))
    floor = max(ths[channel - 1], subband_energy(*_channel_pair(grid, spec, channel), spec))
    if lo <= floor:
        raise ValueError(f"window starts at {lo} meV, not above the channel-{channel} threshold {floor:.6f} meV")
    args = (spec, channel, resolution, x_resolution, M, solver, assembly)
    key = {"spec": spec.to_dict(), "args": [channel, resolution, x_resolution, M, solver, assembly]}
    cache = _PointCache(cache_path, key)
    energies = _guard_thresholds(list(np.linspace(lo, hi, base_points)) + [float(e) for e in extra_energies if lo <= e <= hi], ths)
    with _Runner(args, workers, cache) as runner:
        points = {p.E: p for p in runner.evaluate(sorted(set(energies)))}
        rounds = 0
        while adaptive and len(points) < max_points:
            ordered = [points[e] for e in sorted(points)]
            new = _bisection_targets(ordered, min_step)
            if not new and rounds < pole_rounds:
                new = _pole_targets(ordered, channel - 1, lo, hi, min_step)
                rounds += 1
            new = [e for e in _guard_thresholds(new, ths) if all(abs(e - q) > 0.5 * min_step for q in points)]
            new = sorted(set(new))[: max_points - len(points)]
            if not new:
                break
            for p in runner.evaluate(new):
                points.setdefault(p.E, p)
    meta = {"resolution": resolution, "grid": [grid.N_x, grid.N_y, grid.N_z], "adaptive": adaptive,
            "base_points": base_points, "window": [lo, hi], "M": M, "solver": solver, "assembly": assembly}
    return TransmissionSpectrum.from_points(spec, channel, resolution, points.values(), tolerance, meta)


def _channel_pair(grid, spec, channel):
    from .scattering import _transverse_levels

    _, n_y, n_z = _transverse_levels(grid, spec, channel)[channel - 1]
    return n_y, n_z


@dataclass(frozen=True)
class TrajectorySample:
    Phi: float
    E_r: float
    Gamma: float
    type: str


@dataclass
class ResonanceTrajectory:
    """A resonance followed across twist angles; ``label`` = (n, j) of its straight-wire origin."""

    label: tuple[int, int] | None
    samples: list[TrajectorySample] = field(default_factory=list)
    closed: bool = False
    close_reason: str = ""
    ambiguous: bool = False
    threshold: float | None = None  # lattice threshold the level dissolved into, if any
    unresolved: bool = False  # last match lay in the unresolved zone below a threshold

    @property
    def Phi(self) -> np.ndarray:
        return np.array([s.Phi for s in self.samples])

    @property
    def E_r(self) -> np.ndarray:
        return np.array([s.E_r for s in self.samples])

    @property
    def Gamma(self) -> np.ndarray:
        return np.array([s.Gamma for s in self.samples])

    def is_monotone(self, slack: float = 0.0) -> bool:
        return bool(np.all(np.diff(self.E_r) >= -slack))

    def predict(self, Phi: float) -> float:
        """Continuation of E_r to ``Phi``: quadratic through the last three samples, never below the last E_r."""
        last = self.samples[-1]
        if len(self.samples) == 1:
            return last.E_r
        P = np.array([s.Phi for s in self.samples[-3:]])
        E = np.array([s.E_r for s in self.samples[-3:]])
        if len(set(P)) < 3:
            slope = (E[-1] - E[-2]) / (P[-1] - P[-2]) if P[-1] != P[-2] else 0.0
            return last.E_r + max(slope, 0.0) * (Phi - last.Phi)
        coef = np.polyfit(P - last.Phi, E, 2)
        return float(max(np.polyval(coef, Phi - last.Phi), last.E_r))


def association_radius(Gamma: float) -> float:
    return max(5.0 * Gamma, 0.5)


def _associate(tracks, found, Phi, thresholds=()):
    """Match (E_r, Gamma, type) tuples to open tracks; returns the unmatched ones.

    A match of type ``"unresolved"`` keeps the track open without recording a
    sample; a track lost right after such a match is closed as merged into
    the threshold above it.
    """
    active = [tr for tr in tracks if not tr.closed]
    pairs = []
    for ti, tr in enumerate(active):
        pred = tr.predict(Phi)
        for fi, (E_r, G, _) in enumerate(found):
            d = abs(E_r - pred)
            if d < association_radius(max(G, tr.samples[-1].Gamma)):
                pairs.append((d, ti, fi))
    pairs.sort()
    used_t, used_f = set(), set()
    for d, ti, fi in pairs:
        if ti in used_t or fi in used_f:
            continue
        # ambiguity: another candidate almost as close
        rivals = [p for p in pairs if p[1] == ti and p[2] != fi and p[2] not in used_f and p[0] < 1.5 * d + 1e-12]
        if rivals:
            active[ti].ambiguous = True
        used_t.add(ti)
        used_f.add(fi)
        E_r, G, rtype = found[fi]
        tr = active[ti]
        tr.unresolved = rtype == "unresolved"
        if tr.unresolved:
            above = [t for t in thresholds if t > E_r]
            tr.threshold = min(above) if above else None
        else:
            tr.samples.append(TrajectorySample(Phi, E_r, G, rtype))
    for ti, tr in enumerate(active):
        if ti in used_t:
            continue
        tr.closed = True
        if tr.unresolved and tr.threshold is not None:
            tr.close_reason = f"merged into threshold {tr.threshold:.4f} meV at Phi={Phi:.6g}"
        else:
            tr.threshold = None
            tr.close_reason = f"lost at Phi={Phi:.6g}"
    return [f for i, f in enumerate(found) if i not in used_f]


def _entry_label(E_r, spec, channel_pair, used):
    """Label for a track that appears mid-sweep.

    Straight-wire level nearest in energy among unused labels; a level that
    enters from below the first threshold takes the highest unused
    eps_{n,j} lying under E_1 from a subband other than the injection one.
    """
    table = level_table(spec, max(E_r, subband_energy(1, 1, spec)) + 60.0)
    E1 = subband_energy(1, 1, spec)
    cands = [lev for lev in table.combined if (lev.n, lev.j) not in used]
    if not cands:
        return None
    if E_r < E1 + 2.0:
        below = [lev for lev in cands if lev.energy < E1 and lev.n != 1]
        if below:
            best = max(below, key=lambda lev: lev.energy)
            return (best.n, best.j)
    best = min(cands, key=lambda lev: abs(lev.energy - E_r))
    return (best.n, best.j)


def sweep_twist(
    spec: WaveguideSpec,
    Phi_list,
    channel: int,
    window,
    *,
    method: str = "scattering",
    base_points: int = 50,
    resolution: float = 1.0,
    workers: int = 1,
    cache_dir=None,
    theta: complex = 0.3j,
    seeds=None,
    on_step=None,
):
    """Resonance trajectories of channel ``channel`` across sorted twist angles.

    ``method='scattering'`` runs an adaptive :func:`sweep_energy` at every
    angle and extracts resonances from T(E); ``method='complex_scaling'``
    follows eigenvalues of the scaled operator (dx-extrapolated), seeded from
    the straight-wire levels and continued from the previous angle. Tracks are
    associated by nearest predicted E_r within max(5 Gamma, 0.5 meV).

    On the complex-scaling route a complex eigenvalue is kept only if it does
    not move with theta like the rotated continuum, and a level closer to a
    threshold than :func:`unresolved_zone` is matched but not recorded, since
    its tail reaches the box ends. Such a track, once lost, is closed as
    merged into that threshold.
    """
    Phi_list = [float(p) for p in Phi_list]
    if not Phi_list:
        raise ValueError("Phi_list is empty")
    if any(b < a for a, b in zip(Phi_list[:-1], Phi_list[1:])):
        raise ValueError("Phi_list must be sorted")
    lo, hi = window
    grid = build_grid(spec, resolution)
    injection = _channel_pair(grid, spec, channel)
    tracks: list[ResonanceTrajectory] = []
    used: set = set()
    for Phi in Phi_list:
        sp_phi = spec.with_(Phi=Phi)
        if method == "scattering":
            found = _scattering_resonances(sp_phi, channel, window, base_points, resolution, workers, cache_dir)
        elif method == "complex_scaling":
            found = _scaled_resonances(sp_phi, tracks, window, resolution, theta, seeds, Phi == Phi_list[0])
        else:
            raise ValueError(f"unknown method {method!r}")
        if method == "complex_scaling" and Phi == Phi_list[0]:
            leftover = []
            for item in found:
                label = item[3]
                if label is None or label in used:
                    leftover.append(item)
                    continue
                used.add(label)
                tracks.append(ResonanceTrajectory(label, [TrajectorySample(Phi, item[0], item[1], item[2])]))
            found = leftover
        found = [f[:3] for f in found]
        if Phi != Phi_list[0]:
            found = _associate(tracks, found, Phi, lattice_thresholds(grid, spec, 4))
            if method == "complex_scaling":
                # every candidate was searched for near an existing track; the
                # leftovers are rotated-continuum points, not new levels
                found = []
        for E_r, G, rtype in found:
            label = _entry_label(E_r, spec, injection, used)
            if label is not None:
                used.add(label)
            tracks.append(ResonanceTrajectory(label, [TrajectorySample(Phi, E_r, G, rtype)]))
        if on_step is not None:
            on_step(Phi, tracks)
    return tracks


def _nearest_value(found, target):
    if not found:
        return None
    return min((f.value for f in found), key=lambda v: abs(v - target))


def _scattering_resonances(spec, channel, window, base_points, resolution, workers, cache_dir):
    from .resonance import analyze_spectrum

    cache = None if cache_dir is None else Path(cache_dir) / f"points_Phi{spec.Phi:.6f}.jsonl"
    spectrum = sweep_energy(spec, channel, window, base_points, True, resolution=resolution, workers=workers, cache_path=cache)
    found, _ = analyze_spectrum(spectrum)
    return [(r.E_r, r.Gamma, r.type.value) for r in found]


_CS_RADIUS = 1.5  # meV, how far an eigenvalue may sit from its track prediction
_CS_GAMMA_FLOOR = 1e-4  # meV; narrower eigenvalues count as real
_CS_DTHETA = 0.1j


def unresolved_zone(spec: WaveguideSpec, decay_lengths: float = 5.0) -> float:
    """Binding energy (meV) below a threshold at which a level's tail reaches the box ends.

    A level bound by less than this has decay length above x_half / decay_lengths,
    so the hard walls at +-x_half give its complex-scaled eigenvalue a spurious width.
    """
    return spec.kinetic_scale * (decay_lengths / spec.x_half) ** 2


def _rotates_with_theta(value, moved, thresholds, theta, theta2) -> bool:
    """True if an eigenvalue drifts between two theta like a rotated-continuum point.

    A continuum point at E_n + r e^{-2i Im theta} moves by |value - E_n| |e^{-2i Im theta} - e^{-2i Im theta2}|;
    a resonance does not move. Half of that distance separates the two.
    """
    if moved is None:
        return True
    below = [t for t in thresholds if t < value.real] or [min(thresholds)]
    E_n = max(below)
    scale = abs(value - E_n) * abs(np.exp(-2j * complex(theta).imag) - np.exp(-2j * complex(theta2).imag))
    return abs(moved - value) > 0.5 * scale


def _scaled_resonances(spec, tracks, window, resolution, theta, seeds, first):
    from .complex_scaling import extrapolated_resonances

    lo, hi = window
    grid = build_grid(spec, resolution)
    if first:
        table = level_table(spec, hi)
        levels = [lev for lev in table.combined if lo <= lev.energy <= hi]
        if seeds is not None:
            levels = [lev for lev in levels if (lev.n, lev.j) in set(map(tuple, seeds))]
        targets = [(lev.energy, (lev.n, lev.j)) for lev in levels]
    else:
        targets = [(tr.predict(spec.Phi), tr.label) for tr in tracks if not tr.closed]
    thresholds = lattice_thresholds(grid, spec, 4)
    zone = unresolved_zone(spec)
    theta2 = complex(theta) + _CS_DTHETA
    out = []
    for seed, label in targets:
        if not lo <= seed <= hi:
            continue
        # at later angles every nearby eigenvalue goes to the matcher, so two
        # tracks crossing each other cannot both claim the same one
        found, _ = extrapolated_resonances(grid, spec, theta, [seed], (lo, hi), labels=[label], k=3, every=not first)
        if not first:
            # rotated-continuum points that survive the branch filter sit far
            # from any predicted level; they must not open tracks
            found = [f for f in found if abs(f.E_r - seed) <= _CS_RADIUS]
        moved = ...
        for f in found:
            rtype = "complex"
            if not first and any(t - zone < f.E_r < t for t in thresholds):
                rtype = "unresolved"
            elif f.Gamma > _CS_GAMMA_FLOOR:
                if moved is ...:
                    moved, _ = extrapolated_resonances(grid, spec, theta2, [seed], (lo, hi), k=3, every=True)
                partner = _nearest_value(moved, f.value)
                if _rotates_with_theta(f.value, partner, thresholds, theta, theta2):
                    continue
            out.append((f.E_r, max(f.Gamma, 0.0), rtype, f.label))
    # one eigenvalue may answer two seeds; keep the closest claim
    dedup = {}
    for item in out:
        key = round(item[0], 6)
        dedup.setdefault(key, item)
    return sorted(dedup.values())
