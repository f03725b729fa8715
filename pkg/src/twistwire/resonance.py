"""Resonance detection, lineshape fitting and phase classification.

Lineshapes are written in the reduced energy ``e = 2 (E - E_r) / Gamma``:

* Fano: ``T = T_bg (q + e)^2 / ((1 + q^2)(1 + e^2))``, maximum ``T_bg``,
  zero at ``e = -q``;
* Breit-Wigner: ``T = B + A / (1 + e^2)`` (Lorentzian of height ``A`` on a
  flat background ``B``; ``B = 0`` is the pure q -> infinity limit).

Both are exposed as scikit-learn regressors taking energies as the single
feature.
"""

from __future__ import annotations

import enum
import logging
import math
from dataclasses import dataclass, field

import numpy as np
from scipy.ndimage import median_filter
from scipy.optimize import least_squares
from sklearn.base import BaseEstimator, RegressorMixin
from sklearn.utils.validation import check_array, check_is_fitted, check_X_y

from .model import HBAR

logger = logging.getLogger(__name__)

DEVIATION_THRESHOLD = 0.05
PHASE_THRESHOLD = 2.0  # rad
PHASE_SPAN = 1.0  # meV
BACKGROUND_HALF_WIDTH = 1.0  # meV
SHALLOW_DEPTH = 0.05


class ResonanceType(str, enum.Enum):
    FANO = "Fano"
    BREIT_WIGNER = "BreitWigner"
    SHALLOW = "Shallow"


class PhaseJump(str, enum.Enum):
    ABRUPT_PI = "abrupt_pi"
    SMOOTH_PI = "smooth_pi"
    NONE = "none"
    INDETERMINATE = "indeterminate"


class FitError(RuntimeError):
    def __init__(self, message, diagnostics=None):
        super().__init__(message)
        self.diagnostics = diagnostics or {}


def lifetime(Gamma: float) -> float:
    """Mean lifetime hbar / Gamma in ps for a width in meV."""
    if not Gamma > 0:
        raise ValueError(f"Gamma must be positive, got {Gamma!r}")
    return HBAR / Gamma


def fano_curve(E, E_r, Gamma, q, T_bg):
    e = 2.0 * (np.asarray(E, dtype=float) - E_r) / Gamma
    return T_bg * (q + e) ** 2 / ((1.0 + q * q) * (1.0 + e * e))


def breit_wigner_curve(E, E_r, Gamma, A, B=0.0):
    e = 2.0 * (np.asarray(E, dtype=float) - E_r) / Gamma
    return B + A / (1.0 + e * e)


def _energies(X):
    X = check_array(X, ensure_2d=True, dtype=float)
    if X.shape[1] != 1:
        raise ValueError(f"expected a single energy feature, got {X.shape[1]} columns")
    return X[:, 0]


class _LineshapeBase(RegressorMixin, BaseEstimator):
    # parameters are fitted in units centred on and scaled by the data span so
    # that ueV widths at ~100 meV stay well conditioned
    _param_names: tuple = ()

    def _curve(self, E, *params):
        raise NotImplementedError

    def _starts(self, E, y):
        raise NotImplementedError

    def _bounds(self, E, y):
        raise NotImplementedError

    def fit(self, X, y):
        X, y = check_X_y(X, y, dtype=float, y_numeric=True)
        E = _energies(X)
        if E.size < 4:
            raise FitError("at least 4 samples are needed for a lineshape fit")
        order = np.argsort(E)
        E, y = E[order], y[order]
        center = 0.5 * (E[0] + E[-1])
        span = max(E[-1] - E[0], 1e-12)
        u = (E - center) / span
        lo, hi = self._bounds(u, y)
        best = None
        for start in self._starts(u, y):
            start = np.clip(start, lo + 1e-12, hi - 1e-12)
            try:
                res = least_squares(
                    lambda p: self._curve(u, *p) - y,
                    start,
                    bounds=(lo, hi),
                    x_scale="jac",
                    ftol=1e-15,
                    xtol=1e-15,
                    gtol=1e-15,
                    max_nfev=self.max_nfev,
                )
            except ValueError as exc:
                logger.debug("fit start %s rejected: %s", start, exc)
                continue
            if best is None or res.cost < best.cost:
                best = res
        if best is None or not np.all(np.isfinite(best.x)):
            raise FitError("no start converged", {"n_samples": int(E.size)})
        p = np.array(best.x, dtype=float)
        # back to meV
        p[0] = center + span * p[0]
        p[1] = span * p[1]
        for name, value in zip(self._param_names, p):
            setattr(self, name + "_", float(value))
        self.cost_ = float(best.cost)
        self.rms_ = float(math.sqrt(2.0 * best.cost / E.size))
        self.success_ = bool(best.success)
        self.n_features_in_ = 1
        return self

    def predict(self, X):
        check_is_fitted(self, "cost_")
        E = _energies(X)
        return self._curve(E, *(getattr(self, n + "_") for n in self._param_names))


class FanoLineshape(_LineshapeBase):
    """Least-squares Fano lineshape ``T_bg (q + e)^2 / ((1 + q^2)(1 + e^2))``.

    Fitted attributes: ``E_r_``, ``Gamma_``, ``q_``, ``T_bg_``, ``cost_``,
    ``rms_``, ``success_``.
    """

    _param_names = ("E_r", "Gamma", "q", "T_bg")

    def __init__(self, max_nfev: int = 4000):
        self.max_nfev = max_nfev

    def _curve(self, E, E_r, Gamma, q, T_bg):
        return fano_curve(E, E_r, Gamma, q, T_bg)

    def _bounds(self, u, y):
        return np.array([-1.0, 1e-9, -1e4, 0.0]), np.array([1.0, 10.0, 1e4, 2.0])

    def _starts(self, u, y):
        i_min, i_max = int(np.argmin(y)), int(np.argmax(y))
        T_bg = float(np.max(y))
        gap = abs(u[i_max] - u[i_min])
        starts = []
        for q in (-3.0, -1.0, -0.3, -0.1, 0.0, 0.1, 0.3, 1.0, 3.0):
            if q == 0.0:
                starts.append([u[i_min], max(gap, 1e-6), 0.0, T_bg])
                continue
            # zero at e = -q, maximum at e = 1/q
            Gamma = max(2.0 * gap / (abs(q) + 1.0 / abs(q)), 1e-6)
            starts.append([u[i_min] + q * Gamma / 2.0, Gamma, q, T_bg])
        return [np.array(s, dtype=float) for s in starts]


class BreitWignerLineshape(_LineshapeBase):
    """Least-squares Lorentzian ``B + A / (1 + e^2)`` (A < 0 for a dip).

    Fitted attributes: ``E_r_``, ``Gamma_``, ``A_``, ``B_``, ``cost_``,
    ``rms_``, ``success_``.
    """

    _param_names = ("E_r", "Gamma", "A", "B")

    def __init__(self, max_nfev: int = 4000):
        self.max_nfev = max_nfev

    def _curve(self, E, E_r, Gamma, A, B):
        return breit_wigner_curve(E, E_r, Gamma, A, B)

    def _bounds(self, u, y):
        return np.array([-1.0, 1e-9, -2.0, -1.0]), np.array([1.0, 10.0, 2.0, 2.0])

    def _starts(self, u, y):
        med = float(np.median(y))
        i_min, i_max = int(np.argmin(y)), int(np.argmax(y))
        starts = []
        for i, A in ((i_max, y[i_max] - med), (i_min, y[i_min] - med)):
            half = np.abs(y - med) >= abs(A) / 2
            width = max(float(np.ptp(u[half])) if half.any() else 0.1, 1e-6)
            starts.append(np.array([u[i], width, A, med]))
        return starts


@dataclass
class Resonance:
    """Fitted resonance with provenance; ``channel`` is (m, n) = (out, in)."""

    E_r: float
    Gamma: float
    type: ResonanceType
    q: float | None
    channel: tuple[int, int]
    Phi: float
    nu: float
    phase_jump: PhaseJump = PhaseJump.INDETERMINATE
    T_bg: float = float("nan")
    T_min: float = float("nan")
    rms: float = float("nan")
    window: tuple[float, float] = (float("nan"), float("nan"))
    notes: list[str] = field(default_factory=list)

    @property
    def lifetime_ps(self) -> float:
        return lifetime(self.Gamma)

    @property
    def complex_energy(self) -> complex:
        return complex(self.E_r, -self.Gamma / 2.0)


def _column(spectrum, m):
    m = spectrum.channel if m is None else m
    return m, spectrum.E, spectrum.T[:, m - 1], spectrum.theta[:, m - 1]


def local_background(E, T, half_width: float = BACKGROUND_HALF_WIDTH):
    """Rolling median of T over +-half_width meV, evaluated at the sample energies.

    The samples are first resampled onto a uniform grid so that dense
    adaptive clusters around a narrow feature do not bias the median.
    """
    E = np.asarray(E, dtype=float)
    T = np.asarray(T, dtype=float)
    ok = np.isfinite(T)
    if ok.sum() < 3:
        return np.full_like(T, np.nan)
    Eo, To = E[ok], T[ok]
    span = Eo[-1] - Eo[0]
    n = int(min(max(span / (half_width / 10.0), 3), 20001))
    grid = np.linspace(Eo[0], Eo[-1], n)
    Tg = np.interp(grid, Eo, To)
    size = max(int(round(2 * half_width / (span / max(n - 1, 1)))) | 1, 1)
    bg = median_filter(Tg, size=min(size, n - (1 - n % 2)), mode="nearest")
    out = np.full_like(T, np.nan)
    out[ok] = np.interp(Eo, grid, bg)
    return out


def _merge(windows):
    windows = sorted(windows)
    merged = []
    for lo, hi in windows:
        if merged and lo <= merged[-1][1]:
            merged[-1] = (merged[-1][0], max(merged[-1][1], hi))
        else:
            merged.append((lo, hi))
    return merged


def detect_candidates(spectrum, m: int | None = None):
    """Energy windows around transmission features of channel ``m`` (default: the incoming one).

    A feature is a run of samples where T deviates from its local background
    by more than 0.05, or a span shorter than 1 meV over which the unwrapped
    phase moves by more than 2 rad. Each window is padded on both sides by its
    own width (at least 2 ueV) and overlapping windows are merged.
    """
    m, E, T, theta = _column(spectrum, m)
    ok = np.isfinite(T)
    if ok.sum() < 3:
        return []
    E, T, theta = E[ok], T[ok], theta[ok]
    raw = []
    bg = local_background(E, T)
    dev = np.abs(T - bg) > DEVIATION_THRESHOLD
    i = 0
    while i < len(E):
        if dev[i]:
            j = i
            while j + 1 < len(E) and dev[j + 1]:
                j += 1
            raw.append((E[max(i - 1, 0)], E[min(j + 1, len(E) - 1)]))
            i = j + 1
        else:
            i += 1
    # phase: for each start the shortest span whose change exceeds 2 rad;
    # keep the narrowest non-overlapping ones so a single jump gives a single window
    spans = []
    for i in range(len(E)):
        moved = np.abs(theta[i + 1 :] - theta[i]) > PHASE_THRESHOLD
        if not moved.any():
            continue
        j = i + 1 + int(np.argmax(moved))
        if E[j] - E[i] < PHASE_SPAN:
            spans.append((E[j] - E[i], E[i], E[j]))
    accepted = []
    for _, lo, hi in sorted(spans):
        if all(hi < a or lo > b for a, b in accepted):
            accepted.append((lo, hi))
    raw.extend(accepted)
    padded = []
    for lo, hi in raw:
        pad = max(hi - lo, 0.002)
        padded.append((max(lo - pad, E[0]), min(hi + pad, E[-1])))
    return _merge(padded)


def _rows(spectrum, window, m):
    m, E, T, theta = _column(spectrum, m)
    lo, hi = window
    sel = (E >= lo) & (E <= hi) & np.isfinite(T)
    return m, E[sel], T[sel], theta[sel]


def fit_lineshape(spectrum, window, m: int | None = None, min_rows: int = 12) -> Resonance:
    """Fit Fano and Breit-Wigner forms to T_mn inside ``window``; keep the better one.

    Raises :class:`FitError` with residual diagnostics when the window is too
    sparse or neither form converges.
    """
    m, E, T, _ = _rows(spectrum, window, m)
    if E.size < min_rows:
        raise FitError(f"window {window} holds {E.size} rows, need {min_rows}", {"rows": int(E.size)})
    X = E[:, None]
    fits = {}
    for name, est in (("fano", FanoLineshape()), ("bw", BreitWignerLineshape())):
        try:
            fits[name] = est.fit(X, T)
        except FitError as exc:
            logger.debug("%s fit failed in %s: %s", name, window, exc)
    if not fits:
        raise FitError(f"no lineshape converged in {window}", {"rows": int(E.size)})
    scale = max(float(np.ptp(T)), 1e-12)
    name = min(fits, key=lambda k: fits[k].cost_)
    # prefer the Fano form unless the Lorentzian is clearly better
    if name == "bw" and "fano" in fits and fits["fano"].rms_ <= 1.05 * fits["bw"].rms_ + 1e-9 * scale:
        name = "fano"
    est = fits[name]
    provenance = dict(channel=(m, spectrum.channel), Phi=spectrum.spec.Phi, nu=spectrum.spec.nu, window=tuple(window))
    fine = np.linspace(E[0], E[-1], 4001)[:, None]
    curve = est.predict(fine)
    if name == "fano":
        depth = est.T_bg_ - float(curve.min())
        rtype = ResonanceType.FANO if depth >= SHALLOW_DEPTH else ResonanceType.SHALLOW
        res = Resonance(est.E_r_, est.Gamma_, rtype, est.q_, T_bg=est.T_bg_, T_min=float(curve.min()), rms=est.rms_, **provenance)
    else:
        rtype = ResonanceType.BREIT_WIGNER if abs(est.A_) >= SHALLOW_DEPTH else ResonanceType.SHALLOW
        res = Resonance(est.E_r_, est.Gamma_, rtype, None, T_bg=est.B_, T_min=float(curve.min()), rms=est.rms_, **provenance)
    if est.rms_ > 0.05 * scale:
        res.notes.append(f"poor fit: rms {est.rms_:.3g} vs feature height {scale:.3g}")
    return res


def classify_phase_detail(spectrum, window, fit: Resonance, m: int | None = None):
    """(tag, refinement interval or None) for the phase behaviour in ``window``.

    abrupt_pi: some span shorter than Gamma/4 carries >= 90% of a pi change.
    smooth_pi: the net change is pi (within 20%) and its central half
    (25% -> 75%) accumulates over a span within [Gamma/2, 5 Gamma].
    indeterminate: a single sample interval wider than Gamma/4 carries a
    step of pi/2 or more, so the data cannot tell; the interval is returned
    for refinement.
    """
    _, E, _, theta = _rows(spectrum, window, m)
    if E.size < 3:
        return PhaseJump.INDETERMINATE, tuple(window)
    G = fit.Gamma
    target = 0.9 * math.pi
    # largest change within spans < Gamma/4
    j = 0
    best = 0.0
    for i in range(E.size):
        j = max(j, i)
        while j + 1 < E.size and E[j + 1] - E[i] < G / 4:
            j += 1
        if j > i:
            seg = np.abs(theta[i + 1 : j + 1] - theta[i])
            best = max(best, float(seg.max()))
    if best >= target:
        return PhaseJump.ABRUPT_PI, None
    steps = np.abs(np.diff(theta))
    k = int(np.argmax(steps))
    if steps[k] >= 0.5 * math.pi and E[k + 1] - E[k] >= G / 4:
        return PhaseJump.INDETERMINATE, (float(E[k]), float(E[k + 1]))
    net = theta[-1] - theta[0]
    if abs(abs(net) - math.pi) <= 0.2 * math.pi:
        frac = (theta - theta[0]) / net
        e25 = float(np.interp(0.25, *_monotone(frac, E)))
        e75 = float(np.interp(0.75, *_monotone(frac, E)))
        span = abs(e75 - e25)
        if G / 2 <= span <= 5 * G:
            return PhaseJump.SMOOTH_PI, None
    return PhaseJump.NONE, None


def _monotone(frac, E):
    # running maximum makes the cumulative fraction usable by np.interp
    f = np.maximum.accumulate(np.clip(frac, -1.0, 2.0))
    f, idx = np.unique(f, return_index=True)
    return f, E[idx]


def classify_phase(spectrum, window, fit: Resonance, m: int | None = None) -> PhaseJump:
    return classify_phase_detail(spectrum, window, fit, m)[0]


def expected_character(resonance_mode, injection_mode) -> ResonanceType:
    """Breit-Wigner when the quasi-bound state shares the injection channel's transverse mode, Fano otherwise."""
    return ResonanceType.BREIT_WIGNER if tuple(resonance_mode) == tuple(injection_mode) else ResonanceType.FANO


def analyze_spectrum(spectrum, m: int | None = None) -> tuple[list[Resonance], list]:
    """Detect, fit and classify every candidate; returns (resonances, unfit windows with reasons)."""
    found, unfit = [], []
    for window in detect_candidates(spectrum, m):
        try:
            res = fit_lineshape(spectrum, window, m)
        except FitError as exc:
            unfit.append((window, str(exc), exc.diagnostics))
            continue
        res.phase_jump = classify_phase(spectrum, window, res, m)
        found.append(res)
    return found, unfit
