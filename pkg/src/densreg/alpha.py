"""Estimate the exponent alpha that restores mass conservation in image series.

For every subject and breathing phase ``t`` the log masked volume
``v_t = log V_t`` and the log mean alpha-power intensity
``d_t(alpha) = log(int_mask I_t**alpha dx / V_t)`` are regressed,
``d ~ a v + b``.  Conserved mass means slope ``a = -1``; the fitted alpha
minimizes ``sum_j (a_j(alpha) + 1)**2`` over a brute-force grid.
"""

from __future__ import annotations

import math
import warnings
from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np

from .errors import ValidationError
from .fields import ScalarField

DEFAULT_ALPHA_GRID = (0.3, 1.2, 0.005)


@dataclass
class SubjectSeries:
    """Intensity volumes with region masks across breathing phases for one subject."""

    samples: list
    subject_id: str = ""
    phases: Optional[list] = None

    def __post_init__(self):
        if len(self.samples) < 2:
            raise ValidationError(f"subject {self.subject_id!r}: need >= 2 phases, got {len(self.samples)}")
        checked = []
        for k, (vol, mask) in enumerate(self.samples):
            m = np.asarray(mask.values if isinstance(mask, ScalarField) else mask).astype(bool)
            if m.shape != vol.grid.dims:
                raise ValidationError(
                    f"subject {self.subject_id!r} phase {k}: mask shape {m.shape} != volume dims {vol.grid.dims}"
                )
            if not m.any():
                raise ValidationError(f"subject {self.subject_id!r} phase {k}: empty mask")
            checked.append((vol, m))
        self.samples = checked
        if self.phases is None:
            self.phases = [str(k) for k in range(len(checked))]
        elif len(self.phases) != len(checked):
            raise ValidationError("phases and samples differ in length")

    def __len__(self):
        return len(self.samples)


class _CompressedPhase:
    """Masked intensities collapsed to unique values with summed quadrature weights."""

    def __init__(self, vol: ScalarField, mask: np.ndarray):
        w = vol.grid.weights[mask]
        vals = vol.values[mask]
        if np.any(vals < 0):
            raise ValidationError("intensities must be nonnegative inside the mask")
        self.volume = float(np.sum(w))
        if not self.volume > 0:
            raise ValidationError("masked volume is zero")
        uniq, inv = np.unique(vals, return_inverse=True)
        self.values = uniq
        self.weights = np.bincount(inv.ravel(), weights=w, minlength=uniq.size)

    def log_density(self, alpha: float) -> float:
        pm = float(np.sum(self.weights * self.values**alpha))
        if not pm > 0:
            raise ValidationError("masked alpha-mass is zero; log density undefined")
        return math.log(pm / self.volume)


def _compress(series: SubjectSeries):
    return [_CompressedPhase(vol, mask) for vol, mask in series.samples]


def log_mass_volume(series: SubjectSeries, alpha: float):
    """Return arrays ``(v, d)`` of log volume and log alpha-density per phase."""
    if not alpha > 0:
        raise ValidationError(f"alpha must be > 0, got {alpha}")
    phases = _compress(series)
    v = np.array([math.log(p.volume) for p in phases])
    d = np.array([p.log_density(alpha) for p in phases])
    return v, d


def regress_slope(v, d):
    """Ordinary least squares ``d ~ a v + b``; returns ``(a, b, r2)``."""
    v = np.asarray(v, dtype=float)
    d = np.asarray(d, dtype=float)
    if v.shape != d.shape or v.ndim != 1:
        raise ValidationError("v and d must be 1-D arrays of equal length")
    if v.size < 2:
        raise ValidationError("need at least two points to regress")
    vc = v - v.mean()
    sxx = float(np.dot(vc, vc))
    if sxx == 0.0 or np.ptp(v) == 0.0:
        raise ValidationError("degenerate regression: all log volumes are equal")
    dc = d - d.mean()
    a = float(np.dot(vc, dc)) / sxx
    b = float(d.mean() - a * v.mean())
    ss_tot = float(np.dot(dc, dc))
    resid = d - (a * v + b)
    ss_res = float(np.dot(resid, resid))
    r2 = 1.0 if ss_tot == 0.0 else 1.0 - ss_res / ss_tot
    return a, b, r2


def alpha_grid(alpha_min: float, alpha_max: float, step: float) -> np.ndarray:
    if not (0 < alpha_min <= alpha_max) or not step > 0:
        raise ValidationError(f"bad alpha grid: min={alpha_min}, max={alpha_max}, step={step}")
    n = int(math.floor((alpha_max - alpha_min) / step + 1e-9))
    return np.round(alpha_min + step * np.arange(n + 1), 12)


@dataclass
class SubjectFit:
    subject_id: str
    slope: float
    intercept: float
    r2: float
    residuals: np.ndarray
    slope_at_1: float
    v: np.ndarray
    d_at_1: np.ndarray
    d_at_star: np.ndarray
    phases: list


@dataclass
class AlphaFitReport:
    alpha_star: float
    alphas: np.ndarray
    objective: np.ndarray
    subjects: list
    excluded: list = field(default_factory=list)
    warnings: list = field(default_factory=list)

    def _slopes(self, attr):
        return np.array([getattr(s, attr) for s in self.subjects])

    @property
    def slope_mean_at_1(self) -> float:
        return float(self._slopes("slope_at_1").mean())

    @property
    def slope_sd_at_1(self) -> float:
        return float(self._slopes("slope_at_1").std())

    @property
    def slope_mean_at_star(self) -> float:
        return float(self._slopes("slope").mean())

    @property
    def slope_sd_at_star(self) -> float:
        return float(self._slopes("slope").std())

    def to_dict(self) -> dict:
        return {
            "alpha_star": self.alpha_star,
            "grid": {"min": float(self.alphas[0]), "max": float(self.alphas[-1]), "count": int(self.alphas.size)},
            "slope_at_1": {"mean": self.slope_mean_at_1, "sd": self.slope_sd_at_1},
            "slope_at_alpha_star": {"mean": self.slope_mean_at_star, "sd": self.slope_sd_at_star},
            "subjects": [
                {
                    "id": s.subject_id,
                    "slope": s.slope,
                    "intercept": s.intercept,
                    "r2": s.r2,
                    "slope_at_1": s.slope_at_1,
                    "residuals": [float(r) for r in s.residuals],
                }
                for s in self.subjects
            ],
            "excluded": list(self.excluded),
            "warnings": list(self.warnings),
        }


def fit_alpha(subjects: Sequence[SubjectSeries], alpha_min: float = DEFAULT_ALPHA_GRID[0],
              alpha_max: float = DEFAULT_ALPHA_GRID[1], step: float = DEFAULT_ALPHA_GRID[2]) -> AlphaFitReport:
    """Brute-force ``argmin_alpha sum_j (a_j(alpha) + 1)**2``.

    Ties go to the smaller alpha.  Subjects whose regression is degenerate are
    dropped and listed in ``report.excluded``.
    """
    if len(subjects) == 0:
        raise ValidationError("fit_alpha needs at least one subject")
    alphas = alpha_grid(alpha_min, alpha_max, step)

    usable, excluded, notes = [], [], []
    for s in subjects:
        phases = _compress(s)
        v = np.array([math.log(p.volume) for p in phases])
        try:
            regress_slope(v, np.zeros_like(v))
        except ValidationError as exc:
            excluded.append(s.subject_id)
            notes.append(f"subject {s.subject_id!r} excluded: {exc}")
            warnings.warn(notes[-1], RuntimeWarning, stacklevel=2)
            continue
        usable.append((s, phases, v))
    if not usable:
        raise ValidationError("no subject with a usable regression")

    slopes = np.empty((alphas.size, len(usable)))
    for i, a in enumerate(alphas):
        for j, (_, phases, v) in enumerate(usable):
            d = np.array([p.log_density(a) for p in phases])
            slopes[i, j] = regress_slope(v, d)[0]
    objective = np.sum((slopes + 1.0) ** 2, axis=1)
    best = int(np.argmin(objective))
    alpha_star = float(alphas[best])

    fits = []
    for s, phases, v in usable:
        d_star = np.array([p.log_density(alpha_star) for p in phases])
        d_one = np.array([p.log_density(1.0) for p in phases])
        a, b, r2 = regress_slope(v, d_star)
        fits.append(
            SubjectFit(
                subject_id=s.subject_id,
                slope=a,
                intercept=b,
                r2=r2,
                residuals=d_star - (a * v + b),
                slope_at_1=regress_slope(v, d_one)[0],
                v=v,
                d_at_1=d_one,
                d_at_star=d_star,
                phases=list(s.phases),
            )
        )
    return AlphaFitReport(alpha_star, alphas, objective, fits, excluded, notes)
