"""Scanpath-fidelity and quality-correlation metrics.

Set-to-set scanpath comparison uses the minimum mean great-circle distance
and the maximum temporal correlation over all cross pairs. Quality metrics
are Spearman's rank correlation and Pearson correlation after an optional
four-parameter monotonic logistic remapping of the predictions.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
from scipy.optimize import least_squares
from scipy.stats import rankdata

from . import geometry
from .generator import Scanpath


class DegenerateSeriesError(ValueError):
    """Correlation is undefined for a constant series."""


def od(a: Scanpath, b: Scanpath) -> float:
    """Mean great-circle distance between two equal-length scanpaths.

    Uses the spherical law of cosines with a clamped argument; each
    per-step term lies in [0, pi].
    """
    pa, pb = a.points, b.points
    if pa.shape[0] != pb.shape[0]:
        raise ValueError("scanpaths must have equal length")
    cos_d = (np.cos(pa[:, 0]) * np.cos(pb[:, 0]) * np.cos(pa[:, 1] - pb[:, 1])
             + np.sin(pa[:, 0]) * np.sin(pb[:, 0]))
    return float(np.mean(np.arccos(np.clip(cos_d, -1.0, 1.0))))


def plcc(x, y) -> float:
    """Pearson linear correlation; raises on constant input."""
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    if x.shape != y.shape or x.size < 3:
        raise ValueError("need two equal-length series of length >= 3")
    xd = x - x.mean()
    yd = y - y.mean()
    sx = math.sqrt(float(np.sum(xd * xd)))
    sy = math.sqrt(float(np.sum(yd * yd)))
    if sx == 0.0 or sy == 0.0:
        raise DegenerateSeriesError("constant series has no correlation")
    return float(np.sum(xd * yd) / (sx * sy))


def unwrap_longitudes(theta: np.ndarray) -> np.ndarray:
    """Remove +-2pi jumps so longitude series correlate across the seam."""
    return np.unwrap(np.asarray(theta, dtype=np.float64))


def tc(a: Scanpath, b: Scanpath) -> float:
    """Temporal correlation: mean of latitude and longitude Pearson r."""
    pa, pb = a.points, b.points
    if pa.shape[0] != pb.shape[0]:
        raise ValueError("scanpaths must have equal length")
    r_phi = plcc(pa[:, 0], pb[:, 0])
    r_theta = plcc(unwrap_longitudes(pa[:, 1]), unwrap_longitudes(pb[:, 1]))
    return 0.5 * (r_phi + r_theta)


@dataclass(frozen=True)
class SetComparison:
    min_od: float
    max_tc: float
    degenerate_pairs: int
    od_table: np.ndarray
    tc_table: np.ndarray


def compare_sets(real, generated) -> SetComparison:
    """All-pairs scanpath comparison between two sets.

    Pairs with a constant coordinate series are excluded from the max-TC
    reduction (their table entry is NaN) and counted separately.
    """
    if not real or not generated:
        raise ValueError("scanpath sets must be nonempty")
    od_table = np.empty((len(real), len(generated)))
    tc_table = np.full((len(real), len(generated)), np.nan)
    degenerate = 0
    for i, s in enumerate(real):
        for j, t in enumerate(generated):
            od_table[i, j] = od(s, t)
            try:
                tc_table[i, j] = tc(s, t)
            except DegenerateSeriesError:
                degenerate += 1
    if np.all(np.isnan(tc_table)):
        max_tc_val = math.nan
    else:
        max_tc_val = float(np.nanmax(tc_table))
    return SetComparison(min_od=float(od_table.min()), max_tc=max_tc_val,
                         degenerate_pairs=degenerate, od_table=od_table,
                         tc_table=tc_table)


def min_od(real, generated) -> float:
    return compare_sets(real, generated).min_od


def max_tc(real, generated) -> float:
    return compare_sets(real, generated).max_tc


def srcc(x, y) -> float:
    """Spearman rank correlation (average ranks for ties)."""
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    if x.shape != y.shape or x.size < 3:
        raise ValueError("need two equal-length series of length >= 3")
    return plcc(rankdata(x), rankdata(y))


@dataclass(frozen=True)
class LogisticFit:
    plcc_fitted: float
    plcc_raw: float
    converged: bool
    betas: tuple


def _logistic4(q, betas):
    b1, b2, b3, b4 = betas
    return (b1 - b2) / (1.0 + np.exp(-(q - b3) / abs(b4))) + b2


def plcc_logistic(pred, labels) -> LogisticFit:
    """Pearson correlation after a 4-parameter monotonic logistic fit.

    The remapping compensates for nonlinearity between predictions and
    subjective scores. A fit that fails to converge, or that lands below
    the raw correlation (which an affine map always achieves), falls back
    to the raw value with ``converged=False``.
    """
    pred = np.asarray(pred, dtype=np.float64)
    labels = np.asarray(labels, dtype=np.float64)
    if pred.shape != labels.shape or pred.size < 5:
        raise ValueError("need at least 5 prediction/label pairs")
    raw = plcc(pred, labels)
    spread = float(pred.std())
    if spread == 0.0:
        raise DegenerateSeriesError("constant predictions")
    init = np.array([labels.max(), labels.min(), float(np.median(pred)),
                     spread])
    try:
        fit = least_squares(lambda b: _logistic4(pred, b) - labels, init,
                            method="lm", max_nfev=200 * (pred.size + 1))
        betas = tuple(float(v) for v in fit.x)
        fitted = plcc(_logistic4(pred, betas), labels)
        ok = bool(fit.success)
    except (ValueError, DegenerateSeriesError):
        fitted, betas, ok = raw, (math.nan,) * 4, False
    if not ok or fitted < raw:
        return LogisticFit(plcc_fitted=raw, plcc_raw=raw, converged=False,
                           betas=betas)
    return LogisticFit(plcc_fitted=fitted, plcc_raw=raw, converged=True,
                       betas=betas)


def saliency_from_scanpaths(paths, erp_height: int, erp_width: int,
                            kernel_deg: float = 5.0) -> np.ndarray:
    """Accumulate an ERP heatmap of isotropic spherical splats.

    Every viewpoint contributes a spherical Gaussian of angular standard
    deviation ``kernel_deg``; accumulation is weighted by per-pixel solid
    angle and the map is normalized to sum to one.
    """
    if not paths:
        raise ValueError("need at least one scanpath")
    sigma = math.radians(kernel_deg)
    rows = (0.5 - (np.arange(erp_height) + 0.5) / erp_height) * math.pi
    cols = ((np.arange(erp_width) + 0.5) / erp_width - 0.5) * 2.0 * math.pi
    grid_phi = rows[:, None]
    grid_theta = cols[None, :]
    cos_phi = np.cos(grid_phi)
    sin_phi = np.sin(grid_phi)
    heat = np.zeros((erp_height, erp_width))
    for path in paths:
        for phi, theta in path.points:
            cos_d = (cos_phi * math.cos(phi) * np.cos(grid_theta - theta)
                     + sin_phi * math.sin(phi))
            d = np.arccos(np.clip(cos_d, -1.0, 1.0))
            heat += np.exp(-0.5 * (d / sigma) ** 2)
    heat *= cos_phi  # solid-angle weight of each ERP row
    total = heat.sum()
    if total > 0.0:
        heat /= total
    return heat
