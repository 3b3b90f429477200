"""Diagonal Gaussian mixture over the viewport plane.

Provides the conditional density over next-step uv coordinates, uniform
quantization, exact probability mass over quantization cells (product of
per-axis normal CDF differences) and the resulting code length in bits.

The floors below guard maximum-likelihood degeneracies: mixtures collapse
onto single points without a sigma floor, and a mass floor keeps the code
length finite for targets far in the tails.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
from scipy.special import ndtr

SIGMA_FLOOR = 1e-3    # pixels
WEIGHT_FLOOR = 1e-4
MASS_FLOOR = 1e-12

_LOG_2PI = math.log(2.0 * math.pi)


@dataclass(frozen=True)
class QuantizerSpec:
    """Uniform scalar quantizer with step size ``step`` (pixels)."""

    step: float = 0.2

    def __post_init__(self):
        if not (self.step > 0.0):
            raise ValueError("quantizer step must be positive")


@dataclass(frozen=True)
class GmmParams:
    """Mixture weights, per-component 2-D means, per-axis standard deviations."""

    weights: np.ndarray = field(repr=False)  # (K,)
    means: np.ndarray = field(repr=False)    # (K, 2)
    sigmas: np.ndarray = field(repr=False)   # (K, 2)

    def __post_init__(self):
        w = np.asarray(self.weights, dtype=np.float64)
        m = np.asarray(self.means, dtype=np.float64)
        s = np.asarray(self.sigmas, dtype=np.float64)
        object.__setattr__(self, "weights", w)
        object.__setattr__(self, "means", m)
        object.__setattr__(self, "sigmas", s)
        k = w.shape[0]
        if k < 1 or m.shape != (k, 2) or s.shape != (k, 2):
            raise ValueError("inconsistent mixture shapes")
        if abs(float(w.sum()) - 1.0) > 1e-9:
            raise ValueError("mixture weights must sum to 1")
        if np.any(w < WEIGHT_FLOOR - 1e-15):
            raise ValueError(f"mixture weights must be >= {WEIGHT_FLOOR}")
        if np.any(s < SIGMA_FLOOR - 1e-15):
            raise ValueError(f"sigmas must be >= {SIGMA_FLOOR}")

    @property
    def n_components(self) -> int:
        return self.weights.shape[0]


def gmm_density(g: GmmParams, point) -> float:
    """Mixture pdf at a uv point."""
    u, v = point
    zu = (u - g.means[:, 0]) / g.sigmas[:, 0]
    zv = (v - g.means[:, 1]) / g.sigmas[:, 1]
    log_norm = -_LOG_2PI - np.log(g.sigmas[:, 0]) - np.log(g.sigmas[:, 1])
    comp = np.exp(log_norm - 0.5 * (zu * zu + zv * zv))
    return float(np.sum(g.weights * comp))


def quantize(x: float, q: QuantizerSpec) -> float:
    """Uniform quantization ``step * floor(x / step + 1/2)``.

    Half-step boundaries follow plain floor semantics, so ties round up.
    """
    return q.step * math.floor(x / q.step + 0.5)


def _axis_mass(centers, mu, sigma, half_step):
    """Per-axis probability mass; shared verbatim with the training loss.

    The expression order here is load-bearing: the training pipeline
    re-implements the same formula on the autodiff tape and the two are
    compared bit-exactly.
    """
    hi = (centers + half_step - mu) / sigma
    lo = (centers - half_step - mu) / sigma
    return ndtr(hi) - ndtr(lo)


def gmm_mass(g: GmmParams, cell_center, q: QuantizerSpec) -> float:
    """Probability mass of the quantization cell around ``cell_center``.

    ``cell_center`` must lie on the quantization lattice. The result is
    clamped below by MASS_FLOOR.
    """
    cu, cv = cell_center
    for c in (cu, cv):
        if abs(quantize(c, q) - c) > 1e-9 * max(1.0, abs(c)):
            raise ValueError(f"cell center {c} is not on the lattice")
    half = 0.5 * q.step
    pu = _axis_mass(cu, g.means[:, 0], g.sigmas[:, 0], half)
    pv = _axis_mass(cv, g.means[:, 1], g.sigmas[:, 1], half)
    mass = np.sum(g.weights * pu * pv)
    return float(np.maximum(mass, MASS_FLOOR))


def code_length(g: GmmParams, target, q: QuantizerSpec) -> float:
    """Bits needed to encode the quantized target under the mixture."""
    u, v = target
    cell = (quantize(u, q), quantize(v, q))
    return float(-np.log2(gmm_mass(g, cell, q)))
