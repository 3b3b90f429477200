"""Autoregressive scanpath generation.

A generation step predicts mixture parameters from the recent history
(re-expressed in each of its own viewport frames) plus the causally masked
points already generated in the current block, samples the next point
differentiably and smooths it with the proxy-viewer controller. Blocks of
W steps share one viewport frame centered at the last historical
viewpoint; after each block the history window slides forward.

Everything runs on the autodiff tape so the same rollout serves plain
generation (inside ``no_grad``) and end-to-end training, where gradients
flow from rendered viewports back into the network parameters.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from . import geometry
from .autodiff import Tensor, arctan2, no_grad, stack, straight_through
from .densitynet import (CausalContext, GeneratorParams, as_tensors,
                         forward_tensors, pack_causal_t, pack_history_t)
from .geometry import HORIZON_EPS, Viewpoint, ViewportSpec
from .sampling import (PidGains, PidState, gumbel_from_uniform, path_stream,
                       pid_advance, pid_correct, select_component)

RATE_HZ = 5.0  # viewpoints per second

# Frame geometry of the uv space the density model lives in. This is a
# parameterization of the sphere around the current gaze, independent of
# the viewport size used for rendering.
PATH_SPEC = ViewportSpec(224, 224, math.pi / 2)


@dataclass(frozen=True)
class Scanpath:
    """Time-ordered gaze directions, (T, 2) array of (phi, theta) rows."""

    points: np.ndarray = field(repr=False)
    rate_hz: float = RATE_HZ

    def __post_init__(self):
        p = np.asarray(self.points, dtype=np.float64)
        object.__setattr__(self, "points", p)
        if p.ndim != 2 or p.shape[1] != 2:
            raise ValueError("scanpath points must be a (T, 2) array")
        if not (self.rate_hz > 0):
            raise ValueError("rate must be positive")

    def __len__(self):
        return self.points.shape[0]

    @property
    def viewpoints(self) -> list[Viewpoint]:
        return [Viewpoint(p, t) for p, t in self.points]


@dataclass(frozen=True)
class GenerationConfig:
    start: Viewpoint = Viewpoint(0.0, 0.0)
    duration_s: float = 7.0
    n_paths: int = 20
    history_len: int = 5
    horizon: int = 5
    init_jitter_rad: float = 0.0
    seed: int = 0
    tau: float = 1.0
    gains: PidGains = PidGains()

    def __post_init__(self):
        if self.n_paths < 1:
            raise ValueError("need at least one path")
        if self.duration_s <= 0:
            raise ValueError("duration must be positive")
        if self.init_jitter_rad < 0:
            raise ValueError("jitter must be nonnegative")

    @property
    def n_blocks(self) -> int:
        """Blocks needed to cover the duration at the fixed sampling rate."""
        m = math.ceil((RATE_HZ * self.duration_s - self.history_len)
                      / self.horizon)
        return max(m, 0)


@dataclass
class RolloutResult:
    scanpath: Scanpath
    viewpoint_tensors: list   # [(phi, theta) Tensor pairs], length M*W + H
    clamp_count: int


# -- initial paths -------------------------------------------------------------

def _jittered_start(start: Viewpoint, history_len: int, jitter_rad: float,
                    rng: np.random.Generator) -> np.ndarray:
    """History window of ``start`` copies, each displaced by Gaussian jitter.

    The displacement is a signed normal angle along a uniformly random
    tangent direction, so the RMS angular deviation equals ``jitter_rad``.
    """
    basis = geometry.rotation_matrix(start)
    gaze, east, north = basis[:, 0], basis[:, 1], basis[:, 2]
    out = np.empty((history_len, 2))
    for h in range(history_len):
        psi = rng.uniform(0.0, 2.0 * math.pi)
        delta = rng.standard_normal() * jitter_rad
        direction = math.cos(psi) * east + math.sin(psi) * north
        w = math.cos(delta) * gaze + math.sin(delta) * direction
        out[h, 0] = math.asin(max(-1.0, min(1.0, w[2])))
        out[h, 1] = math.atan2(w[1], w[0])
    return out


def make_initial_paths(cfg: GenerationConfig) -> np.ndarray:
    """(N, H, 2) array of starting histories, one RNG stream per path."""
    return np.stack([
        _jittered_start(cfg.start, cfg.history_len, cfg.init_jitter_rad,
                        path_stream(cfg.seed, i))
        for i in range(cfg.n_paths)])


# -- tape-side geometry ---------------------------------------------------------

def _viewport_to_sphere_t(u: Tensor, v: Tensor, phi_c: Tensor,
                          theta_c: Tensor, spec: ViewportSpec):
    """Tensor version of the inverse viewport projection."""
    r = spec.radius
    a = theta_c.cos()
    b = theta_c.sin()
    c = phi_c.cos()
    d = phi_c.sin()
    # w = r * gaze + u * east - v * north
    wx = r * (c * a) - u * b + v * (d * a)
    wy = r * (c * b) + u * a + v * (d * b)
    wz = r * d - v * c
    rho = (wx * wx + wy * wy + wz * wz).sqrt()
    phi = (wz / rho).arcsin()
    theta = arctan2(wy, wx)
    if float(theta.data) == math.pi:
        theta = theta - 2.0 * math.pi
    return phi, theta


def _relative_stack_t(phis: Tensor, thetas: Tensor, spec: ViewportSpec):
    """History window mapped into each of its own viewport frames.

    Returns an (H, H, 2) Tensor whose row t holds the window as seen from
    the frame of point H-1-t (most recent reference first), plus the
    number of horizon-clamped entries. Clamped entries enter as constants,
    so they carry rim coordinates but no gradient.
    """
    r = spec.radius
    h = phis.shape[0]
    cp = phis.cos()
    sp = phis.sin()
    ct = thetas.cos()
    st = thetas.sin()
    x = (cp * ct) * r
    y = (cp * st) * r
    z = sp * r
    cos_limit = r * math.sin(HORIZON_EPS)
    clamp_count = 0
    rows = []
    for t in range(1, h + 1):
        j = h - t
        a, b, c, d = ct[j], st[j], cp[j], sp[j]
        xt = (c * a) * x + (c * b) * y + d * z
        yt = a * y - b * x
        zt = c * z - (d * a) * x - (d * b) * y
        valid = xt.data > cos_limit
        xt_safe = xt.clip_min(0.5 * cos_limit)
        u = (yt * r) / xt_safe
        v = -((zt * r) / xt_safe)
        if not valid.all():
            maskf = valid.astype(np.float64)
            ref = Viewpoint(float(phis.data[j]), float(thetas.data[j]))
            const_u = np.zeros(h)
            const_v = np.zeros(h)
            for i in np.nonzero(~valid)[0]:
                vp = Viewpoint(float(phis.data[i]), float(thetas.data[i]))
                (cu, cv), _ = geometry.sphere_to_viewport(vp, ref, spec)
                const_u[i] = cu
                const_v[i] = cv
                clamp_count += 1
            u = u * maskf + const_u * (1.0 - maskf)
            v = v * maskf + const_v * (1.0 - maskf)
        rows.append(stack([u, v], axis=1))
    return stack(rows, axis=0), clamp_count


# -- generation steps -----------------------------------------------------------

def _predict_mixture_t(params_t: dict, hyper, hist_stack: Tensor,
                       causal_uv_t: Tensor, causal_mask: np.ndarray):
    xh = pack_history_t(hist_stack, hyper)
    xc = pack_causal_t(causal_uv_t, causal_mask, hyper)
    w, mu, sig = forward_tensors(params_t, xh, xc, hyper)
    return w[0], mu[0], sig[0]


def _sample_step_t(weights: Tensor, means: Tensor, sigmas: Tensor,
                   state: PidState, gains: PidGains, tau: float,
                   rng: np.random.Generator):
    """Differentiable sample of the next uv position (PID-smoothed)."""
    k = weights.shape[0]
    gumbel = gumbel_from_uniform(rng.uniform(size=k))
    one_hot, surrogate = select_component(weights, gumbel, tau)
    eps = rng.standard_normal(2)
    sel = straight_through(one_hot, surrogate).reshape(k, 1)
    mu = (means * sel).sum(axis=0)
    sigma = (sigmas * sel).sum(axis=0)
    reference = mu + sigma * eps
    state = pid_correct(state, reference, gains)
    state = pid_advance(state, gains)
    return state.position, state


def rollout(params: GeneratorParams, initial: np.ndarray, n_blocks: int,
            rng: np.random.Generator, gains: PidGains = PidGains(),
            tau: float = 1.0, spec: ViewportSpec = PATH_SPEC,
            params_t: dict | None = None) -> RolloutResult:
    """Generate one scanpath of ``n_blocks * W + H`` viewpoints.

    ``initial`` is the (H, 2) starting history. The proxy-viewer state
    persists across blocks: kinematic quantities carry over unchanged
    while the position re-expresses exactly to the origin of each new
    block frame (the frame is centered on it). Pass pre-wrapped parameter
    tensors via ``params_t`` to accumulate gradients across rollouts.
    """
    hyper = params.hyper
    h, w = hyper.history_len, hyper.horizon
    if initial.shape != (h, 2):
        raise ValueError(f"initial history must have shape {(h, 2)}")
    if params_t is None:
        params_t = as_tensors(params)
    vp_tensors = [(Tensor(p), Tensor(t)) for p, t in initial]
    points = [(float(p), float(t)) for p, t in initial]
    history = list(vp_tensors)
    state = PidState.zero()
    clamp_count = 0

    for _ in range(n_blocks):
        phis = stack([p for p, _ in history])
        thetas = stack([t for _, t in history])
        hist_stack, clamps = _relative_stack_t(phis, thetas, spec)
        clamp_count += clamps
        phi_c, theta_c = history[-1]
        state = state.with_position(np.zeros(2))
        causal_uv: list = []
        emitted: list = []
        for step in range(w):
            mask = (np.arange(w) < step).astype(np.float64)
            if causal_uv:
                causal_t = stack(causal_uv
                                 + [Tensor(np.zeros(2))] * (w - len(causal_uv)))
            else:
                causal_t = Tensor(np.zeros((w, 2)))
            weights, means, sigmas = _predict_mixture_t(
                params_t, hyper, hist_stack, causal_t, mask)
            position, state = _sample_step_t(weights, means, sigmas, state,
                                             gains, tau, rng)
            causal_uv.append(position)
            phi_e, theta_e = _viewport_to_sphere_t(
                position[0], position[1], phi_c, theta_c, spec)
            emitted.append((phi_e, theta_e))
            points.append((float(phi_e.data),
                           geometry.wrap_longitude(float(theta_e.data))))
        vp_tensors.extend(emitted)
        history = (history + emitted)[-h:]

    scanpath = Scanpath(points=np.array(points).reshape(-1, 2))
    return RolloutResult(scanpath=scanpath, viewpoint_tensors=vp_tensors,
                         clamp_count=clamp_count)


def sgu_step(params: GeneratorParams, hist: np.ndarray,
             causal: CausalContext, state: PidState,
             rng: np.random.Generator, gains: PidGains = PidGains(),
             tau: float = 1.0, spec: ViewportSpec = PATH_SPEC):
    """One generation step from an (H, 2) Euler history window.

    Returns ``(viewpoint, uv_position, new_state)`` where the emitted
    viewpoint is the controller position mapped back to the sphere through
    the frame of the last historical viewpoint.
    """
    with no_grad():
        phis = Tensor(hist[:, 0])
        thetas = Tensor(hist[:, 1])
        hist_stack, _ = _relative_stack_t(phis, thetas, spec)
        params_t = as_tensors(params)
        weights, means, sigmas = _predict_mixture_t(
            params_t, params.hyper, hist_stack, Tensor(causal.uv), causal.mask)
        position, state = _sample_step_t(weights, means, sigmas, state,
                                         gains, tau, rng)
        phi_e, theta_e = _viewport_to_sphere_t(
            position[0], position[1], Tensor(hist[-1, 0]), Tensor(hist[-1, 1]),
            spec)
    vp = Viewpoint(float(phi_e.data), float(theta_e.data))
    return vp, position.data.copy(), state


def sgb_rollout(params: GeneratorParams, hist: np.ndarray,
                state: PidState, rng: np.random.Generator,
                gains: PidGains = PidGains(), tau: float = 1.0,
                spec: ViewportSpec = PATH_SPEC):
    """One block of W steps sharing the frame of the last history point."""
    w = params.hyper.horizon
    causal = CausalContext.empty(w)
    state = state.with_position(np.zeros(2))
    out = []
    for _ in range(w):
        vp, uv, state = sgu_step(params, hist, causal, state, rng,
                                 gains=gains, tau=tau, spec=spec)
        causal = causal.appended(uv[0], uv[1])
        out.append(vp)
    return out, state


def generate_scanpath(params: GeneratorParams, initial: np.ndarray,
                      n_blocks: int, rng: np.random.Generator,
                      gains: PidGains = PidGains(), tau: float = 1.0) -> Scanpath:
    """Plain (gradient-free) generation of a single scanpath."""
    with no_grad():
        return rollout(params, initial, n_blocks, rng, gains=gains,
                       tau=tau).scanpath


def generate_batch(params: GeneratorParams, cfg: GenerationConfig):
    """Generate ``cfg.n_paths`` scanpaths on disjoint RNG streams.

    Each path consumes only its own stream (jitter draws included), so the
    result is independent of generation order. Returns the scanpath list
    and the total number of horizon clamps.
    """
    if params.hyper.history_len != cfg.history_len \
            or params.hyper.horizon != cfg.horizon:
        raise ValueError("generation config does not match model hyper block")
    paths = []
    clamps = 0
    with no_grad():
        for i in range(cfg.n_paths):
            stream = path_stream(cfg.seed, i)
            initial = _jittered_start(cfg.start, cfg.history_len,
                                      cfg.init_jitter_rad, stream)
            result = rollout(params, initial, cfg.n_blocks, stream,
                             gains=cfg.gains, tau=cfg.tau)
            paths.append(result.scanpath)
            clamps += result.clamp_count
    return paths, clamps
