"""Differentiable extraction of rectilinear viewports from ERP frames.

A flow field stores, for every viewport pixel, the continuous ERP (row,
column) position of its ray; bilinear resampling through that field turns
an ERP frame into a viewport image. Both steps are registered as fused
autodiff primitives backed by the kernel backend, so a scalar loss on
viewport pixels propagates to the viewpoint the viewport is centered on.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from . import kernels
from .autodiff import Tensor, custom_op
from .geometry import Viewpoint, ViewportSpec

DEFAULT_VIEWPORT = ViewportSpec(224, 224, math.pi / 2)
DEFAULT_SEQUENCE_LEN = 7


class EmptyVideo(ValueError):
    pass


class EmptyPath(ValueError):
    pass


@dataclass(frozen=True)
class ErpVideo:
    """Decoded equirectangular frames with pixel values in [0, 1]."""

    frames: np.ndarray = field(repr=False)  # (F, He, We, 3)
    fps: float = 1.0

    def __post_init__(self):
        f = np.asarray(self.frames, dtype=np.float64)
        object.__setattr__(self, "frames", f)
        if f.ndim != 4 or f.shape[0] < 1 or f.shape[3] != 3:
            raise EmptyVideo("expected a (frames, height, width, 3) array")
        if f.min() < 0.0 or f.max() > 1.0:
            raise ValueError("pixel values must lie in [0, 1]")
        if not (self.fps > 0):
            raise ValueError("fps must be positive")

    @classmethod
    def still(cls, frame: np.ndarray) -> "ErpVideo":
        """Treat a single panorama as a video of one repeated frame."""
        return cls(frames=np.asarray(frame, dtype=np.float64)[None], fps=1.0)


@dataclass(frozen=True)
class ViewportSequence:
    frames: np.ndarray = field(repr=False)  # (L, Hv, Wv, 3)
    source_times: np.ndarray = field(repr=False)
    source_viewpoints: tuple


def pixel_grid(spec: ViewportSpec) -> tuple[np.ndarray, np.ndarray]:
    """Center-origin (u, v) plane offsets of every viewport pixel.

    Pixel (i, j) sits at u = j - (Wv-1)/2, v = i - (Hv-1)/2, so the grid is
    symmetric about the optical axis.
    """
    j = np.arange(spec.width_px, dtype=np.float64) - (spec.width_px - 1) / 2.0
    i = np.arange(spec.height_px, dtype=np.float64) - (spec.height_px - 1) / 2.0
    u = np.broadcast_to(j[None, :], (spec.height_px, spec.width_px))
    v = np.broadcast_to(i[:, None], (spec.height_px, spec.width_px))
    return np.ascontiguousarray(u), np.ascontiguousarray(v)


def flow_field(center: Viewpoint, spec: ViewportSpec,
               erp_height: int, erp_width: int) -> np.ndarray:
    """Continuous ERP coordinates for every viewport pixel, shape (Hv, Wv, 2)."""
    u, v = pixel_grid(spec)
    return kernels.flow_forward(center.phi, center.theta, spec.radius,
                                u, v, erp_height, erp_width)


def flow_field_op(phi: Tensor, theta: Tensor, spec: ViewportSpec,
                  erp_height: int, erp_width: int) -> Tensor:
    """Autodiff version of :func:`flow_field` for Tensor-valued centers."""
    u, v = pixel_grid(spec)
    data = kernels.flow_forward(float(phi.data), float(theta.data),
                                spec.radius, u, v, erp_height, erp_width)

    def vjp(g):
        d = kernels.flow_backward(float(phi.data), float(theta.data),
                                  spec.radius, u, v, erp_height, erp_width, g)
        return d[0], d[1]

    return custom_op(data, (phi, theta), vjp)


def bilinear_sample(frame: np.ndarray, field_mn: np.ndarray) -> np.ndarray:
    """Resample an ERP frame through a flow field (rows clamp, columns wrap)."""
    return kernels.bilinear_forward(np.asarray(frame, dtype=np.float64),
                                    np.asarray(field_mn, dtype=np.float64))


def bilinear_op(frame: np.ndarray, field_mn: Tensor) -> Tensor:
    """Autodiff version of :func:`bilinear_sample`; the frame is constant."""
    frame = np.asarray(frame, dtype=np.float64)
    data = kernels.bilinear_forward(frame, field_mn.data)

    def vjp(g):
        return (kernels.bilinear_backward(frame, field_mn.data, g),)

    return custom_op(data, (field_mn,), vjp)


def render_viewport(frame: np.ndarray, center: Viewpoint,
                    spec: ViewportSpec) -> np.ndarray:
    return bilinear_sample(frame, flow_field(center, spec,
                                             frame.shape[0], frame.shape[1]))


def select_indices(path_len: int, n_select: int) -> list[int]:
    """Uniformly spaced path indices; endpoints always included.

    Integer arithmetic keeps the selection exact: index k is
    floor(k * (T-1) / (L-1)).
    """
    if n_select < 1:
        raise ValueError("must select at least one index")
    if n_select == 1:
        return [0]
    return [k * (path_len - 1) // (n_select - 1) for k in range(n_select)]


def _nearest_frame(time_s: float, n_frames: int, fps: float) -> int:
    idx = int(round(time_s * fps))
    return min(max(idx, 0), n_frames - 1)


def render_sequence(video: ErpVideo, path, seq_len: int = DEFAULT_SEQUENCE_LEN,
                    spec: ViewportSpec = DEFAULT_VIEWPORT) -> ViewportSequence:
    """Render viewports at uniformly spaced viewpoints along a scanpath.

    Each selected viewpoint is paired with the temporally nearest video
    frame; a still panorama therefore reuses its single frame for the
    whole sequence.
    """
    points = path.points
    if len(points) < 1:
        raise EmptyPath("scanpath is empty")
    he, we = video.frames.shape[1], video.frames.shape[2]
    idxs = select_indices(len(points), seq_len)
    frames = np.empty((seq_len, spec.height_px, spec.width_px, 3))
    times = np.empty(seq_len)
    viewpoints = []
    for k, idx in enumerate(idxs):
        t = idx / path.rate_hz
        vp = Viewpoint(points[idx][0], points[idx][1])
        frame = video.frames[_nearest_frame(t, video.frames.shape[0], video.fps)]
        frames[k] = bilinear_sample(frame, flow_field(vp, spec, he, we))
        times[k] = t
        viewpoints.append(vp)
    return ViewportSequence(frames=frames, source_times=times,
                            source_viewpoints=tuple(viewpoints))


def render_sequence_op(video: ErpVideo, viewpoint_tensors, rate_hz: float,
                       seq_len: int = DEFAULT_SEQUENCE_LEN,
                       spec: ViewportSpec = DEFAULT_VIEWPORT,
                       flow_cache: dict | None = None) -> list[Tensor]:
    """Differentiable render along Tensor-valued viewpoints.

    ``viewpoint_tensors`` is a sequence of (phi, theta) Tensor pairs for the
    whole scanpath; gradients on the returned viewport images flow back into
    the selected viewpoints. ``flow_cache`` (keyed by selected index) lets
    callers share flow fields when rendering the same scanpath against
    several videos of equal ERP size.
    """
    if len(viewpoint_tensors) < 1:
        raise EmptyPath("scanpath is empty")
    he, we = video.frames.shape[1], video.frames.shape[2]
    idxs = select_indices(len(viewpoint_tensors), seq_len)
    out = []
    for idx in idxs:
        t = idx / rate_hz
        if flow_cache is not None and idx in flow_cache:
            field_t = flow_cache[idx]
        else:
            phi_t, theta_t = viewpoint_tensors[idx]
            field_t = flow_field_op(phi_t, theta_t, spec, he, we)
            if flow_cache is not None:
                flow_cache[idx] = field_t
        frame = video.frames[_nearest_frame(t, video.frames.shape[0], video.fps)]
        out.append(bilinear_op(frame, field_t))
    return out
