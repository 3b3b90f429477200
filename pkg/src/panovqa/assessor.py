"""Viewport-sequence quality assessment.

The built-in assessor is deliberately small: per-frame luminance,
absolute-gradient and local-contrast statistics averaged over the
sequence, followed by a one-hidden-layer scorer on the autodiff tape.
It is differentiable through every pixel, which is what end-to-end
training needs; plug in any external assessor object that implements
``assess`` (and advertise ``differentiable = False`` to skip joint
finetuning).
"""

from __future__ import annotations

import math
from dataclasses import dataclass, replace

import numpy as np

from .autodiff import Tensor, no_grad, stack
from .densitynet import (MAGIC_ASSESSOR, HeaderError, ShapeError,
                         load_tensor_file, save_tensor_file)
from .renderer import ViewportSequence

_CONTRAST_EPS = 1e-12
_BLOCK = 8

# gradient and contrast statistics are an order of magnitude smaller than
# mean luminance; this fixed rescaling keeps the scorer inputs comparable
_FEATURE_SCALE = np.array([1.0, 10.0, 10.0, 10.0])


@dataclass(frozen=True)
class AssessorHyper:
    n_features: int = 4
    hidden: int = 16
    seq_len: int = 7
    viewport_px: int = 224


@dataclass(frozen=True)
class AssessorParams:
    tensors: dict
    hyper: AssessorHyper

    def with_tensors(self, tensors: dict) -> "AssessorParams":
        return replace(self, tensors=tensors)


def _shapes(hyper: AssessorHyper) -> dict:
    return {
        "score.w0": (hyper.n_features, hyper.hidden),
        "score.b0": (hyper.hidden,),
        "score.w1": (hyper.hidden, 1),
        "score.b1": (1,),
    }


def init_assessor(seed: int, hyper: AssessorHyper = AssessorHyper()) -> AssessorParams:
    rng = np.random.default_rng(seed)
    tensors = {}
    for name, shape in _shapes(hyper).items():
        if name.endswith(".w0") or name.endswith(".w1"):
            bound = 1.0 / math.sqrt(shape[0])
            tensors[name] = rng.uniform(-bound, bound, size=shape)
        else:
            tensors[name] = np.zeros(shape)
    return AssessorParams(tensors=tensors, hyper=hyper)


def as_tensors(params: AssessorParams) -> dict:
    return {name: Tensor(arr) for name, arr in params.tensors.items()}


def sequence_features(frames: Tensor) -> Tensor:
    """(4,) feature vector of an (L, Hv, Wv, 3) viewport sequence.

    Features: mean luminance, mean absolute horizontal and vertical
    luminance gradients, and mean 8x8-block contrast (std with a small
    variance floor so all-constant frames stay differentiable).
    """
    lum = frames.mean(axis=3)
    mean_lum = lum.mean()
    grad_h = (lum[:, :, 1:] - lum[:, :, :-1]).abs().mean()
    grad_v = (lum[:, 1:, :] - lum[:, :-1, :]).abs().mean()
    n_frames, height, width = lum.shape
    hb = (height // _BLOCK) * _BLOCK
    wb = (width // _BLOCK) * _BLOCK
    blocks = lum[:, :hb, :wb].reshape(n_frames, hb // _BLOCK, _BLOCK,
                                      wb // _BLOCK, _BLOCK)
    bmean = blocks.mean(axis=(2, 4), keepdims=True)
    dev = blocks - bmean
    variance = (dev * dev).mean(axis=(2, 4))
    contrast = (variance + _CONTRAST_EPS).sqrt().mean()
    return stack([mean_lum, grad_h, grad_v, contrast]) * _FEATURE_SCALE


def assess_tensor(frames: Tensor, params_t: dict) -> Tensor:
    """Differentiable quality score of one viewport sequence."""
    x = sequence_features(frames).reshape(1, -1)
    hid = (x @ params_t["score.w0"] + params_t["score.b0"]).tanh()
    return (hid @ params_t["score.w1"] + params_t["score.b1"]).reshape(())


def assess(seq: ViewportSequence, params: AssessorParams) -> float:
    """Deterministic scalar quality estimate of a rendered sequence."""
    frames = np.asarray(seq.frames, dtype=np.float64)
    hyper = params.hyper
    if frames.ndim != 4 or frames.shape[3] != 3:
        raise ValueError("expected an (L, Hv, Wv, 3) sequence")
    if frames.shape[0] != hyper.seq_len \
            or frames.shape[1] != hyper.viewport_px \
            or frames.shape[2] != hyper.viewport_px:
        raise ValueError(
            f"sequence shape {frames.shape[:3]} does not match assessor "
            f"({hyper.seq_len}, {hyper.viewport_px}, {hyper.viewport_px})")
    with no_grad():
        return float(assess_tensor(Tensor(frames), as_tensors(params)).data)


def aggregate(scores) -> float:
    """Arithmetic mean of per-sequence scores.

    Uses exact summation, so the result is bit-identical under any
    permutation of the inputs.
    """
    scores = list(scores)
    if not scores:
        raise ValueError("cannot aggregate an empty score list")
    return math.fsum(float(s) for s in scores) / len(scores)


class ToyAssessor:
    """Built-in differentiable assessor bound to a parameter set."""

    differentiable = True

    def __init__(self, params: AssessorParams):
        self.params = params

    def assess(self, seq: ViewportSequence) -> float:
        return assess(seq, self.params)

    def assess_tensor(self, frames: Tensor, params_t: dict | None = None) -> Tensor:
        return assess_tensor(frames, params_t or as_tensors(self.params))


# -- checkpoints ----------------------------------------------------------------

def _hyper_vector(hyper: AssessorHyper) -> np.ndarray:
    return np.array([hyper.n_features, hyper.hidden, hyper.seq_len,
                     hyper.viewport_px], dtype=np.float64)


def save_assessor(params: AssessorParams, path) -> None:
    tensors = dict(params.tensors)
    tensors["__hyper__"] = _hyper_vector(params.hyper)
    save_tensor_file(path, tensors, MAGIC_ASSESSOR)


def load_assessor(path) -> AssessorParams:
    tensors = load_tensor_file(path, MAGIC_ASSESSOR)
    if "__hyper__" not in tensors:
        raise HeaderError(f"{path}: missing hyper block")
    vec = tensors.pop("__hyper__")
    if vec.shape != (4,):
        raise ShapeError("hyper block has unexpected shape")
    hyper = AssessorHyper(n_features=int(vec[0]), hidden=int(vec[1]),
                          seq_len=int(vec[2]), viewport_px=int(vec[3]))
    expected = _shapes(hyper)
    if set(tensors) != set(expected):
        raise ShapeError(f"{path}: parameter names do not match architecture")
    for name, shape in expected.items():
        if tensors[name].shape != shape:
            raise ShapeError(f"{path}: {name} has shape {tensors[name].shape}, "
                             f"expected {shape}")
    return AssessorParams(tensors=tensors, hyper=hyper)
