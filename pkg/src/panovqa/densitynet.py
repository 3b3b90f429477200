"""Learnable conditional density network over next-viewpoint uv offsets.

Two small fully connected subnetworks encode the historical relative
scanpaths and the causal (already generated) context; three linear heads
map their concatenated features to mixture weights, means and per-axis
standard deviations. One parameter set serves every generation step, so
scanpaths of arbitrary length reuse the same network.

Checkpoints use a self-describing binary format: magic bytes, a
length-prefixed JSON list of tensor descriptors, a little-endian float64
payload and a trailing CRC32 of the payload.
"""

from __future__ import annotations

import json
import math
import zlib
from dataclasses import dataclass, field, replace

import numpy as np

from .autodiff import Tensor, concat
from .gmm import GmmParams, QuantizerSpec, MASS_FLOOR, SIGMA_FLOOR, WEIGHT_FLOOR

MAGIC_GENERATOR = b"PSCN1\x00"
MAGIC_ASSESSOR = b"PSQA1\x00"

_HEAD_W_SCALE = 0.003
_HEAD_MU_SCALE = 0.01
_HEAD_SIGMA_SCALE = 0.005
# softplus(x) = 1 - SIGMA_FLOOR at this bias, so fresh sigmas start at 1 px
_SIGMA_BIAS = math.log(math.expm1(1.0 - SIGMA_FLOOR))


class CheckpointError(IOError):
    pass


class MagicError(CheckpointError):
    pass


class HeaderError(CheckpointError):
    pass


class ShapeError(CheckpointError):
    pass


class TruncationError(CheckpointError):
    pass


class ChecksumError(CheckpointError):
    pass


@dataclass(frozen=True)
class NetHyper:
    """Architecture constants; uv inputs are scaled by ``uv_scale``."""

    history_len: int = 5
    horizon: int = 5
    n_components: int = 3
    hist_hidden: int = 64
    causal_hidden: int = 32
    # typical per-step uv offsets are a few pixels; this scale puts them in
    # the responsive range of the tanh layers
    uv_scale: float = 1.0 / 16.0

    def __post_init__(self):
        if min(self.history_len, self.horizon, self.n_components,
               self.hist_hidden, self.causal_hidden) < 1:
            raise ValueError("hyper parameters must be positive")
        if not (self.uv_scale > 0):
            raise ValueError("uv_scale must be positive")

    @property
    def hist_in(self) -> int:
        return self.history_len * self.history_len * 2

    @property
    def causal_in(self) -> int:
        return self.horizon * 3

    @property
    def feature_dim(self) -> int:
        return self.hist_hidden + self.causal_hidden


@dataclass(frozen=True)
class CausalContext:
    """Already-generated uv points for the current block, causally masked.

    Valid entries always form a prefix; masked slots carry zeros so they
    cannot influence the network output.
    """

    uv: np.ndarray = field(repr=False)    # (W, 2)
    mask: np.ndarray = field(repr=False)  # (W,) of {0.0, 1.0}

    def __post_init__(self):
        m = np.asarray(self.mask, dtype=np.float64)
        n_valid = int(m.sum())
        if not np.array_equal(m, (np.arange(m.shape[0]) < n_valid)
                              .astype(np.float64)):
            raise ValueError("causal mask must be a prefix of ones")

    @classmethod
    def empty(cls, horizon: int) -> "CausalContext":
        return cls(uv=np.zeros((horizon, 2)), mask=np.zeros(horizon))

    def appended(self, u: float, v: float) -> "CausalContext":
        n_valid = int(self.mask.sum())
        if n_valid >= self.mask.shape[0]:
            raise ValueError("causal context is full")
        uv = self.uv.copy()
        uv[n_valid] = (u, v)
        mask = self.mask.copy()
        mask[n_valid] = 1.0
        return CausalContext(uv=uv, mask=mask)


@dataclass(frozen=True)
class GeneratorParams:
    """All learnable tensors, addressable by name for checkpoints and grads."""

    tensors: dict
    hyper: NetHyper

    def names(self):
        return list(self.tensors.keys())

    def with_tensors(self, tensors: dict) -> "GeneratorParams":
        return replace(self, tensors=tensors)


def _layer_shapes(hyper: NetHyper) -> dict:
    k = hyper.n_components
    f = hyper.feature_dim
    return {
        "hnet.w0": (hyper.hist_in, hyper.hist_hidden),
        "hnet.b0": (hyper.hist_hidden,),
        "hnet.w1": (hyper.hist_hidden, hyper.hist_hidden),
        "hnet.b1": (hyper.hist_hidden,),
        "cnet.w0": (hyper.causal_in, hyper.causal_hidden),
        "cnet.b0": (hyper.causal_hidden,),
        "cnet.w1": (hyper.causal_hidden, hyper.causal_hidden),
        "cnet.b1": (hyper.causal_hidden,),
        "head_w.w": (f, k),
        "head_w.b": (k,),
        "head_mu.w": (f, 2 * k),
        "head_mu.b": (2 * k,),
        "head_sigma.w": (f, 2 * k),
        "head_sigma.b": (2 * k,),
    }


def init_params(seed: int, hyper: NetHyper = NetHyper()) -> GeneratorParams:
    """Deterministic initialization.

    Hidden layers use symmetric uniform fan-in scaling. Head weights start
    near zero and the sigma-head bias is chosen so a fresh network emits
    near-uniform weights, near-zero means and sigmas close to 1 px.
    """
    rng = np.random.default_rng(seed)
    shapes = _layer_shapes(hyper)
    tensors = {}
    head_scales = {"head_w": _HEAD_W_SCALE, "head_mu": _HEAD_MU_SCALE,
                   "head_sigma": _HEAD_SIGMA_SCALE}
    for name, shape in shapes.items():
        group, kind = name.split(".")
        if group in head_scales:
            if kind == "w":
                tensors[name] = rng.uniform(-head_scales[group],
                                            head_scales[group], size=shape)
            else:
                tensors[name] = np.zeros(shape)
                if group == "head_sigma":
                    tensors[name] += _SIGMA_BIAS
        else:
            if kind == "w":
                bound = 1.0 / math.sqrt(shape[0])
                tensors[name] = rng.uniform(-bound, bound, size=shape)
            else:
                bound = 1.0 / math.sqrt(shapes[name.replace(".b", ".w")][0])
                tensors[name] = rng.uniform(-bound, bound, size=shape)
    return GeneratorParams(tensors=tensors, hyper=hyper)


def as_tensors(params: GeneratorParams) -> dict:
    return {name: Tensor(arr) for name, arr in params.tensors.items()}


# -- input packing ----------------------------------------------------------

def pack_history(hist_uv: np.ndarray, hyper: NetHyper) -> np.ndarray:
    """Flatten an (H, H, 2) relative-path stack into the H-Net input row."""
    h = hyper.history_len
    if hist_uv.shape != (h, h, 2):
        raise ValueError(f"expected history of shape {(h, h, 2)}")
    return (hist_uv * hyper.uv_scale).reshape(-1)

def pack_causal(causal: CausalContext, hyper: NetHyper) -> np.ndarray:
    """Flatten a causal context into (u, v, mask) slot triples."""
    w = hyper.horizon
    if causal.uv.shape != (w, 2):
        raise ValueError(f"expected causal context of shape {(w, 2)}")
    mask = causal.mask[:, None]
    slots = np.concatenate([causal.uv * hyper.uv_scale * mask, mask], axis=1)
    return slots.reshape(-1)


def pack_history_t(hist_uv_t: Tensor, hyper: NetHyper) -> Tensor:
    return (hist_uv_t * hyper.uv_scale).reshape(1, -1)


def pack_causal_t(causal_uv_t: Tensor, mask: np.ndarray,
                  hyper: NetHyper) -> Tensor:
    mask_col = mask[:, None]
    scaled = causal_uv_t * (hyper.uv_scale * mask_col)
    return concat([scaled, Tensor(mask_col)], axis=1).reshape(1, -1)


# -- forward -----------------------------------------------------------------

def forward_tensors(pt: dict, xh: Tensor, xc: Tensor, hyper: NetHyper):
    """Batched forward pass on the tape.

    ``xh`` is (B, H*H*2), ``xc`` is (B, W*3); returns weight, mean and
    sigma tensors of shapes (B, K), (B, K, 2), (B, K, 2). The mixture
    invariants (weights on the floored simplex, sigmas above the floor)
    hold by construction.
    """
    k = hyper.n_components
    h = (xh @ pt["hnet.w0"] + pt["hnet.b0"]).tanh()
    h = (h @ pt["hnet.w1"] + pt["hnet.b1"]).tanh()
    c = (xc @ pt["cnet.w0"] + pt["cnet.b0"]).tanh()
    c = (c @ pt["cnet.w1"] + pt["cnet.b1"]).tanh()
    f = concat([h, c], axis=1)
    logits = f @ pt["head_w.w"] + pt["head_w.b"]
    weights = logits.softmax(axis=-1) * (1.0 - k * WEIGHT_FLOOR) + WEIGHT_FLOOR
    b = xh.shape[0]
    means = (f @ pt["head_mu.w"] + pt["head_mu.b"]).reshape(b, k, 2)
    sigmas = (f @ pt["head_sigma.w"] + pt["head_sigma.b"]).softplus() \
        .reshape(b, k, 2) + SIGMA_FLOOR
    return weights, means, sigmas


def forward(params: GeneratorParams, hist, causal: CausalContext) -> GmmParams:
    """Single-sample forward returning a plain mixture.

    ``hist`` is the relative-scanpath stack: either a list of H
    RelativePath objects or an (H, H, 2) array of uv coordinates.
    """
    hist_uv = _history_array(hist, params.hyper)
    xh = Tensor(pack_history(hist_uv, params.hyper)[None, :])
    xc = Tensor(pack_causal(causal, params.hyper)[None, :])
    pt = as_tensors(params)
    w, mu, sig = forward_tensors(pt, xh, xc, params.hyper)
    return GmmParams(weights=w.data[0], means=mu.data[0], sigmas=sig.data[0])


def _history_array(hist, hyper: NetHyper) -> np.ndarray:
    if isinstance(hist, np.ndarray):
        return hist
    h = hyper.history_len
    if len(hist) != h:
        raise ValueError(f"expected {h} relative paths")
    return np.stack([p.uv for p in hist])


# -- training loss ------------------------------------------------------------

def code_length_tensors(weights: Tensor, means: Tensor, sigmas: Tensor,
                        targets: np.ndarray, quantizer: QuantizerSpec) -> Tensor:
    """Mean bits for a batch of quantized uv targets.

    Mirrors gmm.gmm_mass / gmm.code_length expression for expression so the
    two agree bit-exactly on identical mixture parameters.
    """
    step = quantizer.step
    cells = step * np.floor(targets / step + 0.5)  # (B, 2)
    half = 0.5 * step
    cu = (cells[:, 0:1] + half, cells[:, 0:1] - half)
    cv = (cells[:, 1:2] + half, cells[:, 1:2] - half)
    mu_u = means[:, :, 0]
    mu_v = means[:, :, 1]
    sig_u = sigmas[:, :, 0]
    sig_v = sigmas[:, :, 1]
    pu = ((Tensor(cu[0]) - mu_u) / sig_u).normal_cdf() \
        - ((Tensor(cu[1]) - mu_u) / sig_u).normal_cdf()
    pv = ((Tensor(cv[0]) - mu_v) / sig_v).normal_cdf() \
        - ((Tensor(cv[1]) - mu_v) / sig_v).normal_cdf()
    mass = (weights * pu * pv).sum(axis=1).clip_min(MASS_FLOOR)
    return -(mass.log2()).mean()


def batch_loss_tensors(pt: dict, xh: np.ndarray, xc: np.ndarray,
                       targets: np.ndarray, hyper: NetHyper,
                       quantizer: QuantizerSpec = QuantizerSpec()) -> Tensor:
    w, mu, sig = forward_tensors(pt, Tensor(xh), Tensor(xc), hyper)
    return code_length_tensors(w, mu, sig, targets, quantizer)


def grad_code_length(params: GeneratorParams, samples,
                     quantizer: QuantizerSpec = QuantizerSpec()):
    """Mean code length and its gradient for a batch of samples.

    Each sample is a (hist, causal, target_uv) triple where ``hist`` is a
    relative-path stack and ``target_uv`` the future point in the same
    frame. Returns ``(loss_bits, grads)`` with grads shaped like the
    parameter dict.
    """
    if len(samples) == 0:
        raise ValueError("empty batch")
    hyper = params.hyper
    xh = np.stack([pack_history(_history_array(h, hyper), hyper)
                   for h, _, _ in samples])
    xc = np.stack([pack_causal(c, hyper) for _, c, _ in samples])
    targets = np.array([[t[0], t[1]] for _, _, t in samples])
    pt = as_tensors(params)
    loss = batch_loss_tensors(pt, xh, xc, targets, hyper, quantizer)
    loss.backward()
    grads = {name: t.grad if t.grad is not None
             else np.zeros_like(params.tensors[name])
             for name, t in pt.items()}
    return float(loss.data), grads


# -- checkpoints ---------------------------------------------------------------

def _hyper_vector(hyper: NetHyper) -> np.ndarray:
    return np.array([hyper.history_len, hyper.horizon, hyper.n_components,
                     hyper.hist_hidden, hyper.causal_hidden, hyper.uv_scale])


def _hyper_from_vector(vec: np.ndarray) -> NetHyper:
    if vec.shape != (6,):
        raise ShapeError("hyper block has unexpected shape")
    return NetHyper(history_len=int(vec[0]), horizon=int(vec[1]),
                    n_components=int(vec[2]), hist_hidden=int(vec[3]),
                    causal_hidden=int(vec[4]), uv_scale=float(vec[5]))


def save_tensor_file(path, tensors: dict, magic: bytes) -> None:
    entries = []
    payload = bytearray()
    for name, arr in tensors.items():
        arr = np.ascontiguousarray(arr, dtype="<f8")
        entries.append({"name": name, "shape": list(arr.shape),
                        "byte_offset": len(payload)})
        payload.extend(arr.tobytes())
    header = json.dumps(entries).encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(magic)
        fh.write(len(header).to_bytes(4, "little"))
        fh.write(header)
        fh.write(payload)
        fh.write(zlib.crc32(payload).to_bytes(4, "little"))


def load_tensor_file(path, magic: bytes) -> dict:
    with open(path, "rb") as fh:
        blob = fh.read()
    if len(blob) < len(magic) or blob[:len(magic)] != magic:
        raise MagicError(f"{path}: bad magic bytes")
    pos = len(magic)
    if len(blob) < pos + 4:
        raise TruncationError(f"{path}: missing header length")
    header_len = int.from_bytes(blob[pos:pos + 4], "little")
    pos += 4
    if len(blob) < pos + header_len:
        raise TruncationError(f"{path}: truncated header")
    try:
        entries = json.loads(blob[pos:pos + header_len].decode("utf-8"))
        if not isinstance(entries, list):
            raise ValueError("header must be a list")
        for e in entries:
            if not {"name", "shape", "byte_offset"} <= set(e):
                raise ValueError("incomplete tensor descriptor")
    except (ValueError, UnicodeDecodeError) as exc:
        raise HeaderError(f"{path}: corrupt header: {exc}") from exc
    pos += header_len
    payload_len = 0
    for e in entries:
        n = int(np.prod(e["shape"], dtype=np.int64)) if e["shape"] else 1
        end = e["byte_offset"] + 8 * n
        payload_len = max(payload_len, end)
    if len(blob) < pos + payload_len + 4:
        raise TruncationError(f"{path}: truncated payload")
    payload = blob[pos:pos + payload_len]
    stored_crc = int.from_bytes(blob[pos + payload_len:pos + payload_len + 4],
                                "little")
    if zlib.crc32(payload) != stored_crc:
        raise ChecksumError(f"{path}: payload CRC mismatch")
    tensors = {}
    for e in entries:
        shape = tuple(int(s) for s in e["shape"])
        n = int(np.prod(shape, dtype=np.int64)) if shape else 1
        off = int(e["byte_offset"])
        try:
            flat = np.frombuffer(payload, dtype="<f8", count=n, offset=off)
            tensors[e["name"]] = flat.reshape(shape).astype(np.float64)
        except ValueError as exc:
            raise ShapeError(f"{path}: tensor {e['name']}: {exc}") from exc
    return tensors


def save_checkpoint(params: GeneratorParams, path) -> None:
    tensors = dict(params.tensors)
    tensors["__hyper__"] = _hyper_vector(params.hyper)
    save_tensor_file(path, tensors, MAGIC_GENERATOR)


def load_checkpoint(path) -> GeneratorParams:
    tensors = load_tensor_file(path, MAGIC_GENERATOR)
    if "__hyper__" not in tensors:
        raise HeaderError(f"{path}: missing hyper block")
    hyper = _hyper_from_vector(tensors.pop("__hyper__"))
    expected = _layer_shapes(hyper)
    if set(tensors) != set(expected):
        raise ShapeError(f"{path}: parameter names do not match architecture")
    for name, shape in expected.items():
        if tensors[name].shape != shape:
            raise ShapeError(
                f"{path}: {name} has shape {tensors[name].shape}, "
                f"expected {shape}")
    return GeneratorParams(tensors=tensors, hyper=hyper)
