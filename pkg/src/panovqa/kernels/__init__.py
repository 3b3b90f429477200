"""Render kernel backend selection.

The hot per-pixel kernels (flow-field construction and bilinear
resampling, forward and backward) exist twice: a compiled Cython core and
a vectorized numpy fallback. The compiled core is preferred when present;
set ``PANOVQA_KERNELS=python`` or ``PANOVQA_KERNELS=compiled`` to force a
backend (the latter raises if the extension is missing).
"""

from __future__ import annotations

import os

from . import _numpy

_choice = os.environ.get("PANOVQA_KERNELS", "auto").lower()

if _choice == "python":
    _impl = _numpy
elif _choice in ("auto", "compiled"):
    try:
        from . import _core as _impl  # type: ignore[no-redef]
    except ImportError:
        if _choice == "compiled":
            raise ImportError(
                "PANOVQA_KERNELS=compiled but the extension is not built; "
                "run `pip install -e . --no-build-isolation`")
        _impl = _numpy
else:
    raise ValueError(f"unknown PANOVQA_KERNELS value: {_choice!r}")

BACKEND = _impl.BACKEND_NAME

flow_forward = _impl.flow_forward
flow_backward = _impl.flow_backward
bilinear_forward = _impl.bilinear_forward
bilinear_backward = _impl.bilinear_backward


def available_backends() -> dict:
    """Name -> module for every importable backend (used by benchmarks)."""
    impls = {"python": _numpy}
    try:
        from . import _core
        impls["compiled"] = _core
    except ImportError:
        pass
    return impls
