"""Kernel backend selection.

The compiled extension is used when it imports; otherwise the numpy fallback.
Set ``FACT_PURE_PYTHON=1`` to force the fallback.
"""
import os

from fact import _pykernels

BACKEND = "python"
_impl = _pykernels

if os.environ.get("FACT_PURE_PYTHON", "") not in ("1", "true", "yes"):
    try:
        from fact import _ckernels as _impl  # noqa: F811

        BACKEND = "cython"
    except ImportError:
        _impl = _pykernels


def available_backends():
    names = {"python": _pykernels}
    try:
        from fact import _ckernels

        names["cython"] = _ckernels
    except ImportError:
        pass
    return names


gelu_forward = _impl.gelu_forward
gelu_backward = _impl.gelu_backward
softmax_forward = _impl.softmax_forward
softmax_backward = _impl.softmax_backward
layernorm_forward = _impl.layernorm_forward
layernorm_backward = _impl.layernorm_backward
adamw_update = _impl.adamw_update
