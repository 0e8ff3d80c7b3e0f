"""Retrieval hot kernels.

The compiled extension is used when it was built and importable; otherwise the
numpy fallback is selected.  Set ``ELASTICREC_PURE_PYTHON=1`` to force the
fallback.
"""
import os

from . import _fallback

BACKEND = "python"
_impl = _fallback

if os.environ.get("ELASTICREC_PURE_PYTHON", "") not in ("1", "true", "yes"):
    try:
        from . import _ckernels as _impl  # noqa: F811
        BACKEND = "cython"
    except ImportError:
        _impl = _fallback

topk_rows = _impl.topk_rows
product_key_topk = _impl.product_key_topk


def available_backends():
    """Map backend name -> kernel module, for cross-checking and benchmarks."""
    out = {"python": _fallback}
    try:
        from . import _ckernels
        out["cython"] = _ckernels
    except ImportError:
        pass
    return out
