"""Hot-kernel backend selection.

The compiled Cython extension is preferred; the numpy reference is used when
the extension is unavailable or when ``DIALOSEQ_KERNELS=python`` is set.
Both expose the same functions, so callers import from this package only.
"""

import os

if os.environ.get("DIALOSEQ_KERNELS", "").lower() in ("python", "py", "reference"):
    from . import reference as _impl
else:
    try:
        from . import _ckernels as _impl  # type: ignore[attr-defined]
    except ImportError:
        from . import reference as _impl

BACKEND = _impl.BACKEND

softmax_fwd = _impl.softmax_fwd
softmax_bwd = _impl.softmax_bwd
layernorm_fwd = _impl.layernorm_fwd
layernorm_bwd = _impl.layernorm_bwd
relu_fwd = _impl.relu_fwd
relu_bwd = _impl.relu_bwd
adam_update = _impl.adam_update

__all__ = [
    "BACKEND",
    "softmax_fwd",
    "softmax_bwd",
    "layernorm_fwd",
    "layernorm_bwd",
    "relu_fwd",
    "relu_bwd",
    "adam_update",
]
