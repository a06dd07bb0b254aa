"""Kernel backend selection.

Imports the compiled Cython kernels when the extension was built, falling
back to the NumPy reference implementation otherwise. Set the environment
variable ``REDBERT_PURE_PY=1`` to force the fallback (used by the backend
comparison benchmark and tests).

Both backends expose the same functions; see ``pykernels`` for the
reference semantics. ``BACKEND`` names the one in use.
"""

import os

from . import pykernels

if os.environ.get("REDBERT_PURE_PY") == "1":
    _impl = pykernels
else:
    try:
        from . import _ckernels as _impl
    except ImportError:
        _impl = pykernels

BACKEND = _impl.BACKEND

softmax_fwd = _impl.softmax_fwd
softmax_bwd = _impl.softmax_bwd
log_softmax_fwd = _impl.log_softmax_fwd
log_softmax_bwd = _impl.log_softmax_bwd
gelu_fwd = _impl.gelu_fwd
gelu_bwd = _impl.gelu_bwd
layer_norm_fwd = _impl.layer_norm_fwd
layer_norm_bwd = _impl.layer_norm_bwd
adam_update = _impl.adam_update
