"""Kernel dispatch: compiled Cython extension when available, numpy otherwise.

Set MF_PURE_PYTHON=1 to force the numpy fallback (used by the benchmark and
to debug suspected kernel issues). Both backends are bit-compatible for the
operations' documented outputs up to floating-point reassociation; the test
suite runs whichever backend is selected.
"""

import os

if os.environ.get("MF_PURE_PYTHON"):
    from . import _kernels_py as impl
else:
    try:
        from . import _kernels as impl  # type: ignore[attr-defined]
    except ImportError:
        from . import _kernels_py as impl

COMPILED = bool(getattr(impl, "COMPILED", False))

layer_norm_fwd = impl.layer_norm_fwd
layer_norm_bwd = impl.layer_norm_bwd
gelu_fwd = impl.gelu_fwd
gelu_bwd = impl.gelu_bwd
softmax_fwd = impl.softmax_fwd
softmax_bwd = impl.softmax_bwd
log_softmax_fwd = impl.log_softmax_fwd
log_softmax_bwd = impl.log_softmax_bwd
cross_entropy_fwd = impl.cross_entropy_fwd
cross_entropy_bwd = impl.cross_entropy_bwd
embedding_grad = impl.embedding_grad
