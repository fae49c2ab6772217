"""Backend selection for the elementwise activation kernels.

The compiled extension is used when it imports; otherwise the numpy
implementation. Set ``PURIGRAD_PURE_PYTHON=1`` to force the fallback.

SiLU and its derivatives always run through numpy: they are bound by
``exp``, where numpy's vectorized routine beats a scalar libm loop.
"""

import os

from . import _pykernels

if os.environ.get("PURIGRAD_PURE_PYTHON", "") not in ("", "0"):
    impl = _pykernels
    BACKEND = "python"
else:
    try:
        from . import _ckernels as impl  # type: ignore[attr-defined]

        BACKEND = "cython"
    except ImportError:
        impl = _pykernels
        BACKEND = "python"

sigmoid = _pykernels.sigmoid
silu = _pykernels.silu
silu_grad_from = _pykernels.silu_grad_from
silu_grad2_from = _pykernels.silu_grad2_from
silu_grad = _pykernels.silu_grad
silu_grad2 = _pykernels.silu_grad2
soft_leaky_relu = impl.soft_leaky_relu
soft_leaky_relu_grad = impl.soft_leaky_relu_grad
soft_leaky_relu_grad2 = impl.soft_leaky_relu_grad2
leaky_relu = impl.leaky_relu
leaky_relu_grad = impl.leaky_relu_grad

__all__ = [
    "BACKEND",
    "sigmoid",
    "silu",
    "silu_grad",
    "silu_grad_from",
    "silu_grad2_from",
    "silu_grad2",
    "soft_leaky_relu",
    "soft_leaky_relu_grad",
    "soft_leaky_relu_grad2",
    "leaky_relu",
    "leaky_relu_grad",
]
