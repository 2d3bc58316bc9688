"""Hot-kernel dispatch: numba-jitted loops with a pure-NumPy fallback.

The backend is picked once at import from the C4IL_BACKEND environment
variable: "numba", "numpy", or unset/"auto" (numba when importable).
`benchmarks/bench_kernels.py` compares the two side by side.
"""

import os

from . import numpy_impl

try:
    from . import numba_impl
    NUMBA_AVAILABLE = True
except ImportError:
    numba_impl = None
    NUMBA_AVAILABLE = False

_KERNEL_NAMES = ("concentration_loss_grad", "bilinear_resize", "im2col", "col2im_add")


def _select(flag: str) -> str:
    flag = flag.lower()
    if flag in ("", "auto"):
        return "numba" if NUMBA_AVAILABLE else "numpy"
    if flag == "numba":
        if not NUMBA_AVAILABLE:
            raise ImportError("C4IL_BACKEND=numba but numba is not importable")
        return "numba"
    if flag == "numpy":
        return "numpy"
    raise ValueError(f"C4IL_BACKEND must be 'numba', 'numpy' or 'auto', got {flag!r}")


_BACKEND = _select(os.environ.get("C4IL_BACKEND", "auto"))
_impl = numba_impl if _BACKEND == "numba" else numpy_impl


def active_backend() -> str:
    """Name of the backend the dispatch functions currently use."""
    return _BACKEND


def backend_module(name: str):
    """Fetch a backend module by name (for tests and benchmarks)."""
    if name == "numpy":
        return numpy_impl
    if name == "numba":
        if not NUMBA_AVAILABLE:
            raise ImportError("numba backend requested but numba is not importable")
        return numba_impl
    raise ValueError(f"unknown backend {name!r}")


def concentration_loss_grad(gamma, pos_mask):
    return _impl.concentration_loss_grad(gamma, pos_mask)


def bilinear_resize(img, out_h, out_w):
    return _impl.bilinear_resize(img, out_h, out_w)


def im2col(x, n, h, w, c, kh, kw):
    return _impl.im2col(x, n, h, w, c, kh, kw)


def col2im_add(cols, n, h, w, c, kh, kw):
    return _impl.col2im_add(cols, n, h, w, c, kh, kw)
