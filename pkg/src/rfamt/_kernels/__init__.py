"""Hot-loop kernels for the gated recurrence.

The compiled Cython extension is preferred when it was built; otherwise
the pure-NumPy implementation in scan_py is used.  Set RFAMT_PURE_PY=1 to
force the fallback (useful for debugging and for the kernel benchmark).
Both implementations share one contract, documented in scan_py.
"""

import os

from rfamt._kernels import scan_py

_force_py = os.environ.get("RFAMT_PURE_PY", "0") not in ("", "0")

if not _force_py:
    try:
        from rfamt._kernels import _scan as _impl

        KERNEL_BACKEND = "compiled"
    except ImportError:
        _impl = scan_py
        KERNEL_BACKEND = "python"
else:
    _impl = scan_py
    KERNEL_BACKEND = "python"

scan_forward = _impl.scan_forward
scan_backward = _impl.scan_backward


def available_impls():
    """Name -> module for every importable kernel implementation."""
    impls = {"python": scan_py}
    try:
        from rfamt._kernels import _scan

        impls["compiled"] = _scan
    except ImportError:
        pass
    return impls
