"""Kernel backend selection.

Imports the compiled extension when it is available, otherwise the numpy
fallback.  Set ``ICSID_PURE_PYTHON=1`` to force the fallback (used by the
benchmark and backend-equivalence tests).
"""

import os

if os.environ.get("ICSID_PURE_PYTHON", "") == "1":
    from icsid._core import _kernels_py as _impl

    BACKEND = "python"
else:
    try:
        from icsid._core import _kernels as _impl

        BACKEND = "compiled"
    except ImportError:
        from icsid._core import _kernels_py as _impl

        BACKEND = "python"

iir_filter = _impl.iir_filter
rnn_scan_fwd = _impl.rnn_scan_fwd
rnn_scan_bwd = _impl.rnn_scan_bwd
