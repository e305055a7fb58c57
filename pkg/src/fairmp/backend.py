"""Selects the numeric kernel implementation at import time.

The compiled extension is used when present; set ``FAIRMP_NO_EXT=1`` to force
the pure-numpy fallback (useful for benchmarking and debugging).
"""

from __future__ import annotations

import os

from fairmp import _numpy_core

if os.environ.get("FAIRMP_NO_EXT", "") not in ("", "0"):
    _impl = _numpy_core
else:
    try:
        from fairmp import _speedups as _impl  # type: ignore[no-redef]
    except ImportError:
        _impl = _numpy_core

BACKEND_NAME: str = _impl.BACKEND_NAME
csr_matmat = _impl.csr_matmat
pairwise_sq_dists = _impl.pairwise_sq_dists
cross_sq_dists = _impl.cross_sq_dists
