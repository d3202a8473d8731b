"""Hot numerical kernels with a compiled core and a numpy fallback.

The compiled extension is used when it was built and ``PIXSEG_PURE_PYTHON``
is unset; otherwise the pure-python versions are bound. ``BACKEND`` names the
active implementation.
"""

import os

from . import _pykernels as python

compiled = None
if not os.environ.get("PIXSEG_PURE_PYTHON"):
    try:
        from . import _ckernels as compiled
    except ImportError:
        compiled = None

_active = compiled if compiled is not None else python
BACKEND = "cython" if compiled is not None else "python"

segment_sums = _active.segment_sums
crosstab = _active.crosstab
cosine_assign = _active.cosine_assign
window_propagate = _active.window_propagate
kmeanspp_seed = _active.kmeanspp_seed

__all__ = [
    "BACKEND",
    "compiled",
    "python",
    "segment_sums",
    "crosstab",
    "cosine_assign",
    "window_propagate",
    "kmeanspp_seed",
]
