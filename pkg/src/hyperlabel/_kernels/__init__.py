"""Hot inner-loop kernels with a compiled fast path.

The Cython extension ``hyperlabel._kernels._native`` is preferred when it
built successfully; otherwise the pure numpy implementations take over.
Set ``HYPERLABEL_PURE=1`` to force the fallback (used by the benchmark and
the backend-equivalence tests).
"""

import os

from . import _pure

if os.environ.get("HYPERLABEL_PURE", "") not in ("", "0"):
    _impl = _pure
    BACKEND = "pure"
else:
    try:
        from . import _native as _impl  # type: ignore[no-redef]

        BACKEND = "native"
    except ImportError:
        _impl = _pure
        BACKEND = "pure"

build_reciprocal_rows = _impl.build_reciprocal_rows
jaccard_from_rows = _impl.jaccard_from_rows
dbscan_labels = _impl.dbscan_labels


def backend_name() -> str:
    """Name of the active backend: ``native`` or ``pure``."""
    return BACKEND
