"""Backend selection for the hot loops.

The compiled extension is used when it imports; otherwise, or when
``FIELDST_PURE_PYTHON=1`` is set, the numpy fallback is used. Both expose
the same functions with identical numerics.
"""

import os

from . import _kernels_py as pure

BACKEND = "python"
compiled = None

if os.environ.get("FIELDST_PURE_PYTHON", "") not in ("1", "true", "yes"):
    try:
        from . import _kernels as compiled  # type: ignore[no-redef]

        BACKEND = "cython"
    except ImportError:  # extension not built
        compiled = None

_impl = compiled if compiled is not None else pure

adamw_update = _impl.adamw_update
neg_laplacian = _impl.neg_laplacian
voronoi_assign = _impl.voronoi_assign
weighted_l1_terms = _impl.weighted_l1_terms
leaky_relu = _impl.leaky_relu
leaky_relu_grad = _impl.leaky_relu_grad

__all__ = [
    "BACKEND",
    "adamw_update",
    "compiled",
    "leaky_relu",
    "leaky_relu_grad",
    "neg_laplacian",
    "pure",
    "voronoi_assign",
    "weighted_l1_terms",
]
