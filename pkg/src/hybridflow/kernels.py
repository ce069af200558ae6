"""Select the compiled kernels when available, the pure-Python ones otherwise.

Set ``HYBRIDFLOW_PURE_PYTHON=1`` to force the fallback.
"""

import os

from . import _fallback

BACKEND = "python"
_impl = _fallback

if os.environ.get("HYBRIDFLOW_PURE_PYTHON", "") not in ("1", "true", "yes"):
    try:
        from . import _kernels as _impl  # noqa: F811

        BACKEND = "cython"
    except ImportError:  # extension not built
        _impl = _fallback

geodesic_voronoi = _impl.geodesic_voronoi
seed_knn = _impl.seed_knn
label_components = _impl.label_components
sor_red_black = _impl.sor_red_black

__all__ = ["BACKEND", "geodesic_voronoi", "seed_knn", "label_components", "sor_red_black"]
