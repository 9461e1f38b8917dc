"""Hot-kernel backend selection.

The compiled extension is used when it imported successfully; otherwise
(or when ``FACEFIT3D_PURE=1`` is set) the NumPy implementations take
over.  ``BACKEND`` names the active choice.
"""

import os

from . import numpy_backend

if os.environ.get("FACEFIT3D_PURE"):
    _impl = numpy_backend
    BACKEND = "numpy"
else:
    try:
        from . import _fast as _impl

        BACKEND = "compiled"
    except ImportError:
        _impl = numpy_backend
        BACKEND = "numpy"

hog_cell_hists = _impl.hog_cell_hists
rasterize = _impl.rasterize

__all__ = ["BACKEND", "hog_cell_hists", "rasterize", "numpy_backend"]
