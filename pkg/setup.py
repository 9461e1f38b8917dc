"""Builds the optional compiled kernels.

Set FACEFIT3D_SKIP_EXT=1 to install without the extension; the package
then falls back to the NumPy kernel implementations at import time.
"""

import os

from setuptools import Extension, setup

ext_modules = []
if not os.environ.get("FACEFIT3D_SKIP_EXT"):
    import numpy as np
    from Cython.Build import cythonize

    ext_modules = cythonize(
        [
            Extension(
                "facefit3d.kernels._fast",
                ["src/facefit3d/kernels/_fast.pyx"],
                include_dirs=[np.get_include()],
                define_macros=[("NPY_NO_DEPRECATED_API", "NPY_1_7_API_VERSION")],
                extra_compile_args=["-O3"],
            )
        ],
        language_level=3,
    )

setup(ext_modules=ext_modules)
