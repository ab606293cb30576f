import os

import numpy as np
from setuptools import Extension, setup

try:
    from Cython.Build import cythonize
except ImportError:  # sdist without Cython: package still works on the numpy path
    cythonize = None


def get_extensions():
    if cythonize is None or os.environ.get("COOPSENSE_NO_EXT"):
        return []
    extensions = [
        Extension(
            "coopsense._kernels",
            ["src/coopsense/_kernels.pyx"],
            include_dirs=[np.get_include()],
            # no -ffast-math: results must match the numpy path bit for bit
            extra_compile_args=["-O3"],
            define_macros=[("NPY_NO_DEPRECATED_API", "NPY_1_7_API_VERSION")],
        )
    ]
    return cythonize(
        extensions,
        compiler_directives={
            "language_level": "3",
            "boundscheck": False,
            "wraparound": False,
            "cdivision": True,
        },
    )


setup(ext_modules=get_extensions())
