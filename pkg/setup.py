"""Builds the optional Cython alignment kernel.

The package works without it (a numpy fallback is selected at import);
compiling just makes monotonic alignment search much faster during training.
"""

import numpy
from setuptools import Extension, setup

try:
    from Cython.Build import cythonize

    extensions = cythonize(
        [
            Extension(
                "speechmotion.align._mas_core",
                ["src/speechmotion/align/_mas_core.pyx"],
                include_dirs=[numpy.get_include()],
                define_macros=[("NPY_NO_DEPRECATED_API", "NPY_1_7_API_VERSION")],
            )
        ],
        compiler_directives={"language_level": "3"},
    )
except ImportError:
    extensions = []

setup(ext_modules=extensions)
