"""Builds the optional Cython kernel module.

The package works without it: ``hrcpose.kernels`` falls back to the numpy
implementation when ``hrcpose._kernels`` cannot be imported.
"""
from setuptools import Extension, setup

try:
    import numpy as np
    from Cython.Build import cythonize
except ImportError:  # no build toolchain, pure-Python install
    ext_modules = []
else:
    ext_modules = cythonize(
        [
            Extension(
                "hrcpose._kernels",
                ["src/hrcpose/_kernels.pyx"],
                include_dirs=[np.get_include()],
                define_macros=[("NPY_NO_DEPRECATED_API", "NPY_1_7_API_VERSION")],
                optional=True,
            )
        ],
        compiler_directives={"language_level": "3"},
    )

setup(ext_modules=ext_modules)
