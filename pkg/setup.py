"""Build the optional Cython kernel module.

If Cython or a C compiler is missing the package still installs and
``admf._core`` falls back to the NumPy implementations.
"""
import os

from setuptools import setup

ext_modules = []
if os.environ.get("ADMF_NO_EXT") != "1":
    try:
        from Cython.Build import cythonize
        from setuptools.extension import Extension

        ext_modules = cythonize(
            [Extension("admf._kernels", ["src/admf/_kernels.pyx"],
                       extra_compile_args=["-O3"])],
            compiler_directives={"language_level": 3},
        )
    except ImportError:
        ext_modules = []

setup(ext_modules=ext_modules)
