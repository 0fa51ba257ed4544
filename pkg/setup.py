"""Builds the optional compiled range-coder kernel.

The package falls back to the pure-Python kernel when the extension is not
built, so a missing compiler or Cython only costs speed.
"""
import os

from setuptools import setup

ext_modules = []
if not os.environ.get("VRLAB_NO_EXT"):
    try:
        import numpy as np
        from Cython.Build import cythonize
        from setuptools import Extension

        ext_modules = cythonize(
            [Extension("vrlab.entropy._rc_ext", ["src/vrlab/entropy/_rc_ext.pyx"],
                       include_dirs=[np.get_include()], extra_compile_args=["-O3"])],
            compiler_directives={"language_level": "3"},
        )
    except ImportError:
        ext_modules = []

setup(ext_modules=ext_modules)
