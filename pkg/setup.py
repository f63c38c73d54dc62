"""Builds the optional Cython kernels; the package falls back to numpy without them."""

import numpy as np
from setuptools import Extension, setup

try:
    from Cython.Build import cythonize
except ImportError:
    ext_modules = []
else:
    ext_modules = cythonize(
        [Extension("milkt._ext.ckernels", ["src/milkt/_ext/ckernels.pyx"],
                   include_dirs=[np.get_include()], extra_compile_args=["-O3", "-march=native", "-ffp-contract=off"])],
        compiler_directives={"language_level": "3"},
    )

setup(ext_modules=ext_modules)
