"""Build script for the optional compiled kernel extension.

The package is fully functional without the extension: panovqa.kernels
falls back to the vectorized numpy implementation at import time. The
extension only accelerates the per-pixel render kernels (flow-field
construction and bilinear resampling with their backward passes).
"""

from setuptools import Extension, setup

try:
    from Cython.Build import cythonize
except ImportError:
    cythonize = None

ext_modules = []
if cythonize is not None:
    import numpy as np

    ext = Extension(
        "panovqa.kernels._core",
        ["src/panovqa/kernels/_core.pyx"],
        include_dirs=[np.get_include()],
        extra_compile_args=["-O3"],
        define_macros=[("NPY_NO_DEPRECATED_API", "NPY_1_7_API_VERSION")],
    )
    ext.optional = True  # numpy fallback covers a failed build
    ext_modules = cythonize([ext], compiler_directives={"language_level": "3"})

setup(ext_modules=ext_modules)
