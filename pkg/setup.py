import numpy as np
from setuptools import Extension, setup

try:
    from Cython.Build import cythonize
except ImportError:
    cythonize = None

# The compiled kernels are optional: hyperlabel._kernels falls back to the
# pure-numpy implementations when the extension is absent.
extensions = []
if cythonize is not None:
    extensions = cythonize(
        [
            Extension(
                "hyperlabel._kernels._native",
                ["src/hyperlabel/_kernels/_native.pyx"],
                include_dirs=[np.get_include()],
                define_macros=[("NPY_NO_DEPRECATED_API", "NPY_1_7_API_VERSION")],
                extra_compile_args=["-O3"],
            )
        ],
        compiler_directives={"language_level": "3"},
    )

setup(ext_modules=extensions)
