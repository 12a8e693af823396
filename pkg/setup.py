import numpy as np
from setuptools import Extension, setup

try:
    from Cython.Build import cythonize
except ImportError:
    cythonize = None

# The compiled kernels are optional: the package falls back to the NumPy
# implementations at import time when the extension is absent.
ext_modules = []
if cythonize is not None:
    ext_modules = cythonize(
        [
            Extension(
                "petrecon.numeric._kernels_cy",
                ["src/petrecon/numeric/_kernels_cy.pyx"],
                include_dirs=[np.get_include()],
                extra_compile_args=["-O3"],
                define_macros=[("NPY_NO_DEPRECATED_API", "NPY_1_7_API_VERSION")],
            )
        ],
        compiler_directives={"language_level": "3"},
    )

setup(ext_modules=ext_modules)
