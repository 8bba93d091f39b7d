from setuptools import Extension, setup

import numpy as np
from Cython.Build import cythonize

# -ffp-contract=off keeps the compiled kernels bit-identical to the
# pure-NumPy fallback (no FMA contraction of a*b + c).
extensions = [
    Extension(
        "speckle_forge._speckle_kernels",
        ["src/speckle_forge/_speckle_kernels.pyx"],
        include_dirs=[np.get_include()],
        define_macros=[("NPY_NO_DEPRECATED_API", "NPY_1_7_API_VERSION")],
        extra_compile_args=["-O3", "-ffp-contract=off"],
    )
]

setup(ext_modules=cythonize(extensions, compiler_directives={"language_level": "3"}))
