"""Build script for the compiled particle kernels.

The package works without the extension (a numpy fallback is selected at
import time), so failures here should be loud but are not fatal to users
who install with FDNS_PURE_PYTHON=1.
"""

import numpy as np
from Cython.Build import cythonize
from setuptools import Extension, setup

# -ffp-contract=off: the fallback backend must produce byte-identical
# trajectories, so fused multiply-adds are disabled. No -ffast-math for the
# same reason.
extensions = [
    Extension(
        "fdns._kernels._flowkern",
        ["src/fdns/_kernels/_flowkern.pyx"],
        include_dirs=[np.get_include()],
        extra_compile_args=["-O3", "-ffp-contract=off"],
        define_macros=[("NPY_NO_DEPRECATED_API", "NPY_1_7_API_VERSION")],
    )
]

setup(
    ext_modules=cythonize(
        extensions,
        compiler_directives={
            "language_level": "3",
            "boundscheck": False,
            "wraparound": False,
            "cdivision": True,
        },
    )
)
