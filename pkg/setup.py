"""Build script for the optional compiled dispatch kernel.

The package is fully functional without the extension: flexcoord.qp falls
back to the pure NumPy kernel when the compiled module is missing.
"""

import os

import numpy
from setuptools import Extension, setup

try:
    from Cython.Build import cythonize
except ImportError:
    cythonize = None

extensions = []
if cythonize is not None and os.path.exists("src/flexcoord/qp/_kernel_cy.pyx"):
    extensions = cythonize(
        [
            Extension(
                "flexcoord.qp._kernel_cy",
                ["src/flexcoord/qp/_kernel_cy.pyx"],
                include_dirs=[numpy.get_include()],
                extra_compile_args=["-O3"],
            )
        ],
        compiler_directives={
            "language_level": "3",
            "boundscheck": False,
            "wraparound": False,
            "cdivision": True,
            "initializedcheck": False,
        },
    )

setup(ext_modules=extensions)
