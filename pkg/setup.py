import numpy
from setuptools import Extension, setup

try:
    from Cython.Build import cythonize

    ext_modules = cythonize(
        [
            Extension(
                "groundseg._kernels_cy",
                ["src/groundseg/_kernels_cy.pyx"],
                include_dirs=[numpy.get_include()],
                extra_compile_args=["-O3"],
            )
        ],
        language_level="3",
    )
except ImportError:
    # Pure-python install still works; groundseg.kernels falls back to numpy.
    ext_modules = []

setup(ext_modules=ext_modules)
