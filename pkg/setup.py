import numpy
from setuptools import Extension, setup

try:
    from Cython.Build import cythonize

    ext_modules = cythonize(
        [
            Extension(
                "metafew._kernels",
                sources=["src/metafew/_kernels.pyx"],
                include_dirs=[numpy.get_include()],
                define_macros=[("NPY_NO_DEPRECATED_API", "NPY_1_7_API_VERSION")],
                extra_compile_args=["-O3"],
            )
        ]
    )
except ImportError:
    # Package stays installable without Cython; the numpy fallback kernels
    # are selected at import.
    ext_modules = []

setup(ext_modules=ext_modules)
