# Builds the optional compiled convolution kernels.
# The package works without them (pure-numpy fallback selected at import):
#     python setup.py build_ext --inplace
import numpy
from setuptools import Extension, setup

try:
    from Cython.Build import cythonize

    ext_modules = cythonize(
        [
            Extension(
                "tilechange.nn._convkern",
                ["src/tilechange/nn/_convkern.pyx"],
                include_dirs=[numpy.get_include()],
                extra_compile_args=["-O3"],
            )
        ],
        compiler_directives={"language_level": "3"},
    )
except ImportError:
    ext_modules = []

setup(ext_modules=ext_modules)
