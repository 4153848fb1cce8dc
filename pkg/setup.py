import numpy as np
from Cython.Build import cythonize
from setuptools import Extension, setup

# no -march=native / -ffast-math: the compiled kernels must reproduce the
# pure-Python fallback bit for bit
ext = Extension(
    "kinlab._kernels._core",
    ["src/kinlab/_kernels/_core.pyx"],
    include_dirs=[np.get_include()],
    extra_compile_args=["-O3", "-ffp-contract=off"],
    define_macros=[("NPY_NO_DEPRECATED_API", "NPY_1_7_API_VERSION")],
    optional=True,
)

setup(ext_modules=cythonize([ext], compiler_directives={"language_level": "3"}))
