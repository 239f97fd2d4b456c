import os

from setuptools import Extension, setup

ext_modules = []
if not os.environ.get("CHANEST_SKIP_EXT"):
    from Cython.Build import cythonize

    ext_modules = cythonize(
        [Extension("chanest._scan_kernel", ["src/chanest/_scan_kernel.pyx"])],
        language_level=3,
    )

setup(ext_modules=ext_modules)
