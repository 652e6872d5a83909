"""Build hook for the optional compiled network-simplex kernel.

Without Cython (or a C compiler) the package still installs and falls back
to ``srot._simplex_py`` at import time.
"""
from setuptools import Extension, setup

try:
    from Cython.Build import cythonize
except ImportError:
    ext_modules = []
else:
    ext_modules = cythonize(
        [Extension("srot._simplex", ["src/srot/_simplex.pyx"], extra_compile_args=["-O3"])],
        compiler_directives={"language_level": "3"},
    )

setup(ext_modules=ext_modules)
