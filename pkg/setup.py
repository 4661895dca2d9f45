"""Build script: compiles the optional stepping kernel.

The package is fully functional without the extension (a numpy fallback is
selected at import); any failure below therefore downgrades to a pure-Python
build instead of aborting the install.
"""

from setuptools import setup

ext_modules = []
try:
    import numpy
    from Cython.Build import cythonize
    from setuptools.extension import Extension

    ext_modules = cythonize(
        [
            Extension(
                "mflq._stepcore",
                ["src/mflq/_stepcore.pyx"],
                include_dirs=[numpy.get_include()],
                define_macros=[("NPY_NO_DEPRECATED_API", "NPY_1_7_API_VERSION")],
                extra_compile_args=["-O3"],
            )
        ],
        language_level=3,
    )
except Exception as exc:  # noqa: BLE001 - any build-chain problem means "no extension"
    import sys

    print("mflq: building without the compiled stepping kernel (%s)" % exc, file=sys.stderr)
    ext_modules = []

setup(ext_modules=ext_modules)
