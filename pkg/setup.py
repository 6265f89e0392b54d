from setuptools import Extension, setup

try:
    from Cython.Build import cythonize
except ImportError:
    # The package still works without the compiled kernels; ops.py falls
    # back to the numpy implementations at import time.
    ext_modules = []
else:
    ext_modules = cythonize(
        [
            Extension(
                "sketchgen._kernels",
                ["src/sketchgen/_kernels.pyx"],
                extra_compile_args=["-O3"],
            )
        ],
        compiler_directives={"language_level": "3"},
    )

setup(ext_modules=ext_modules)
