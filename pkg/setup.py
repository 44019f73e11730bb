import os

from setuptools import setup

ext_modules = []
if os.environ.get("FLOWTUNE_NO_EXT") != "1":
    try:
        import numpy as np
        from Cython.Build import cythonize
        from setuptools import Extension
    except ImportError:  # no toolchain: the pure-Python kernels are used
        pass
    else:
        ext_modules = cythonize(
            [
                Extension(
                    "flowtune._ckernels",
                    ["src/flowtune/_ckernels.pyx"],
                    include_dirs=[np.get_include()],
                    extra_compile_args=["-O3"],
                    define_macros=[("NPY_NO_DEPRECATED_API", "NPY_1_7_API_VERSION")],
                )
            ],
            compiler_directives={"language_level": "3"},
        )

setup(ext_modules=ext_modules)
