import os

from setuptools import setup

ext_modules = []
if os.environ.get("FEATFED_NO_EXT", "") == "":
    try:
        import numpy as np
        from Cython.Build import cythonize
        from setuptools import Extension
    except ImportError:
        pass
    else:
        ext_modules = cythonize(
            [
                Extension(
                    "featfed.kernels._ckernels",
                    ["src/featfed/kernels/_ckernels.pyx"],
                    include_dirs=[np.get_include()],
                    # keep rounding identical to the numpy fallback
                    extra_compile_args=["-O3", "-ffp-contract=off"],
                    define_macros=[("NPY_NO_DEPRECATED_API", "NPY_1_7_API_VERSION")],
                )
            ],
            compiler_directives={"language_level": "3"},
        )

setup(ext_modules=ext_modules)
