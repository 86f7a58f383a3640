"""Build hook for the optional compiled geometry kernels.

The package works without them: ``pueva.kernels`` falls back to the
numpy implementations when ``_ckernels`` cannot be imported. Set
``PUEVA_NO_EXT=1`` to skip compilation entirely.
"""

import os

from setuptools import Extension, setup

ext_modules = []
if not os.environ.get("PUEVA_NO_EXT"):
    try:
        import numpy as np
        from Cython.Build import cythonize
    except ImportError:
        pass
    else:
        ext_modules = cythonize(
            [
                Extension(
                    "pueva.kernels._ckernels",
                    ["src/pueva/kernels/_ckernels.pyx"],
                    include_dirs=[np.get_include()],
                    define_macros=[("NPY_NO_DEPRECATED_API", "NPY_1_7_API_VERSION")],
                    # no FMA contraction: results must match the numpy fallback bit for bit
                    extra_compile_args=["-O3", "-ffp-contract=off"],
                )
            ],
            compiler_directives={"language_level": "3"},
        )

setup(ext_modules=ext_modules)
