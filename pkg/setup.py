import os

from setuptools import setup

ext_modules = []
if not os.environ.get("SSIMADV_NO_EXT"):
    try:
        import numpy as np
        from Cython.Build import cythonize
        from setuptools import Extension
    except ImportError:  # pure-Python install; kernels fall back to numpy
        pass
    else:
        ext_modules = cythonize(
            [
                Extension(
                    "ssimadv._ckernels",
                    ["src/ssimadv/_ckernels.pyx"],
                    include_dirs=[np.get_include()],
                    extra_compile_args=["-O3"],
                )
            ],
            compiler_directives={
                "language_level": "3",
                "boundscheck": False,
                "wraparound": False,
                "cdivision": True,
            },
        )

setup(ext_modules=ext_modules)
