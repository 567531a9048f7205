import os

import numpy as np
from setuptools import Extension, setup

try:
    from Cython.Build import cythonize
except ImportError:  # pure-Python install; the numpy kernels take over
    cythonize = None

ext_modules = []
if cythonize is not None and os.environ.get("STRATCAUSAL_NO_EXT") != "1":
    ext_modules = cythonize(
        [
            Extension(
                "stratcausal._tree_ext",
                [os.path.join("src", "stratcausal", "_tree_ext.pyx")],
                include_dirs=[np.get_include()],
                extra_compile_args=["-O3", "-ffp-contract=off"],
                language="c++",
            )
        ],
        compiler_directives={"language_level": "3"},
    )

setup(ext_modules=ext_modules)
