import numpy as np
from Cython.Build import cythonize
from setuptools import Extension, setup

extensions = [
    Extension(
        f"ldcontrol.kernels.{name}",
        [f"src/ldcontrol/kernels/{name}.pyx"],
        include_dirs=[np.get_include()],
        # no fused multiply-add: the fallback must reproduce results bit for bit
        extra_compile_args=["-O3", "-ffp-contract=off"],
        define_macros=[("NPY_NO_DEPRECATED_API", "NPY_1_7_API_VERSION")],
    )
    for name in ("_sor", "_em")
]

setup(
    ext_modules=cythonize(extensions, compiler_directives={"language_level": "3"}),
)
