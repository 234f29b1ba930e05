"""Build hook for the optional compiled convolution kernels.

The package is pure Python plus one Cython extension holding the hot 3D
convolution loops. If Cython or a C compiler is unavailable the build still
succeeds and the numpy fallback in ctb.net.kernels is used at runtime.
"""

from setuptools import Extension, setup

ext_modules = []
try:
    import numpy
    from Cython.Build import cythonize

    ext_modules = cythonize(
        [
            Extension(
                "ctb.net._convkern",
                ["src/ctb/net/_convkern.pyx"],
                include_dirs=[numpy.get_include()],
                extra_compile_args=["-O3"],
                define_macros=[("NPY_NO_DEPRECATED_API", "NPY_1_7_API_VERSION")],
            )
        ],
        language_level=3,
    )
except Exception as exc:  # pragma: no cover - depends on build host
    print(f"building without compiled kernels: {exc}")

setup(ext_modules=ext_modules)
