"""Build hook for the optional compiled kernels.

The package works without the extension (``egomem.kernels`` falls back to a
pure-Python implementation), so a failed compile is reported and skipped.
"""
import os
import sys

from setuptools import setup
from setuptools.command.build_ext import build_ext


class OptionalBuildExt(build_ext):
    def run(self):
        try:
            super().run()
        except Exception as exc:  # pragma: no cover - toolchain dependent
            print(f"warning: compiled kernels not built ({exc}); using pure-Python fallback", file=sys.stderr)

    def build_extension(self, ext):
        try:
            super().build_extension(ext)
        except Exception as exc:  # pragma: no cover - toolchain dependent
            print(f"warning: failed to build {ext.name} ({exc})", file=sys.stderr)


def extensions():
    if os.environ.get("EGOMEM_NO_EXT"):
        return []
    try:
        import numpy as np
        from Cython.Build import cythonize
    except ImportError:
        return []
    from setuptools import Extension

    ext = Extension(
        "egomem._kernels",
        ["src/egomem/_kernels.pyx"],
        include_dirs=[np.get_include()],
        # results must match the Python fallback bit for bit: no fast-math, no fp contraction, and
        # no fusing sin/cos into sincos (glibc's sincos can differ from sin and cos in the last bit)
        extra_compile_args=["-O2", "-ffp-contract=off", "-fno-builtin-sin", "-fno-builtin-cos"],
    )
    return cythonize([ext], compiler_directives={"language_level": "3"})


setup(ext_modules=extensions(), cmdclass={"build_ext": OptionalBuildExt})
