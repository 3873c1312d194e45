"""Builds the pybind11 extension through the project's CMake tree."""

import os
import subprocess
import sys
from pathlib import Path

from setuptools import Extension, setup
from setuptools.command.build_ext import build_ext


class CMakeExtension(Extension):
    def __init__(self, name):
        super().__init__(name, sources=[])


class CMakeBuild(build_ext):
    def build_extension(self, ext):
        ext_path = Path(self.get_ext_fullpath(ext.name)).resolve()
        package_dir = ext_path.parent
        package_dir.mkdir(parents=True, exist_ok=True)
        source_dir = Path(__file__).parent.resolve()
        build_dir = Path(self.build_temp).resolve() / "cmake"
        build_dir.mkdir(parents=True, exist_ok=True)

        cmake_args = [
            f"-DCMAKE_BUILD_TYPE={os.environ.get('LINATTN_BUILD_TYPE', 'Release')}",
            "-DLINATTN_PYTHON=ON",
            "-DLINATTN_BUILD_TESTS=OFF",
            "-DLINATTN_BUILD_CLI=OFF",
            f"-DPYTHON_EXECUTABLE={sys.executable}",
        ]
        subprocess.run(
            ["cmake", "-S", str(source_dir), "-B", str(build_dir), *cmake_args],
            check=True,
        )
        subprocess.run(
            ["cmake", "--build", str(build_dir), "--target", "_core",
             f"-j{os.cpu_count() or 2}"],
            check=True,
        )

        staged = build_dir / "python" / "linattn"
        built = sorted(staged.glob("_core*.so")) + sorted(
            staged.glob("_core*.pyd"))
        if not built:
            raise RuntimeError(f"no built extension found under {staged}")
        self.copy_file(str(built[0]), str(ext_path))


setup(
    ext_modules=[CMakeExtension("linattn._core")],
    cmdclass={"build_ext": CMakeBuild},
)
