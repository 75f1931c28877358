"""Builds the tiny_engram extension module by delegating to cargo."""

import shutil
import subprocess
from pathlib import Path

from setuptools import Extension, setup
from setuptools.command.build_ext import build_ext

ROOT = Path(__file__).resolve().parent


class CargoExtension(Extension):
    def __init__(self, name):
        super().__init__(name, sources=[])


class CargoBuildExt(build_ext):
    def build_extension(self, ext):
        subprocess.check_call(
            [
                "cargo",
                "build",
                "--release",
                "-p",
                "engram-py",
                "--features",
                "extension-module",
            ],
            cwd=ROOT,
        )
        release = ROOT / "target" / "release"
        built = next(
            p
            for p in (release / f"libtiny_engram{s}" for s in (".so", ".dylib"))
            if p.exists()
        )
        out = Path(self.get_ext_fullpath(ext.name))
        out.parent.mkdir(parents=True, exist_ok=True)
        shutil.copyfile(built, out)


setup(
    ext_modules=[CargoExtension("tiny_engram")],
    cmdclass={"build_ext": CargoBuildExt},
)
