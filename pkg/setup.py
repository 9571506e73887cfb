import numpy as np
from setuptools import Extension, setup
from Cython.Build import cythonize

ext = Extension(
    "sdcouple._pruning",
    ["src/sdcouple/_pruning.pyx"],
    include_dirs=[np.get_include()],
    define_macros=[("NPY_NO_DEPRECATED_API", "NPY_1_7_API_VERSION")],
)

setup(
    name="sdcouple",
    version="0.1.0",
    package_dir={"": "src"},
    packages=["sdcouple"],
    install_requires=["numpy>=1.24", "scipy>=1.10"],
    entry_points={"console_scripts": ["sdcouple = sdcouple.cli:main"]},
    ext_modules=cythonize([ext], language_level=3),
)
