#!/usr/bin/env python
from setuptools import setup, find_packages

setup(
    name="xyz-scgan",
    version="0.1.0",
    author="szuprefix",
    author_email="szuprefix@126.com",
    description="self-calibrated convolution GAN for single image super-resolution, numpy only",
    long_description=open("README.rst").read(),
    license="MIT",
    url="https://github.com/szuprefix/py-xyz-scgan",
    packages=find_packages(exclude=['tests.*', 'tests', 'example.*', 'example']),
    include_package_data=True,
    python_requires=">=3.9",
    install_requires=[
        "numpy>=1.20",
        "scipy>=1.6",
        "Pillow>=8.0",
    ],
    extras_require={
        "tests": ["pytest>=6.0"],
    },
    entry_points={
        "console_scripts": ["xyz-scgan=xyz_scgan.cli:main"],
    },
    classifiers=[
        "Intended Audience :: Developers",
        "Intended Audience :: Science/Research",
        "Operating System :: OS Independent",
        "Topic :: Scientific/Engineering :: Image Processing",
        "Topic :: Scientific/Engineering :: Artificial Intelligence",
        "Programming Language :: Python",
        "Programming Language :: Python :: 3",
        "Programming Language :: Python :: 3.9",
        "Programming Language :: Python :: 3.10",
        "Programming Language :: Python :: 3.11",
    ],
)
