#!/usr/bin/env python
"""
Setup configuration for the hpa-moec package.
"""
import os

from setuptools import find_packages, setup


# Read the README file
def read_file(filename):
    with open(os.path.join(os.path.dirname(__file__), filename), encoding="utf-8") as f:
        return f.read()


setup(
    name="hpa-moec",
    use_scm_version={"write_to": "hpa_moec/_version.py", "fallback_version": "0.1.0"},
    setup_requires=["setuptools_scm"],
    description="Hybrid parameterized actions with multi-objective ensemble critics for highway driving",
    long_description=read_file("README.md"),
    long_description_content_type="text/markdown",
    packages=find_packages(include=["hpa_moec", "hpa_moec.*"]),
    package_data={"hpa_moec": ["conf/*.cfg"]},
    include_package_data=True,
    zip_safe=False,
    install_requires=[
        "numpy>=1.21",
        "pandas>=1.3",
        "python-decouple>=3.4",
    ],
    extras_require={
        "dev": [
            "pytest>=6.0.0",
            "pytest-cov>=2.0.0",
            "black>=21.0.0",
            "flake8>=3.8.0",
            "isort>=5.0.0",
            "mypy>=0.910",
            "bandit>=1.7.0",
        ],
    },
    entry_points={"console_scripts": ["hpa-moec = hpa_moec.cli:main"]},
    classifiers=[
        "Development Status :: 3 - Alpha",
        "Intended Audience :: Science/Research",
        "License :: OSI Approved :: MIT License",
        "Operating System :: OS Independent",
        "Programming Language :: Python :: 3",
        "Topic :: Scientific/Engineering :: Artificial Intelligence",
    ],
    python_requires=">=3.8",
    keywords="reinforcement-learning autonomous-driving ensemble highway highd",
)
