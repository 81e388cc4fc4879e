"""Setup script for ProbAdapt."""
from setuptools import setup, find_packages
from pathlib import Path

# Read README for long description
readme = Path(__file__).parent / "README.md"
long_description = readme.read_text(encoding="utf-8") if readme.exists() else ""

setup(
    name="probadapt",
    version="0.1.0",
    description="Probabilistic domain adaptation for segmentation: PUNet self-training with consensus-filtered pseudo-labels.",
    long_description=long_description,
    long_description_content_type="text/markdown",
    license="CC0-1.0",
    packages=find_packages(exclude=["tests"]),
    python_requires=">=3.9",
    install_requires=[
        "click>=8.0.0",
        "pyyaml>=6.0",
        "numpy>=1.22",
        "scipy>=1.8",
        "pillow>=9.2",
        "torch>=2.0",
        "tqdm>=4.60",
    ],
    extras_require={
        "dev": ["pytest", "hypothesis"],
        "tensorboard": ["tensorboardX>=2.5"],
        "plots": ["matplotlib>=3.5"],
        "all": [
            "tensorboardX>=2.5",
            "matplotlib>=3.5",
        ],
    },
    entry_points={
        "console_scripts": [
            "probadapt=probadapt.cli:main",
        ],
    },
    keywords=[
        "segmentation", "domain-adaptation", "self-training", "pseudo-labels",
        "mean-teacher", "fixmatch", "probabilistic-unet", "pytorch",
    ],
    classifiers=[
        "Development Status :: 3 - Alpha",
        "Intended Audience :: Science/Research",
        "License :: CC0 1.0 Universal (CC0 1.0) Public Domain Dedication",
        "Operating System :: OS Independent",
        "Programming Language :: Python :: 3",
        "Programming Language :: Python :: 3.9",
        "Programming Language :: Python :: 3.10",
        "Programming Language :: Python :: 3.11",
        "Programming Language :: Python :: 3.12",
        "Topic :: Scientific/Engineering :: Image Recognition",
    ],
)
