from setuptools import setup


def readme():
    with open("README.md") as f:
        return f.read()


MAJOR, MINOR, MICRO = 0, 1, 0
__VERSION__ = "{}.{}.{}".format(MAJOR, MINOR, MICRO)

setup(
    name="smart-bird",
    version=__VERSION__,
    description=(
        "Learnable sparse attention for long-sequence classification: a tiny sketch Transformer "
        "chooses which token pairs a full-width multi-head model attends to."
    ),
    long_description_content_type="text/markdown",
    long_description=readme(),
    keywords="sparse attention transformer long sequence text classification sampling",
    license="MIT",
    packages=["smart_bird"],
    python_requires=">=3.9",
    install_requires=[
        "click",
        "PyYAML",
        "tqdm",
        "numpy>=1.25",
        "scipy",
        "scikit-learn",
        "pandas>=1.5",
    ],
    extras_require={
        "lint": ["flake8==4.0.1", "black==22.3.0", "isort==5.10.1"],
        "test": ["pytest>=6.2.5", "pytest-mock>=3.4.0"],
        "docs": ["sphinx", "sphinx_rtd_theme"],
    },
    include_package_data=True,
    zip_safe=False,
    entry_points=dict(console_scripts=["smart-bird=smart_bird.cli:cli"]),
    classifiers=[
        "Programming Language :: Python :: 3",
        "Programming Language :: Python :: 3.9",
        "Programming Language :: Python :: 3.10",
        "Programming Language :: Python :: 3.11",
        "Programming Language :: Python :: 3.12",
        "License :: OSI Approved :: MIT License",
        "Operating System :: OS Independent",
        "Intended Audience :: Science/Research",
        "Topic :: Scientific/Engineering :: Artificial Intelligence",
        "Topic :: Text Processing :: Linguistic",
    ],
)
