import os
from setuptools import setup

TEST_DEPENDENCIES = [
    "black==23.7.0",
    "flake8==3.7.9",
    "pytest==7.4.0",
    "pytest-cov==4.1.0",
]

with open(os.path.join(os.path.abspath(os.path.dirname(__file__)), "README.md"), encoding="utf-8") as f:
    LONG_DESCRIPTION = f.read()

setup(
    name="privmech",
    description="Privacy-aware truthful mechanisms with exact and Monte Carlo audits of their guarantees",
    long_description=LONG_DESCRIPTION,
    long_description_content_type="text/markdown",
    version="1.0.0",
    packages=["privmech"],
    classifiers=[
        "Operating System :: OS Independent",
        "Programming Language :: Python",
        "Topic :: Scientific/Engineering :: Mathematics",
    ],
    python_requires=">=3.9",
    install_requires=["packaging==23.1", "numpy>=1.22", "scipy>=1.8", "jsonschema>=4.0"],
    tests_require=TEST_DEPENDENCIES,
    extras_require={"test": TEST_DEPENDENCIES},
    entry_points={"console_scripts": ["privmech = privmech.cli:main"]},
)
