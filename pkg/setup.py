# Root build shim: the package sources live in python-slamkit/ (see python-slamkit/setup.py).
from setuptools import setup, find_packages

requirements = ["numpy>=1.19", "scipy>=1.5", "matplotlib>=3.3"]
test_requirements = ["pytest>=6.2", "hypothesis>=5.43"]

setup(
    name="slamkit",
    package_dir={"": "python-slamkit"},
    packages=find_packages(where="python-slamkit", exclude=["test*", "test"]),
    version="0.1.0",
    description="Multi-camera visual-inertial SLAM toolkit on simulated data",
    license="MIT",
    install_requires=requirements,
    extras_require={"test": test_requirements},
)
