from setuptools import setup, find_packages

requirements = ["numpy>=1.19", "scipy>=1.5", "matplotlib>=3.3"]
test_requirements = ["pytest>=6.2", "hypothesis>=5.43"]

setup(
    name="slamkit",
    packages=find_packages(exclude=["test*", "test"]),
    version="0.1.0",
    description="Multi-camera visual-inertial SLAM toolkit on simulated data",
    license="MIT",
    keywords=["SLAM", "VIO", "pose graph", "TSDF", "robotics"],
    install_requires=requirements,
    extras_require={"test": test_requirements},
    classifiers=[
        "Development Status :: 3 - Alpha",
        "Intended Audience :: Science/Research",
        "Topic :: Scientific/Engineering",
        "License :: OSI Approved :: MIT License",
        "Programming Language :: Python :: 3",
        "Programming Language :: Python :: 3.7",
        "Programming Language :: Python :: 3.8",
    ],
)
