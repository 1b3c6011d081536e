from setuptools import find_packages, setup

setup(
    name="polar_pfcd",
    packages=find_packages(exclude=["test", "test.*"]),
    install_requires=[
        "numpy>=1.22",
        "scipy>=1.7",
        "opencv-python-headless>=4.5",
        "pandas>=1.3",
        "pyyaml>=5.4.1",
        "prefect>=0.14.13,<2",
        "dask>=2021.3.0",
        "dacite==1.6.0",
        "click>=7.0",
        "fsspec>=0.9.0",
        "s3fs>=0.6.0",
        "adlfs>=0.7.5",
    ],
    extras_require={
        "dev": ["flake8", "black", "pre-commit", "pre-commit-hooks", "isort", "pytest"],
        "test": ["flake8", "pytest"],
    },
    entry_points={"console_scripts": ["polar-pfcd=polar_pfcd.cli:main"]},
)
