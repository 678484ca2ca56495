import setuptools

with open("README.md", "r") as f:
    long_description = f.read()

setuptools.setup(
    name="ddlscheme",
    version="0.1.0",
    description="L-scheme domain decomposition for two-phase flow in layered porous media",
    long_description=long_description,
    long_description_content_type="text/markdown",
    license="MIT",
    keywords=["POROUS MEDIA", "TWO-PHASE FLOW", "DOMAIN DECOMPOSITION", "FINITE ELEMENTS"],
    install_requires=["numpy", "scipy>=1.12", "vtk>=9.1", "python-dotenv"],
    packages=["ddlscheme"],
    python_requires=">=3.9",
    entry_points={"console_scripts": ["ddlscheme=ddlscheme.cli:main"]},
    classifiers=[
        "Development Status :: 3 - Alpha",
        "Intended Audience :: Science/Research",
        "Topic :: Scientific/Engineering :: Mathematics",
        "License :: OSI Approved :: MIT License",
        "Programming Language :: Python :: 3",
        "Programming Language :: Python :: 3.9",
        "Programming Language :: Python :: 3.10",
        "Programming Language :: Python :: 3.11",
        "Programming Language :: Python :: 3.12",
        "Programming Language :: Python :: 3.13",
    ],
)
