import setuptools

TEST_PACKAGES = ("pytest", "pytest-unordered", "iniconfig", "pluggy", "packaging")

with open('requirements.txt') as f:
    requirements = [line.strip() for line in f if line.strip() and not line.startswith('#')]

# Test tooling goes to the "test" extra, everything else is a runtime dependency
required = [line for line in requirements if line.split('==')[0] not in TEST_PACKAGES]
testing = [line for line in requirements if line.split('==')[0] in TEST_PACKAGES]

setuptools.setup(
    name="routebench",                      # This is the name of the package
    version="0.1.0",                        # The initial release version
    description="Style-controlled adversarial route generation for testing driving planners",
    long_description="Synthetic interaction data, RouteGAN training and collision-rate evaluation of "
                     "Data, IDM and A* planners",
    long_description_content_type="text/markdown",
    packages=setuptools.find_packages(exclude=["tests"]),    # routebench and logger
    classifiers=[
        "Programming Language :: Python :: 3",
        "Operating System :: OS Independent",
    ],
    python_requires='>=3.9',
    install_requires=required,
    extras_require={"test": testing},
    entry_points={"console_scripts": ["routebench=routebench.cli:main"]},
)
