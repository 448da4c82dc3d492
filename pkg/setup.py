from setuptools import setup, find_packages

setup(
    name='isaclab',
    version='0.1',
    packages=find_packages(exclude=["test"]),
    package_data={"isaclab": ["knowledge/*.txt"]},
    install_requires=["numpy", "torch", "httpx", "pyyaml"],
    extras_require={"test": ["pytest"]},
    entry_points={"console_scripts": ["isaclab = isaclab.harness:main"]},
)
