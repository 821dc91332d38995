from setuptools import setup

with open("README.md", "r", encoding="utf-8") as fh:
    long_description = fh.read()

with open("requirements.txt", "r", encoding="utf-8") as fh:
    requirements = [line.strip() for line in fh if line.strip() and not line.startswith("#")]

setup(
    name="monotone-guard",
    version="1.0.0",
    author="Monotone Guard Team",
    description="Non-negative weight constraints for evasion-resistant malware classifiers",
    long_description=long_description,
    long_description_content_type="text/markdown",
    py_modules=[
        "attack",
        "config",
        "constraints",
        "dataset",
        "errors",
        "evaluation",
        "experiment",
        "main",
        "network",
        "training",
    ],
    classifiers=[
        "Development Status :: 4 - Beta",
        "Intended Audience :: Science/Research",
        "License :: OSI Approved :: MIT License",
        "Operating System :: OS Independent",
        "Programming Language :: Python :: 3",
        "Programming Language :: Python :: 3.8",
        "Programming Language :: Python :: 3.9",
        "Programming Language :: Python :: 3.10",
        "Programming Language :: Python :: 3.11",
        "Topic :: Scientific/Engineering :: Artificial Intelligence",
        "Topic :: Security",
    ],
    python_requires=">=3.8",
    install_requires=requirements,
    extras_require={
        "dev": ["pytest>=7.0"],
    },
    entry_points={
        "console_scripts": [
            "monotone-guard=main:main",
        ],
    },
    keywords="malware, adversarial examples, neural network, monotonic, robustness",
)
