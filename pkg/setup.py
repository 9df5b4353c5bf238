from setuptools import setup, find_packages

setup(
    name="lfc_attack_analytics",
    version="0.1.0",
    packages=find_packages(exclude=["tests", "tests.*"]),
    py_modules=["lfc_analytics", "wrapper", "experiment_session", "report", "save_load", "errors"],
    include_package_data=True,
    package_data={
        "grid_model": ["cases/*.json"],
        "utils": ["settings.json"],
    },
    install_requires=[
        "numpy>=1.20",
        "scipy>=1.10",
        "scikit-learn>=1.0",
        "pandas>=1.5",
    ],
    extras_require={
        "test": ["pytest>=7"],
    },
    entry_points={
        "console_scripts": [
            "lfc-analytics=lfc_analytics:main",
        ],
    },
    description="Stealthy false-data-injection attack analytics for smart-grid load frequency control",
    long_description=open("README.md").read(),
    long_description_content_type="text/markdown",
    keywords="power systems, load frequency control, false data injection, MILP, anomaly detection",
    classifiers=[
        "Programming Language :: Python :: 3",
        "Operating System :: OS Independent",
        "Environment :: Console",
        "Topic :: Scientific/Engineering",
    ],
    python_requires=">=3.8",
)
