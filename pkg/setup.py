from setuptools import setup, find_packages

setup(
    name="cgflow",
    version="0.1.0",
    packages=find_packages(exclude=["examples", "examples.*"]),
    py_modules=["config"],
    install_requires=[
        'numpy>=1.24.0',
        'scipy>=1.10.0',
        'scikit-learn>=1.3.0',
        'pydantic>=2.0.0',
        'python-dotenv>=0.19.0',
    ],
    python_requires='>=3.9',
    include_package_data=True,
    package_data={
        '': ['*.cfg'],
    },
    entry_points={
        'console_scripts': [
            'cgflow=cli.main:main',
        ],
    },
)
