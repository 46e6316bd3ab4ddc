#!/usr/bin/env python3
import setuptools

setuptools.setup(
    name='ragforget',
    version='1.0.0',
    package_dir={'': 'src'},
    packages=setuptools.find_packages('src'),
    entry_points={
        'console_scripts': ['ragforget = ragforget.cli:main']
    },
    install_requires=['numpy>=1.17', 'scipy>=1.4', 'httpx>=0.23', 'psutil'],
    python_requires='>=3.7',

)
