#!/usr/bin/env python
# -*- coding: utf-8 -*-

from pathlib import Path
from setuptools import setup, find_packages

import pymemrecon


python_requires = '>=3.8'


requirements_file = Path('requirements.txt')
with open(requirements_file, 'r') as req_fh:
    # Note this assumes each requirement contains no spaces but may be
    #   followed by whitespace and a comment on the same line.
    python_requirements = [
        requirement.strip().split()[0]
        for requirement in req_fh.readlines()
        if requirement.strip()
    ]


readme_file = Path('README.rst')
with open(readme_file, 'r') as long_desc_fh:
    long_description = long_desc_fh.read()


setup(
    name='pymemrecon',
    version=pymemrecon.__version__,
    description=(
        'A desk-scale, trainable incremental 3D reconstruction model that '
        'regresses per-frame pointmaps in a global frame by reading from and '
        'writing to a two-tier spatial memory, with its training objective, '
        'curriculum, inference pipelines and evaluation metrics.'
    ),
    long_description=long_description,
    long_description_content_type='text/x-rst',
    keywords=[
        'pointmap',
        '3D reconstruction',
        'spatial memory',
        'autodiff',
    ],
    packages=find_packages(
        include=[
            'pymemrecon',
            'pymemrecon.*'
        ]
    ),
    py_modules=[
    ],
    entry_points={
        'console_scripts': [
            'pymemrecon = pymemrecon.cli:main',
        ],
    },
    exclude_package_data={
        '': ['__pycache__', '*.py[co]'],
    },
    install_requires=python_requirements,
    classifiers=[
        'Development Status :: 4 - Beta',
        'Environment :: Console',
        'Intended Audience :: Science/Research',
        'Programming Language :: Python :: 3',
        'Programming Language :: Python :: 3.8',
        'Programming Language :: Python :: 3.9',
        'Programming Language :: Python :: 3.10',
        'Programming Language :: Python :: 3.11',
        'Topic :: Scientific/Engineering :: Image Recognition',
        'Operating System :: POSIX :: Linux',
        'Operating System :: MacOS'
    ],
    python_requires=python_requires,
)
