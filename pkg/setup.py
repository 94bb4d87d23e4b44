#!/usr/bin/env python

from setuptools import setup

MAJOR = 0
MINOR = 1
MICRO = 0
VERSION = '%d.%d.%d' % (MAJOR, MINOR, MICRO)

ENTRY_POINTS = {
    # Command line tool with the gen-dataset, fit, extract, render, eval and
    # bench subcommands.
    'console_scripts': (
        'lumifield = lumifield.cli:main',
    ),
}

KEYWORDS = [
    "radiance field",
    "plenoctree",
    "spherical harmonics",
    "luminaire",
    "hdr rendering",
]


def get_description():
    with open("README.rst") as f:
        return f.read()


if __name__ == '__main__':
    setup(
        name="lumifield",
        version=VERSION,
        license="MIT",
        author="Lumifield contributors",
        description=("Fit, distill and render volumetric radiance field "
                     "luminaires"),
        long_description=get_description(),
        packages=[
            'lumifield',
            'lumifield.tests',
        ],
        python_requires='>=3.7',
        install_requires=[
            'numpy',
            'observable',
            'Pillow',
            'scikit-image>=0.19',
            'scipy',
            'tomli; python_version < "3.11"',
            'tqdm',
        ],
        extras_require={
            'doc': [
                'sphinx',
                'sphinx_rtd_theme',
            ],
            'test': [
                'mock',
                'pytest',
                'pytest-cov',
            ]
        },
        entry_points=ENTRY_POINTS,
        keywords=KEYWORDS,
        include_package_data=True,
        zip_safe=False,
        classifiers=[
            'Development Status :: 3 - Alpha',
            'Environment :: Console',
            'Programming Language :: Python',
            'Programming Language :: Python :: 3',
            'Operating System :: OS Independent',
            'Topic :: Multimedia :: Graphics :: 3D Rendering',
            'Topic :: Scientific/Engineering :: Visualization',
            'Intended Audience :: Science/Research',
            'Intended Audience :: Developers',
        ],
    )
