from setuptools import setup


long_description = '''
se2net
======

se2net builds, trains and audits roto-translation equivariant convolutional
networks on 2D images.

* Lift images to functions on positions and orientations with rotated copies
  of one learned kernel, then convolve on that group without losing track of
  orientation

* Reproduce the mitosis, nuclei and tumor architectures from their presets,
  or describe your own as an ordered list of blocks

* Train on directories of SE2T patches with a deterministic SGD loop, and
  audit what you trained: polar responses, equivariance errors, and
  re-aligned prediction statistics

Everything runs on numpy and scipy; there is no GPU code.
'''

setup(
    name='se2net',
    version='0.1.0',
    description='Roto-translation equivariant CNNs: build, train and audit.',
    long_description=long_description,
    license='MIT',
    packages=[
        'se2net',
        'se2net.layers',
        'se2net.training',
        'se2net.utils',
    ],
    install_requires=[
        'numpy',
        'scipy',
    ],
    tests_require=[
        'mock',
    ],
    entry_points={
        'console_scripts': [
            'se2net = se2net.cli:main',
        ],
    },
    classifiers=[
        'Development Status :: 3 - Alpha',
        'Environment :: Console',
        'Programming Language :: Python',
        'Programming Language :: Python :: 3',
        'License :: OSI Approved :: MIT License',
        'Topic :: Scientific/Engineering :: Image Recognition',
    ],
)
