from setuptools import setup

setup(
    name='spacedecode',
    version='0.3.0',
    packages=['spacedecode'],
    package_dir={'': 'src'},
    license='MIT',
    description=
    'Semi-autoregressive fine-tuning and auto-correct multi-token decoding for a toy transformer',
    install_requires=[
        'numpy>=1.24',
        'simplejson>=3.17.0',
        'humanfriendly>=4.18',
    ],
    python_requires='>=3.8',
    entry_points={
        'console_scripts': ['spacedecode=spacedecode.main:run'],
    },
    classifiers=[
        'Development Status :: 4 - Beta',

        # Indicate who your project is intended for
        'Intended Audience :: Science/Research',

        # Pick your license as you wish (should match "license" above)
        'License :: OSI Approved :: MIT License',

        'Programming Language :: Python :: 3',
    ],
    keywords='speculative decoding semi-autoregressive transformer',
)
