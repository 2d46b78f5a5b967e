import setuptools

setuptools.setup(
    name='LazyCollabBA',
    version='0.1.0',
    author='Mr. Lance E Sloan',
    author_email='lsloan-github.com@umich.edu',
    description='Lazily aggregated reduced preconditioned gradient solver '
                'for collaborative (multi-agent) bundle adjustment.',
    long_description=open('README.md').read(),
    long_description_content_type='text/markdown',
    packages=setuptools.find_packages(exclude=['tests', 'tests.*']),
    classifiers=[
        'Programming Language :: Python :: 3',
        'Operating System :: OS Independent',
        'Development Status :: 3 - Alpha',
        'Topic :: Scientific/Engineering :: Mathematics',
        'Topic :: Scientific/Engineering :: Image Recognition', ],
    keywords=[
        'bundle adjustment', 'collaborative SLAM', 'distributed optimization',
        'lazy aggregation', 'Schur complement', 'preconditioned gradient', ],
    python_requires='>=3.10',
    data_files=[('/', ['requirements.txt'])],
    install_requires=[
        r.split('=')[0] for r in open('requirements.txt').read().split()],
    entry_points={
        'console_scripts': ['larpg=LazyCollabBA.Cli:main', ], },
)
