from setuptools import setup
import os

here = os.path.abspath(os.path.dirname(__file__))

setup(
    name='xmlp',
    version='0.0.1',
    description="Patch-embedding-free X-MLP image classifiers in numpy",
    packages=['xmlp'],
    include_package_data=True,
    zip_safe=False,
    install_requires=open(os.path.join(
        here, 'xmlp', 'requirements.txt')).readlines(),
    entry_points={
        'console_scripts': [
            'xmlp = xmlp.main:main',
        ],
    },
)
