import io
import pathlib
import re

from setuptools import setup

version = re.search(
    r'__version__\s*=\s*[\'"]([^\'"]*)[\'"]',
    io.open('pivdiffuser/__init__.py', encoding='utf_8_sig').read(),
).group(1)

long_description = (pathlib.Path(__file__).parent / 'README.md').read_text()

install_requires = [
    'h5py',
    'matplotlib',
    'numba',
    'numpy',
    'Pillow',
    'scipy',
    'tomlkit',
    'torch',
    'torchvision',
    'tqdm',
]

extras_require = {'test': ['hypothesis', 'pytest']}

setup(
    name='pivdiffuser',
    version=version,
    author='pivdiffuser developers',
    packages=['pivdiffuser'],
    license='MIT',
    description='Diffusion-based optical flow estimation for particle image velocimetry',
    long_description=long_description,
    long_description_content_type='text/markdown',
    install_requires=install_requires,
    extras_require=extras_require,
    entry_points={'console_scripts': ['pivdiffuser = pivdiffuser.cli:main']},
    python_requires='>=3.9',
)
