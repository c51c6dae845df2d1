import sys
import setuptools
from setuptools import setup, find_packages

if tuple(int(x) for x in setuptools.__version__.split(".")[:2]) < (40, 0):
    print("Version detected:", setuptools.__version__)
    raise ImportError(
        "scenemap requires setuptools 40.0 or higher")

########################################################################
########################################################################
# collect version
sys.path.insert(0, "scenemap")
import version

version = version.__version__

###############################################################
###############################################################
# Define dependencies
#
major, minor1, minor2, s, tmp = sys.version_info

if major < 3 or (major == 3 and minor1 < 8):
    raise SystemExit("""Requires Python 3.8 or later.""")

scenemap_packages = find_packages(exclude=["tests", "tests.*"])
scenemap_package_dirs = {'scenemap': 'scenemap'}

install_requires = [
    "cgatcore",
    "ruffus",
    "numpy",
    "scipy",
    "pandas",
    "click",
    "pyyaml",
    "torch",
]

##########################################################
##########################################################
# Classifiers
classifiers = """
Development Status :: 3 - Alpha
Intended Audience :: Science/Research
Intended Audience :: Developers
License :: OSI Approved
Programming Language :: Python
Topic :: Software Development
Topic :: Scientific/Engineering
Operating System :: POSIX
Operating System :: Unix
Operating System :: MacOS
"""

setup(
    # package information
    name='scenemap',
    version=version,
    description='scenemap : dense maps between regions of 3D scenes with shared spatial context',
    license="MIT",
    platforms=["any"],
    keywords="3D scenes, descriptor fields, scene correspondence",
    long_description='''scenemap : contextual descriptor fields and coarse-to-fine map estimation between 3D scenes''',
    classifiers=[_f for _f in classifiers.split("\n") if _f],
    url="",
    # package contents
    packages=scenemap_packages,
    package_dir=scenemap_package_dirs,
    package_data={"scenemap": ["pipeline_*/pipeline.yml"]},
    include_package_data=True,
    install_requires=install_requires,
    entry_points={
        "console_scripts": ["scenemap = scenemap.entry:main"]
    },
    # other options
    zip_safe=False,
    test_suite="tests",
)
