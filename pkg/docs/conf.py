# Sphinx configuration for the scenemap documentation.
#
# Build with ``sphinx-build docs docs/_build``.

import os
import sys

# make the package importable for autodoc
sys.path.insert(0, os.path.abspath('../'))

from scenemap import version as scenemap_version

# -- General configuration ------------------------------------------------

extensions = ['sphinx.ext.autodoc',
              'sphinx.ext.imgmath',
              'sphinx.ext.intersphinx',
              'sphinx.ext.napoleon']

templates_path = ['_templates']
source_suffix = '.rst'
master_doc = 'index'

project = 'scenemap'
copyright = '2026, scenemap developers'
author = 'scenemap developers'

release = scenemap_version.__version__
version = '.'.join(release.split('.')[:2])

exclude_patterns = ['_build', 'Thumbs.db', '.DS_Store']
pygments_style = 'sphinx'

intersphinx_mapping = {
    'python': ('https://docs.python.org/3', None),
    'numpy': ('https://numpy.org/doc/stable/', None),
    'torch': ('https://pytorch.org/docs/stable/', None),
}

# docstrings are plain text, not numpydoc sections
napoleon_numpy_docstring = False

# Included at the end of each rst file
rst_epilog = '''
.. _python: http://python.org/
.. _sphinx: http://sphinx-doc.org/
.. _ruffus: http://www.ruffus.org.uk/
.. _cgatcore: https://github.com/cgat-developers/cgat-core
.. _pytorch: https://pytorch.org/
.. _git: http://git-scm.com/
'''

# -- Output ---------------------------------------------------------------

html_theme = "sphinx_rtd_theme"
htmlhelp_basename = 'scenemapdoc'

man_pages = [
    (master_doc, 'scenemap', 'scenemap Documentation', [author], 1)
]
