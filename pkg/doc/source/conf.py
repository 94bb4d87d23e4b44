# -*- coding: utf-8 -*-
#
# Lumifield documentation build configuration file.
#
# Only the settings that differ from the Sphinx defaults are listed here.

import os
import sys

# The package is documented from the source tree, no install needed.
sys.path.insert(0, os.path.abspath('../..'))

from lumifield import __version__  # noqa: E402 pylint: disable=wrong-import-position

# -- General configuration ------------------------------------------------

extensions = [
    'sphinx.ext.autodoc',
    'sphinx.ext.mathjax',
    'sphinx.ext.napoleon',
    'sphinx.ext.viewcode',
]

# Docstrings use the Google style.
napoleon_google_docstring = True
napoleon_numpy_docstring = False
autodoc_member_order = 'bysource'

source_suffix = '.rst'
master_doc = 'index'

project = 'Lumifield'
copyright = '2026, Lumifield contributors'  # pylint: disable=redefined-builtin
author = 'Lumifield contributors'

version = '.'.join(__version__.split('.')[:2])
release = __version__

exclude_patterns = []
pygments_style = 'sphinx'

# -- Options for HTML output ----------------------------------------------

html_theme = 'sphinx_rtd_theme'
htmlhelp_basename = 'Lumifielddoc'

# -- Options for manual page output ---------------------------------------

man_pages = [
    (master_doc, 'lumifield', 'Lumifield Documentation', [author], 1)
]
