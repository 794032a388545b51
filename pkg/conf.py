# -*- coding: utf-8 -*-
#
# Configuration file for the Sphinx documentation builder. Build with
#
#   $ sphinx-build -b html . docs/html
#
# Full list of options: https://www.sphinx-doc.org/en/master/usage/configuration.html

import os
import sys
sys.path.insert(0, os.path.abspath('.'))


# -- Project information -----------------------------------------------------

project = 'FedIoT'
copyright = '2026, FedIoT contributors'
author = 'FedIoT contributors'
release = '1.0'


# -- General configuration ---------------------------------------------------

extensions = [
    'sphinx.ext.autodoc',
    'sphinx.ext.intersphinx',
    'sphinx.ext.todo',
    'sphinx.ext.coverage',
    'sphinx.ext.mathjax',
    'sphinx.ext.viewcode',
]

templates_path = ['_templates']
source_suffix = ['.rst']
master_doc = 'index'
language = 'en'

# Run directories, caches and the test suite hold no documentation
exclude_patterns = [
    '_build', 'docs', 'Thumbs.db', '.DS_Store', 'tests', 'runs', 'data', 'examples',
    '.pytest_cache'
]

autodoc_member_order = 'bysource'
pygments_style = None


# -- Options for HTML output -------------------------------------------------

html_theme = 'sphinxdoc'
html_static_path = []
htmlhelp_basename = 'FedIoTdoc'


# -- Options for LaTeX and manual page output --------------------------------

latex_documents = [
    (master_doc, 'FedIoT.tex', 'FedIoT Documentation', author, 'manual'),
]

man_pages = [
    (master_doc, 'fediot', 'FedIoT Documentation', [author], 1)
]


# -- Extension configuration -------------------------------------------------

intersphinx_mapping = {
    'python': ('https://docs.python.org/3', None),
    'numpy': ('https://numpy.org/doc/stable/', None),
    'pandas': ('https://pandas.pydata.org/docs/', None),
}

todo_include_todos = True
