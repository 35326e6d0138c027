# Configuration file for the Sphinx documentation builder.
#
# This file only contains a selection of the most common options. For a full
# list see the documentation:
# https://www.sphinx-doc.org/en/master/usage/configuration.html

# -- Path setup --------------------------------------------------------------

import os
import sys

sys.path.insert(0, os.path.abspath('../..'))
import ttsr


# -- Project information -----------------------------------------------------

project = 'ttsr'
author = 'ttsr developers'
copyright = '2026, ttsr developers'

# The full version, including alpha/beta/rc tags
release = ttsr.__version__
version = ttsr.__version__


# -- General configuration ---------------------------------------------------

extensions = [
    'sphinx.ext.autodoc', 'sphinx.ext.autosummary'
]

templates_path = ['_templates']

exclude_patterns = []


# -- Options for HTML output -------------------------------------------------

html_theme = 'sphinx_rtd_theme'

pygments_style = 'sphinx'
