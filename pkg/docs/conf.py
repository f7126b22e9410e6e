# -*- coding: utf-8 -*-
# Sphinx configuration for the smart_bird API reference. Build with `sphinx-build docs docs/_build`

##################################################
# Path Setup
##################################################
import os
import sys

sys.path.insert(0, os.path.abspath(".."))

##################################################
# Project Information
##################################################
project = "smart_bird"
copyright = "2026, the smart-bird developers"
author = "the smart-bird developers"

version = "0.1"  # The short X.Y version
release = "0.1.0"  # The full version, including alpha/beta/rc tags

##################################################
# General Configuration
##################################################
extensions = ["sphinx.ext.autodoc", "sphinx.ext.viewcode", "sphinx.ext.napoleon"]
templates_path = ["_templates"]
source_suffix = ".rst"
master_doc = "index"
exclude_patterns = ["_build", "Thumbs.db", ".DS_Store"]
pygments_style = "sphinx"

##################################################
# AutoDocumentation/Napoleon Settings
##################################################
napoleon_google_docstring = False
napoleon_numpy_docstring = True
autodoc_member_order = "bysource"

##################################################
# Options for HTML Output
##################################################
html_theme = "sphinx_rtd_theme"
html_static_path = []
modindex_common_prefix = ["smart_bird."]
htmlhelp_basename = "smart_birddoc"

##################################################
# Options for Manual Page Output
##################################################
man_pages = [(master_doc, "smart_bird", "smart_bird Documentation", [author], 1)]
