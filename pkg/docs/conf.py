"""Configuration file for the Sphinx documentation builder."""
from spurig import __version__

project = "spurig"
copyright = "2026, spurig developers"
author = "spurig developers"
version = release = __version__

extensions = ["myst_parser", "sphinx_design"]

html_theme = "alabaster"
html_title = f"spurig {__version__}"

exclude_patterns = ["_build", "Thumbs.db", ".DS_Store"]
myst_enable_extensions = ["colon_fence", "deflist", "dollarmath"]
