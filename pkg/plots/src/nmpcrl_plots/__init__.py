"""Figure generation for nmpcrl training logs."""

from .figures import FIGURE_KINDS, FigureSpec, RunData, SchemaError, load_run, render

__version__ = "0.1.0"
