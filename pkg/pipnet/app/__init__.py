"""
PIPNet at desk scale: a numpy autodiff engine, pixel-in-pixel landmark
heads, synthetic face domains, curriculum self-training and the evaluation
and benchmarking tools around them.

The command-line entry point lives in `app.main`.
"""

__version__ = "0.1.0"

__all__ = ["__version__"]
