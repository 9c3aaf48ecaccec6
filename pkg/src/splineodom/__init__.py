"""Continuous-time trajectory estimation on non-uniform cumulative B-splines.

Subpackages cover the spline core, adaptive control-point placement,
measurement factors, the sliding-window estimator, world maps, a synthetic
sensor simulator, and the command-line tools.
"""

__version__ = "0.1.0"
