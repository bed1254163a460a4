"""Rough-path numerics for fractional SDEs with Hurst index in (1/3, 1/2).

Subpackages cover dyadic grids and Hoelder-type norms, level-2 rough paths,
Mandelbrot-Van Ness sampling of fractional Brownian motion, Davie-scheme
solvers (including the xi-parametrised hitting system), a drift-stability
checker, fractional drift calculus, and the 3-step coupling scheme with its
tail-of-coupling-time estimator.
"""

from .grid import TimeGrid, GridPath, Increment2, NormReport

__all__ = [
    "TimeGrid",
    "GridPath",
    "Increment2",
    "NormReport",
]

__version__ = "0.1.0"
