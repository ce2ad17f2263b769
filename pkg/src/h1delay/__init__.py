"""Solvers and verification tools for state-dependent delay equations in ``H^1``.

Modules
-------
grid_function       piecewise-linear functions on uniform grids, weighted norms
weighted_calculus   operator-norm and embedding-constant certification
convex_projection   ``H^1`` projections onto ``V_beta`` and ``W_alpha``
delay_functionals   constant, state-value, threshold and echo delays
picard_solver       projected Picard iteration with ``beta`` continuation
scenarios           end-to-end examples with pass/fail verdicts
cli                 ``h1delay`` command-line entry point
"""

__version__ = "0.1.0"
