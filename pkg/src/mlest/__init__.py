"""Multilevel a posteriori estimates of algebraic and total errors for P1 Poisson problems.

Modules
-------
mesh         uniformly refined simplicial hierarchies on the unit square/cube
assembly     P1 stiffness, mass and scaled mass matrices, load vectors
transfer     prolongations and residual restriction
solver       Gauss-Seidel, CG, PCG with error bounds, multigrid V-cycle
estimator    fine and coarse terms, estimate families, efficiency indices
experiments  desk-scale robustness experiments and reports
cli          command-line entry point
"""

__version__ = "0.1.0"
