"""Multi-patch isogeometric Poisson solvers with geometric multigrid."""

__version__ = "0.1.0"
