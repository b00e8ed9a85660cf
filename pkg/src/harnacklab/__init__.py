"""Numerical verification of differential Harnack inequalities for
``rho' = Laplace rho + <grad rho, X> + U rho``."""

__version__ = "0.1.0"
