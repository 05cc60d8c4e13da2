"""Pathwise quadratic variation along partition sequences.

Càdlàg paths with explicit jumps, partition sequences and their admissibility
checks, discrete B-quadratic covariations and their limits, and the pathwise
calculus built on them (Föllmer integrals, the Itô formula, C^1 transforms).
"""

__version__ = "0.1.0"
