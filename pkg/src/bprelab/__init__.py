"""Numerical lab for multitype branching processes in i.i.d. random environment.

Computes moment Lyapunov curves and transfer-operator eigendata for products
of random positive matrices, runs tilted-measure importance sampling for the
survival probability, and verifies the lemma-level machinery (harmonic
function, first-passage tails, reciprocal-survival identities) against
enumeration and lattice oracles.
"""

__version__ = "0.1.0"
