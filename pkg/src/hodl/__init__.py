"""Hierarchical optimization-derived learning.

Parameterized non-expansive fixed-point operators, the aggregated and
simplified inner iterations, the outer learning loop, and reverse-mode
hypergradients through the unrolled inner loop.
"""

__version__ = "0.1.0"
