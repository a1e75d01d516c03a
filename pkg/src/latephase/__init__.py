"""Late-phase weight learning: shared-base ensembles collapsed by weight averaging,
plus a noisy quadratic problem suite for the steady-state loss analysis."""

__version__ = "0.1.0"
