"""Model-independent replication with path functionals: simulation, PDE
solving, pathwise hedging backtests and drift detection."""

__version__ = "0.1.0"
SPEC_VERSION = "1.0"
